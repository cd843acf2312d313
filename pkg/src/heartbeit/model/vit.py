"""Pre-norm vision transformer encoder with masked-token and class heads."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from ..errors import ArgumentError, ModelError
from ..raster import PatchGrid
from ..tokenizer import TokenGrid
from . import autodiff as ad
from .autodiff import Tape, Var

Params = Dict[str, np.ndarray]

HEAD_PREFIXES = ("cls_head.",)
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 12
    hidden: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0
    patch_size: int = 16
    image_side: int = 224
    channels: int = 1
    vocab_size: int = 8192
    n_classes: int = 2
    dropout: float = 0.0
    ln_eps: float = 1e-6
    # feed 1 - pixel so the white page embeds to the bias alone and only ink
    # contributes; raw white patches share one large embedding that drowns
    # the trace detail
    invert_input: bool = True

    def __post_init__(self):
        if self.layers < 0 or self.hidden <= 0 or self.heads <= 0:
            raise ModelError(f"invalid transformer size: {self}")
        if self.hidden % self.heads:
            raise ModelError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.patch_size <= 0 or self.image_side % self.patch_size:
            raise ModelError(f"image_side ({self.image_side}) must be divisible by patch_size ({self.patch_size})")
        if self.vocab_size < 2 or self.n_classes < 2 or self.channels < 1:
            raise ModelError(f"invalid head sizes: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.hidden * self.mlp_ratio))

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def block_shapes(config: ModelConfig, i: int) -> Dict[str, Tuple[int, ...]]:
    d, m = config.hidden, config.mlp_hidden
    p = f"blocks.{i}."
    shapes = {p + "norm1.weight": (d,), p + "norm1.bias": (d,)}
    for proj in ("q", "k", "v", "o"):
        shapes[p + f"attn.{proj}.weight"] = (d, d)
        shapes[p + f"attn.{proj}.bias"] = (d,)
    shapes.update(
        {
            p + "norm2.weight": (d,),
            p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, m),
            p + "mlp.fc1.bias": (m,),
            p + "mlp.fc2.weight": (m, d),
            p + "mlp.fc2.bias": (d,),
        }
    )
    return shapes


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every learnable array, in canonical order."""
    d = config.hidden
    shapes = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (config.n_patches + 1, d),
        "mask_token": (d,),
    }
    for i in range(config.layers):
        shapes.update(block_shapes(config, i))
    shapes.update(
        {
            "norm.weight": (d,),
            "norm.bias": (d,),
            "mim_head.weight": (d, config.vocab_size),
            "mim_head.bias": (config.vocab_size,),
            "cls_head.weight": (d, config.n_classes),
            "cls_head.bias": (config.n_classes,),
        }
    )
    return shapes


def count_params(config: ModelConfig) -> int:
    return int(sum(np.prod(s, dtype=np.int64) for s in param_shapes(config).values()))


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter name, so e.g. the class head initializes
    # identically whatever the encoder looks like
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def init_params(config: ModelConfig, seed: int, dtype=np.float32, std: float = INIT_STD) -> Params:
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            value = np.zeros(shape)
        elif "norm" in name and name.endswith(".weight"):
            value = np.ones(shape)
        else:
            value = _param_rng(seed, name).normal(0.0, std, size=shape)
        params[name] = value.astype(dtype)
    return params


def check_params(params: Params, config: ModelConfig) -> None:
    expected = param_shapes(config)
    missing = [k for k in expected if k not in params]
    if missing:
        raise ModelError(f"missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ModelError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


def is_head(name: str) -> bool:
    return name.startswith(HEAD_PREFIXES)


# --------------------------------------------------------------------------
# input normalization
# --------------------------------------------------------------------------


def as_patch_batch(patches, config: ModelConfig) -> Tuple[np.ndarray, bool]:
    """Return (B, N, patch_dim) patch vectors and whether the input was a single image."""
    if isinstance(patches, PatchGrid):
        x = patches.vectors()
        if config.channels > 1:
            x = np.repeat(x, config.channels, axis=-1)
    else:
        x = np.asarray(patches)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.n_patches, config.patch_dim):
        raise ModelError(
            f"expected patches of shape (B, {config.n_patches}, {config.patch_dim}), got {np.shape(patches)}"
        )
    return x, single


def as_mask(mask, batch: int, config: ModelConfig) -> Optional[np.ndarray]:
    """Normalize an index set (single image) or (B, N) boolean array to a boolean mask."""
    if mask is None:
        return None
    m = np.asarray(mask)
    n = config.n_patches
    if m.dtype == bool:
        if m.ndim == 1:
            m = m[None]
        if m.shape != (batch, n):
            raise ModelError(f"boolean mask must have shape ({batch}, {n}), got {m.shape}")
        return m
    idx = m.astype(np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ModelError(f"mask indices out of range [0, {n})")
    out = np.zeros((batch, n), dtype=bool)
    out[:, idx] = True
    return out


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------


@dataclass
class Capture:
    """Intermediates recorded during a forward pass."""

    attention: List[np.ndarray] = field(default_factory=list)  # (B, heads, T, T) per block
    norm1: List[Var] = field(default_factory=list)  # attention-input activations per block
    biased: List[Tuple[str, Var]] = field(default_factory=list)  # (bias name, output) of every biased op


def _linear(P: Dict[str, Var], name: str, x: Var, capture: Optional[Capture]) -> Var:
    y = ad.linear(x, P[name + ".weight"], P[name + ".bias"])
    if capture is not None:
        capture.biased.append((name + ".bias", y))
    return y


def _norm(P: Dict[str, Var], name: str, x: Var, eps: float, capture: Optional[Capture]) -> Var:
    y = ad.layer_norm(x, P[name + ".weight"], P[name + ".bias"], eps)
    if capture is not None:
        capture.biased.append((name + ".bias", y))
    return y


def bind(tape: Tape, params: Params, trainable: Optional[Iterable[str]] = None) -> Dict[str, Var]:
    """Wrap parameter arrays as tape variables; only ``trainable`` names get gradients."""
    names = set(params) if trainable is None else set(trainable)
    return {k: tape.var(v, k) if k in names else tape.const(v) for k, v in params.items()}


def _attention(P: Dict[str, Var], i: int, x: Var, config: ModelConfig, capture: Optional[Capture]) -> Var:
    b, t, d = x.value.shape
    h, dh = config.heads, config.head_dim
    p = f"blocks.{i}.attn."

    def split(name):
        y = _linear(P, p + name, x, capture)
        return ad.transpose(ad.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / float(np.sqrt(dh)))
    probs = ad.softmax(scores)
    if capture is not None:
        capture.attention.append(probs.value)
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    return _linear(P, p + "o", ctx, capture)


def encode(
    P: Dict[str, Var],
    config: ModelConfig,
    x: np.ndarray,
    mask: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    capture: Optional[Capture] = None,
) -> Var:
    """Token representations (B, 1 + N, hidden) after the final layer norm."""
    tape = P["patch_embed.weight"].tape
    eps = config.ln_eps
    if config.invert_input:
        x = 1.0 - x
    h = _linear(P, "patch_embed", tape.const(x), capture)
    if mask is not None and mask.any():
        h = ad.replace_rows(h, mask, P["mask_token"])
    h = ad.add(ad.prepend_token(h, P["cls_token"]), P["pos_embed"])
    for i in range(config.layers):
        p = f"blocks.{i}."
        y = _norm(P, p + "norm1", h, eps, capture)
        if capture is not None:
            capture.norm1.append(y)
        h = ad.add(h, ad.dropout(_attention(P, i, y, config, capture), config.dropout, rng))
        y = _norm(P, p + "norm2", h, eps, capture)
        y = ad.gelu(_linear(P, p + "mlp.fc1", y, capture))
        y = _linear(P, p + "mlp.fc2", y, capture)
        h = ad.add(h, ad.dropout(y, config.dropout, rng))
    return _norm(P, "norm", h, eps, capture)


def class_logits(P: Dict[str, Var], config: ModelConfig, x: np.ndarray, rng=None, capture=None) -> Var:
    tokens = encode(P, config, x, None, rng, capture)
    return ad.linear(ad.getitem(tokens, (slice(None), 0)), P["cls_head.weight"], P["cls_head.bias"])


def forward_encoder(params: Params, config: ModelConfig, patches, mask=None, capture: Optional[Capture] = None) -> np.ndarray:
    """Final token representations; (1 + N, hidden) for one image, (B, 1 + N, hidden) for a batch."""
    check_params(params, config)
    x, single = as_patch_batch(patches, config)
    m = as_mask(mask, x.shape[0], config)
    out = encode(bind(Tape(), params, ()), config, x, m, capture=capture).value
    return out[0] if single else out


def _targets(token_targets, batch: int, config: ModelConfig) -> np.ndarray:
    t = token_targets.tokens if isinstance(token_targets, TokenGrid) else np.asarray(token_targets)
    t = t.reshape(batch, config.n_patches).astype(np.int64)
    if t.min() < 0 or t.max() >= config.vocab_size:
        raise ModelError(f"token targets outside [0, {config.vocab_size})")
    return t


def mim_loss(
    params: Params,
    config: ModelConfig,
    patches,
    token_targets,
    mask,
    rng: Optional[np.random.Generator] = None,
    trainable: Optional[Iterable[str]] = None,
) -> Tuple[float, Params]:
    """Mean cross-entropy of the masked-token head over masked positions only."""
    check_params(params, config)
    x, _ = as_patch_batch(patches, config)
    m = as_mask(mask, x.shape[0], config)
    if m is None or not m.any():
        raise ArgumentError("masked-token loss needs at least one masked position")
    targets = _targets(token_targets, x.shape[0], config)
    tape = Tape()
    P = bind(tape, params, trainable)
    tokens = encode(P, config, x, m, rng)
    masked = ad.getitem(ad.getitem(tokens, (slice(None), slice(1, None))), m)
    logits = ad.linear(masked, P["mim_head.weight"], P["mim_head.bias"])
    loss = ad.cross_entropy(logits, targets[m])
    tape.backward(loss)
    return float(loss.value), {k: v.grad for k, v in P.items() if v.requires_grad and v.grad is not None}


def cls_forward(params: Params, config: ModelConfig, patches, batch_size: int = 64) -> np.ndarray:
    """Class logits; (n_classes,) for one image, (B, n_classes) for a batch."""
    check_params(params, config)
    x, single = as_patch_batch(patches, config)
    outs = []
    for lo in range(0, x.shape[0], batch_size):
        P = bind(Tape(), params, ())
        outs.append(class_logits(P, config, x[lo : lo + batch_size]).value)
    out = np.concatenate(outs, axis=0)
    return out[0] if single else out


def cls_loss(
    params: Params,
    config: ModelConfig,
    patches,
    labels,
    rng: Optional[np.random.Generator] = None,
    trainable: Optional[Iterable[str]] = None,
) -> Tuple[float, Params]:
    """Mean cross-entropy of the class head and its gradients."""
    check_params(params, config)
    x, _ = as_patch_batch(patches, config)
    y = np.asarray(labels, dtype=np.int64).reshape(x.shape[0])
    tape = Tape()
    P = bind(tape, params, trainable)
    loss = ad.cross_entropy(class_logits(P, config, x, rng), y)
    tape.backward(loss)
    return float(loss.value), {k: v.grad for k, v in P.items() if v.requires_grad and v.grad is not None}


def softmax_np(logits: np.ndarray) -> np.ndarray:
    return np.exp(ad.log_softmax_np(np.asarray(logits, dtype=np.float64)))
