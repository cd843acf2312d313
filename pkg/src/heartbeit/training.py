"""Optimizers, the one-cycle schedule, masked-token pre-training and fine-tuning."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ArgumentError, SplitError, TrainingError
from .evaluation.metrics import EvalReport, ScoredSet, auprc, auroc, evaluate
from .ingest import SplitPlan
from .model.checkpoint import Checkpoint, save_checkpoint
from .model.vit import ModelConfig, Params, cls_forward, cls_loss, init_params, is_head, mim_loss, softmax_np
from .raster import patchify
from .tokenizer import Codebook, encode_vectors

log = logging.getLogger(__name__)

PRETRAIN_LR = 5e-4
MASK_RATIO = 0.40


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str  # "adam" or "adamw"
    lr: float
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def hyper(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "step_count": self.step_count}

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def restore(cls, hyper: dict, arrays: Mapping[str, np.ndarray]) -> "OptimizerState":
        m = {k[2:]: a for k, a in arrays.items() if k.startswith("m/")}
        v = {k[2:]: a for k, a in arrays.items() if k.startswith("v/")}
        return cls(hyper["kind"], hyper["lr"], tuple(hyper["betas"]), hyper["eps"], hyper["weight_decay"], m, v,
                   hyper["step_count"])


def make_optimizer(kind: str, lr: float, weight_decay: Optional[float] = None) -> OptimizerState:
    if kind not in ("adam", "adamw"):
        raise ArgumentError(f"unknown optimizer {kind!r}")
    if weight_decay is None:
        weight_decay = 0.05 if kind == "adamw" else 0.0
    return OptimizerState(kind, lr, weight_decay=weight_decay)


def optimizer_step(
    state: OptimizerState, params: Params, grads: Mapping[str, np.ndarray], lr: Optional[float] = None
) -> Tuple[Params, OptimizerState]:
    """One Adam/AdamW step over the parameters that received gradients.

    AdamW additionally shrinks each updated parameter by ``lr * weight_decay``
    (decoupled from the adaptive step). Inputs are not modified.
    """
    for name, g in grads.items():
        if name not in params or np.shape(g) != params[name].shape:
            raise TrainingError(f"gradient {name} does not match any parameter shape")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}; step aborted")
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    t = state.step_count + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        mk = b1 * m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        vk = b2 * v.get(name, np.zeros_like(p)) + (1.0 - b2) * (g * g)
        step = lr * (mk / c1) / (np.sqrt(vk / c2) + state.eps)
        if state.kind == "adamw" and state.weight_decay:
            p = p - lr * state.weight_decay * p
        new_params[name] = (p - step).astype(params[name].dtype)
        m[name], v[name] = mk.astype(p.dtype), vk.astype(p.dtype)
    return new_params, replace(state, m=m, v=v, step_count=t)


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OneCycleSchedule:
    total_steps: int
    base_lr: float = 3e-4
    max_lr: float = 1e-3
    warmup_fraction: float = 0.3
    final_div: float = 25.0

    @property
    def final_lr(self) -> float:
        return self.base_lr / self.final_div

    @property
    def peak_step(self) -> int:
        return max(1, int(math.floor(self.warmup_fraction * self.total_steps)))


def onecycle_lr(schedule: OneCycleSchedule, step: int) -> float:
    """Cosine ramp base -> max until the peak step, then cosine anneal max -> final."""
    total = schedule.total_steps
    if total < 2:
        raise ArgumentError(f"one-cycle schedule needs at least 2 steps, got {total}")
    if not 0 <= step <= total:
        raise ArgumentError(f"step {step} outside [0, {total}]")
    peak = schedule.peak_step
    if step <= peak:
        frac = step / peak
        lo, hi = schedule.base_lr, schedule.max_lr
    else:
        frac = 1.0 - (step - peak) / (total - peak)
        lo, hi = schedule.final_lr, schedule.max_lr
    return lo + (hi - lo) * (1.0 - math.cos(math.pi * frac)) / 2.0


# --------------------------------------------------------------------------
# run records
# --------------------------------------------------------------------------

RUN_FIELDS = ("epoch", "split", "loss", "auroc", "auprc", "lr", "seconds")


@dataclass
class RunRecord:
    seed: int
    config_hash: str = ""
    rows: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def log(self, epoch: int, split: str, loss=None, auroc=None, auprc=None, lr=None, seconds=None) -> None:
        epochs = sorted({r["epoch"] for r in self.rows})
        if epoch not in epochs and epoch != (epochs[-1] + 1 if epochs else 0):
            raise TrainingError(f"epoch {epoch} breaks the contiguous epoch sequence {epochs}")
        self.rows.append(dict(epoch=epoch, split=split, loss=loss, auroc=auroc, auprc=auprc, lr=lr, seconds=seconds))

    def series(self, split: str, key: str) -> List[float]:
        return [r[key] for r in self.rows if r["split"] == split]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_FIELDS)
        for r in self.rows:
            w.writerow(["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in RUN_FIELDS])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"seed": self.seed, "config_hash": self.config_hash, "summary": self.summary}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def write(self, stem) -> None:
        stem = Path(stem)
        stem.with_suffix(".csv").write_text(self.to_csv())
        stem.with_suffix(".json").write_text(self.to_json())


# --------------------------------------------------------------------------
# pre-training
# --------------------------------------------------------------------------


def mask_count(n_patches: int, ratio: float) -> int:
    return int(math.floor(ratio * n_patches + 0.5))


def sample_mask(rng: np.random.Generator, batch: int, n_patches: int, ratio: float = MASK_RATIO) -> np.ndarray:
    """(batch, n_patches) boolean masks, each with exactly ``mask_count`` distinct positions."""
    k = mask_count(n_patches, ratio)
    if not 1 <= k <= n_patches:
        raise ArgumentError(f"mask ratio {ratio} gives {k} masked positions of {n_patches}")
    order = np.argsort(rng.random((batch, n_patches)), axis=1)[:, :k]
    mask = np.zeros((batch, n_patches), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


@dataclass
class PretrainResult:
    params: Params
    optimizer: OptimizerState
    record: RunRecord


def pretrain(
    images: np.ndarray,
    codebook: Codebook,
    config: ModelConfig,
    epochs: int,
    seed: int,
    mask_ratio: float = MASK_RATIO,
    batch_size: int = 32,
    lr: float = PRETRAIN_LR,
    weight_decay: float = 0.05,
    config_hash: str = "",
    checkpoint_dir=None,
    checkpoint_every: int = 0,
    init: Optional[Params] = None,
) -> PretrainResult:
    """Masked-token pre-training with AdamW at a constant learning rate.

    ``images`` is a (B, side, side) stack; targets are the codebook tokens
    of the unmasked images, computed once.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3 or images.shape[0] == 0:
        raise ArgumentError(f"need a non-empty (B, H, W) image stack, got {images.shape}")
    patches = patchify(images, config.patch_size, config.channels)
    if codebook.patch_dim != config.patch_dim:
        raise ArgumentError(f"codebook dim {codebook.patch_dim} != model patch dim {config.patch_dim}")
    if codebook.vocab_size != config.vocab_size:
        raise ArgumentError(f"codebook vocab {codebook.vocab_size} != model vocab {config.vocab_size}")
    targets = encode_vectors(patches, codebook)

    rng = np.random.default_rng(seed)
    params = init if init is not None else init_params(config, seed)
    trainable = [k for k in params if not is_head(k)]
    opt = make_optimizer("adamw", lr, weight_decay)
    record = RunRecord(seed, config_hash)
    n = patches.shape[0]
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            mask = sample_mask(rng, idx.size, config.n_patches, mask_ratio)
            loss, grads = mim_loss(params, config, patches[idx], targets[idx], mask, rng, trainable)
            params, opt = optimizer_step(opt, params, grads)
            losses.append((loss, idx.size))
        epoch_loss = sum(l * k for l, k in losses) / n
        record.log(epoch, "pretrain", loss=epoch_loss, lr=lr, seconds=time.perf_counter() - t0)
        log.info("pretrain epoch %d loss %.4f", epoch, epoch_loss)
        if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0 and epoch + 1 < epochs:
            ckpt = Checkpoint(config, params, opt.arrays(), {"optimizer": opt.hyper(), "epoch": epoch + 1, "stage": "pretrain"}, config_hash)
            save_checkpoint(ckpt, Path(checkpoint_dir) / f"pretrain-epoch{epoch + 1:04d}.hbck")
    losses = record.series("pretrain", "loss")
    record.summary = {"epochs": epochs, "first_epoch_loss": losses[0] if losses else None,
                      "final_epoch_loss": losses[-1] if losses else None, "mask_ratio": mask_ratio,
                      "masked_per_image": mask_count(config.n_patches, mask_ratio), "lr": lr, "n_images": n}
    return PretrainResult(params, opt, record)


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------


def classifier_init(config: ModelConfig, seed: int, pretrained: Optional[Params] = None) -> Params:
    """Fresh parameters with the encoder optionally copied from a pre-trained model.

    The class head always comes from ``init_params(config, seed)``, so runs
    with and without pre-training differ only in the encoder.
    """
    params = init_params(config, seed)
    if pretrained is not None:
        for name in params:
            if not is_head(name):
                params[name] = np.asarray(pretrained[name], dtype=params[name].dtype).copy()
    return params


def predict_scores(params: Params, config: ModelConfig, patches: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Positive-class probability per image."""
    return softmax_np(cls_forward(params, config, patches, batch_size))[:, 1]


@dataclass
class FinetuneResult:
    best_epoch: int
    best_params: Params
    best_scores: np.ndarray
    record: RunRecord
    final_params: Params


def finetune(
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    config: ModelConfig,
    seed: int,
    pretrained: Optional[Params] = None,
    epochs: int = 30,
    batch_size: int = 32,
    base_lr: float = 3e-4,
    max_lr: float = 1e-3,
    head_only: bool = False,
    config_hash: str = "",
) -> FinetuneResult:
    """Adam + one-cycle fine-tuning, keeping the epoch with the best test AUROC."""
    x_train = patchify(np.asarray(train_images, dtype=np.float32), config.patch_size, config.channels)
    x_test = patchify(np.asarray(test_images, dtype=np.float32), config.patch_size, config.channels)
    y_train = np.asarray(train_labels, dtype=np.int64)
    y_test = np.asarray(test_labels, dtype=np.int64)
    if x_train.shape[0] == 0:
        raise SplitError("empty training set")

    rng = np.random.default_rng(seed)
    params = classifier_init(config, seed, pretrained)
    trainable = [k for k in params if is_head(k) or not head_only]
    opt = make_optimizer("adam", base_lr)
    n = x_train.shape[0]
    steps_per_epoch = math.ceil(n / batch_size)
    schedule = OneCycleSchedule(max(2, epochs * steps_per_epoch), base_lr, max_lr)
    record = RunRecord(seed, config_hash)
    best = (-1.0, -1, params, None)
    step = 0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, lr = 0.0, base_lr
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            lr = onecycle_lr(schedule, min(step, schedule.total_steps))
            loss, grads = cls_loss(params, config, x_train[idx], y_train[idx], rng, trainable)
            params, opt = optimizer_step(opt, params, grads, lr=lr)
            total += loss * idx.size
            step += 1
        seconds = time.perf_counter() - t0
        record.log(epoch, "train", loss=total / n, lr=lr, seconds=seconds)
        scores = predict_scores(params, config, x_test)
        test = ScoredSet(scores, y_test)
        roc, pr = auroc(test), auprc(test)
        record.log(epoch, "test", auroc=roc, auprc=pr, seconds=time.perf_counter() - t0 - seconds)
        log.info("finetune epoch %d loss %.4f test auroc %.4f", epoch, total / n, roc)
        if roc > best[0]:
            best = (roc, epoch, params, scores)
    record.summary = {"best_epoch": best[1], "best_auroc": best[0], "epochs": epochs, "n_train": n,
                      "n_test": int(y_test.size), "pretrained": pretrained is not None, "head_only": head_only}
    return FinetuneResult(best[1], best[2], best[3], record, params)


@dataclass
class SweepEntry:
    fraction: float
    report: EvalReport
    result: FinetuneResult
    test_ids: List[str]


def finetune_sweep(
    images: Mapping[str, np.ndarray],
    labels: Mapping[str, int],
    plan: SplitPlan,
    config: ModelConfig,
    seed: int,
    pretrained: Optional[Params] = None,
    fractions: Optional[Sequence[float]] = None,
    epochs: int = 30,
    n_bootstrap: int = 500,
    split_tag: str = "test",
    **kwargs,
) -> Dict[float, SweepEntry]:
    """Fine-tune once per training fraction and evaluate on the common test set."""
    fractions = plan.fractions if fractions is None else fractions
    test_ids = list(plan.test_ids)
    missing = [i for i in test_ids if i not in images or i not in labels]
    if missing:
        raise ArgumentError(f"{len(missing)} test records lack an image or label, e.g. {missing[:3]}")
    x_test = np.stack([images[i] for i in test_ids])
    y_test = np.array([labels[i] for i in test_ids])
    out = {}
    for f in fractions:
        if f not in plan.train_ids_by_fraction:
            raise SplitError(f"fraction {f} is not part of the split plan {plan.fractions}")
        train_ids = [i for i in plan.train_ids_by_fraction[f] if i in labels]
        if not train_ids:
            raise SplitError(f"training fraction {f} is empty")
        x_train = np.stack([images[i] for i in train_ids])
        y_train = np.array([labels[i] for i in train_ids])
        res = finetune(x_train, y_train, x_test, y_test, config, seed, pretrained, epochs=epochs, **kwargs)
        report = evaluate(ScoredSet(res.best_scores, y_test, test_ids), n_bootstrap=n_bootstrap, seed=seed,
                          fraction=f, split_tag=split_tag)
        out[f] = SweepEntry(f, report, res, test_ids)
    return out
