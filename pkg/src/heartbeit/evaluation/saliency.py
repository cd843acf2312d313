"""Grad-CAM attribution maps for the transformer classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..errors import ModelError, SaliencyError
from ..model import autodiff as ad
from ..model.vit import Capture, ModelConfig, Params, as_patch_batch, bind, check_params, class_logits
from ..raster import RasterImage, patchify

OVERLAY_ALPHA = 0.4
METHODS = ("gradcam", "channel", "fullgrad")


@dataclass(frozen=True)
class SaliencyMap:
    grid: np.ndarray  # (rows, cols) in [0, 1]
    overlay: np.ndarray  # (H, W) bilinear upsample of ``grid``
    target_class: int
    logits: np.ndarray


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights with half-pixel centres and clamped edges."""
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    w = np.zeros((n_out, n_in))
    np.add.at(w, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(w, (np.arange(n_out), hi), frac)
    return w


def normalize_map(cam: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; an all-zero map is returned unchanged."""
    cam = np.maximum(np.asarray(cam, dtype=np.float64), 0.0)
    hi, lo = cam.max(), cam.min()
    if hi <= 0.0:
        return np.zeros_like(cam)
    if hi == lo:
        return np.ones_like(cam)
    return (cam - lo) / (hi - lo)


def saliency(
    params: Optional[Params],
    config: ModelConfig,
    image,
    target_class: int = 1,
    method: str = "gradcam",
) -> SaliencyMap:
    """Patch-level attribution map for one image.

    ``gradcam`` works on the attention input of the last encoder block:
    each token is weighted by its gradient averaged over hidden channels
    and multiplied by its summed activation. ``channel`` is the classic
    CNN form on the same activations, weighting each channel by its
    gradient averaged over tokens. Both keep only positive evidence.
    ``fullgrad`` sums per-token |gradient x bias| over every biased layer
    plus |input gradient x input|, each term min-max normalized first.
    The map is reshaped to the patch grid, min-max normalized and
    upsampled bilinearly to the image size.
    """
    if params is None:
        raise SaliencyError("saliency needs a trained classifier checkpoint")
    if method not in METHODS:
        raise SaliencyError(f"unknown saliency method {method!r}")
    if config.layers < 1:
        raise SaliencyError("saliency needs at least one encoder block")
    try:
        check_params(params, config)
    except ModelError as exc:
        raise SaliencyError(f"unusable checkpoint: {exc}") from exc
    if not 0 <= target_class < config.n_classes:
        raise SaliencyError(f"target class {target_class} outside [0, {config.n_classes})")

    pixels = np.asarray(getattr(image, "pixels", image), dtype=np.float32)
    x, _ = as_patch_batch(patchify(pixels[None], config.patch_size, config.channels), config)
    tape = ad.Tape()
    P = bind(tape, params)
    capture = Capture()
    logits = class_logits(P, config, x, capture=capture)
    seed = np.zeros_like(logits.value)
    seed[0, target_class] = 1.0
    tape.backward(logits, seed=seed)

    if method == "fullgrad":
        cam = _fullgrad(params, config, x[0], capture)
    else:
        act = capture.norm1[-1]
        a = act.value[0, 1:].astype(np.float64)
        g = _grad(act)[1:]
        cam = g.mean(axis=1) * a.sum(axis=1) if method == "gradcam" else a @ g.mean(axis=0)
    side = config.grid_side
    grid = normalize_map(cam).reshape(side, side)
    up_r = bilinear_matrix(side, pixels.shape[0])
    up_c = bilinear_matrix(side, pixels.shape[1])
    overlay = np.clip(up_r @ grid @ up_c.T, 0.0, 1.0)
    return SaliencyMap(grid, overlay, target_class, logits.value[0].copy())


def _grad(v) -> np.ndarray:
    """Gradient of the first batch item; zeros when nothing flowed back."""
    return np.zeros(v.value.shape[1:]) if v.grad is None else v.grad[0].astype(np.float64)


def _fullgrad(params: Params, config: ModelConfig, patches: np.ndarray, capture: Capture) -> np.ndarray:
    n = config.n_patches
    terms = []
    for name, out in capture.biased:
        g = _grad(out)[-n:]  # patch tokens; the class token, if present, comes first
        terms.append(np.abs(g * params[name]).sum(axis=1))
        if name == "patch_embed.bias":
            seen = 1.0 - patches if config.invert_input else patches
            terms.append(np.abs((g @ params["patch_embed.weight"].T) * seen).sum(axis=1))
    return sum(normalize_map(t) for t in terms)


def heat_rgb(values: np.ndarray) -> np.ndarray:
    """Blue-to-red colormap for values in [0, 1] -> float RGB in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    centres = np.array([3.0, 2.0, 1.0])
    return np.clip(1.5 - np.abs(4.0 * v - centres), 0.0, 1.0)


def overlay_rgb(pixels: np.ndarray, heat: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Alpha-blend the heat colormap over the grayscale image; uint8 (H, W, 3)."""
    gray = np.repeat(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)[..., None], 3, axis=-1)
    rgb = (1.0 - alpha) * gray + alpha * heat_rgb(heat)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def save_overlay_png(image, smap: SaliencyMap, path, alpha: float = OVERLAY_ALPHA) -> None:
    from PIL import Image

    pixels = np.asarray(getattr(image, "pixels", image))
    Image.fromarray(overlay_rgb(pixels, smap.overlay, alpha), mode="RGB").save(path)


def region_contrast(overlay: np.ndarray, region: np.ndarray) -> Tuple[float, float]:
    """(mean saliency inside ``region``, mean saliency outside)."""
    region = np.asarray(region, dtype=bool)
    if not region.any() or region.all():
        raise SaliencyError("region must be a proper non-empty subset of the image")
    return float(overlay[region].mean()), float(overlay[~region].mean())
