"""Discrete visual tokens: a k-means codebook over raw patch pixels.

Codebook file (``.hbcb``), little-endian::

    b"HBCB" | u8 version | u8 len + ascii config hash
    u32 vocab_size | u32 patch_dim | u64 seed | u16 len + utf-8 corpus tag
    f32 centroids (vocab_size x patch_dim, row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy import sparse

from . import binio
from .errors import TokenizerError
from .raster import PatchGrid, patchify

CODEBOOK_MAGIC = b"HBCB"
CODEBOOK_VERSION = 1
_CHUNK = 8192


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # (vocab_size, patch_dim) float32
    seed: int = 0
    trained_on: str = ""

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float32)
        if c.ndim != 2 or c.shape[0] < 2:
            raise TokenizerError(f"codebook needs a (vocab >= 2, dim) matrix, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise TokenizerError("codebook centroids must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def vocab_size(self) -> int:
        return self.centroids.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class TokenGrid:
    rows: int
    cols: int
    tokens: np.ndarray  # (rows * cols,) int64, row-major

    def grid(self) -> np.ndarray:
        return self.tokens.reshape(self.rows, self.cols)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: List[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray, c_sq: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def nearest(x: np.ndarray, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row under squared Euclidean distance.

    Uses the expanded-norm form for speed, then re-scores every row whose
    runner-up lies within rounding noise of the best by explicit
    differences, so exact ties resolve to the lowest index.
    """
    x = np.asarray(x)
    c = np.asarray(c, dtype=np.float64)
    c_sq = (c * c).sum(axis=1)
    labels = np.empty(x.shape[0], dtype=np.int64)
    best = np.empty(x.shape[0], dtype=np.float64)
    for lo in range(0, x.shape[0], _CHUNK):
        xb = x[lo : lo + _CHUNK].astype(np.float64)
        d = _sq_dists(xb, c, c_sq)
        dmin = d.min(axis=1)
        slack = 1e-9 * ((xb * xb).sum(axis=1) + c_sq.max()) + 1e-12
        close = d <= (dmin + slack)[:, None]
        ambiguous = np.flatnonzero(close.sum(axis=1) > 1)
        lab = d.argmin(axis=1)
        for i in ambiguous:
            cand = np.flatnonzero(close[i])
            exact = ((c[cand] - xb[i]) ** 2).sum(axis=1)
            lab[i] = cand[np.argmin(exact)]
            dmin[i] = exact.min()
        labels[lo : lo + _CHUNK] = lab
        best[lo : lo + _CHUNK] = dmin
    return labels, best


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    x_sq = (x * x).sum(axis=1)

    def dist_to(i):
        return np.maximum(x_sq - 2.0 * (x @ x[i]) + x_sq[i], 0.0)

    idx = [int(rng.integers(n))]
    d2 = dist_to(idx[0])
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise TokenizerError(f"only {len(idx)} distinct patches available for {k} centroids")
        nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, dist_to(nxt))
        d2[nxt] = 0.0
    return x[idx].copy()


def kmeans(points, k: int, seed: int, max_iters: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded from the points farthest from their
    assigned centroid. Stops once no centroid moves more than ``tol``.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise TokenizerError(f"points must be a 2-D matrix, got shape {x.shape}")
    if x.shape[0] < k:
        raise TokenizerError(f"need at least {k} patches, got {x.shape[0]}")
    if k < 2:
        raise TokenizerError("vocab_size must be >= 2")
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, k, rng)
    labels, dist = nearest(x, c)
    history = [float(dist.sum())]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        counts = np.bincount(labels, minlength=k)
        assign = sparse.csr_matrix((np.ones(x.shape[0]), (labels, np.arange(x.shape[0]))), shape=(k, x.shape[0]))
        sums = assign @ x
        new_c = c.copy()
        filled = counts > 0
        new_c[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            far = np.argsort(-dist, kind="stable")
            far = far[dist[far] > 0][: empty.size]
            new_c[empty[: far.size]] = x[far]
        shift = np.sqrt(((new_c - c) ** 2).sum(axis=1)).max()
        c = new_c
        labels, dist = nearest(x, c)
        history.append(float(dist.sum()))
        if shift < tol:
            break
    return KMeansResult(c, labels, history, n_iter)


def train_codebook(
    patches, vocab_size: int, seed: int, max_iters: int = 100, trained_on: str = ""
) -> Codebook:
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < vocab_size:
        raise TokenizerError(f"need at least {vocab_size} patch vectors, got shape {x.shape}")
    result = kmeans(x, vocab_size, seed, max_iters=max_iters)
    return Codebook(result.centroids, seed=seed, trained_on=trained_on)


def sample_patches(images: np.ndarray, patch_size: int, max_patches: int, seed: int, channels: int = 1) -> np.ndarray:
    """Uniform seeded sample (without replacement) of patch vectors from a (B, H, W) stack."""
    vecs = patchify(np.asarray(images, dtype=np.float32), patch_size, channels)
    vecs = vecs.reshape(-1, vecs.shape[-1])
    if vecs.shape[0] <= max_patches:
        return vecs
    pick = np.sort(np.random.default_rng(seed).choice(vecs.shape[0], size=max_patches, replace=False))
    return vecs[pick]


def encode_vectors(vectors, cb: Codebook) -> np.ndarray:
    x = np.asarray(vectors)
    if x.shape[-1] != cb.patch_dim:
        raise TokenizerError(f"patch dim {x.shape[-1]} does not match codebook dim {cb.patch_dim}")
    labels, _ = nearest(x.reshape(-1, cb.patch_dim), cb.centroids)
    return labels.reshape(x.shape[:-1])


def encode(grid: PatchGrid, cb: Codebook) -> TokenGrid:
    return TokenGrid(grid.rows, grid.cols, encode_vectors(grid.vectors(), cb))


def save_codebook(cb: Codebook, path, config_hash: str = "") -> None:
    body = struct.pack("<IIQ", cb.vocab_size, cb.patch_dim, cb.seed) + binio.text(cb.trained_on)
    Path(path).write_bytes(binio.header(CODEBOOK_MAGIC, CODEBOOK_VERSION, config_hash) + body + binio.f32(cb.centroids))


def load_codebook(path) -> Tuple[Codebook, str]:
    """Return (codebook, producing config hash)."""
    data = Path(path).read_bytes()
    config_hash, pos = binio.parse_header(data, CODEBOOK_MAGIC, CODEBOOK_VERSION, str(path))
    r = binio.Reader(data, pos, str(path))
    vocab, dim, seed = r.unpack("<IIQ")
    tag = r.text()
    centroids = r.f32(vocab * dim).reshape(vocab, dim)
    return Codebook(centroids, seed=seed, trained_on=tag), config_hash
