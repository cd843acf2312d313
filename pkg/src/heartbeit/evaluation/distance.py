"""Wasserstein-1 distances between empirical pixel-intensity distributions."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import ArgumentError


def wasserstein_1d(a, b) -> float:
    """W1 between the empirical distributions of two samples.

    Equal sizes reduce to the mean absolute difference of the sorted
    samples; otherwise the absolute CDF difference is integrated exactly.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ArgumentError("wasserstein_1d needs two non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.sort(np.concatenate([a, b]))
    cdf_a = np.searchsorted(a, grid[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * np.diff(grid)))


def _pixels(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64).ravel()


def _sample(cohort: Sequence, n: int, rng: np.random.Generator) -> list:
    if len(cohort) == 0:
        raise ArgumentError("cohorts must be non-empty")
    k = min(n, len(cohort))
    return [cohort[i] for i in np.sort(rng.choice(len(cohort), size=k, replace=False))]


def cohort_distance(
    cohort_a: Sequence, cohort_b: Optional[Sequence] = None, sample_n: int = 1000, seed: int = 0
) -> float:
    """Mean pairwise W1 between flattened image intensities.

    With ``cohort_b`` omitted (or the same object as ``cohort_a``) the mean
    runs over all distinct within-cohort pairs; otherwise over all
    cross-cohort pairs. At most ``sample_n`` images are drawn per cohort.
    """
    if sample_n < 1:
        raise ArgumentError("sample_n must be positive")
    rng = np.random.default_rng(seed)
    same = cohort_b is None or cohort_b is cohort_a
    a = [_pixels(x) for x in _sample(cohort_a, sample_n, rng)]
    b = a if same else [_pixels(x) for x in _sample(cohort_b, sample_n, rng)]
    if same and len(a) < 2:
        raise ArgumentError("a within-cohort distance needs at least two images")

    if len({x.size for x in a + b}) == 1:
        sa = np.sort(np.stack(a), axis=1)
        sb = sa if same else np.sort(np.stack(b), axis=1)
        dist = np.stack([np.abs(sb - row).mean(axis=1) for row in sa])
    else:
        dist = np.array([[wasserstein_1d(x, y) for y in b] for x in a])
    if same:
        return float(np.mean(dist[np.triu_indices(len(a), k=1)]))
    return float(np.mean(dist))
