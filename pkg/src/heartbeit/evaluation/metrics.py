"""Threshold-free classifier metrics and percentile bootstrap intervals."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from ..errors import ArgumentError, MetricError


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray  # positive-class probability
    labels: np.ndarray  # 0/1
    record_ids: Sequence[str] = ()

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel()
        if s.shape != y.shape:
            raise MetricError(f"scores ({s.shape}) and labels ({y.shape}) differ in length")
        if self.record_ids and len(self.record_ids) != s.size:
            raise MetricError("record_ids length differs from scores")
        if not np.all(np.isfinite(s)):
            raise MetricError("scores must be finite")
        if y.size and not np.isin(y, (0, 1)).all():
            raise MetricError("labels must be binary")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self):
        return self.scores.size

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())

    def subset(self, idx: np.ndarray) -> "ScoredSet":
        return ScoredSet(self.scores[idx], self.labels[idx])


def auroc(s: ScoredSet) -> float:
    """Mann-Whitney AUROC: ties between a positive and a negative earn half credit."""
    n_pos, n_neg = s.n_pos, s.n_neg
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes")
    ranks = rankdata(s.scores)  # average ranks, 1-based
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(s: ScoredSet) -> float:
    """Average precision with tied scores admitted together as one block."""
    n_pos = s.n_pos
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    order = np.argsort(-s.scores, kind="mergesort")
    scores, labels = s.scores[order], s.labels[order]
    ends = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tp = np.cumsum(labels)[ends]
    gained = np.diff(np.r_[0, tp])
    # positives admitted x precision at block end, summed exactly and rounded once
    total = sum(Fraction(int(g * t), int(e) + 1) for g, t, e in zip(gained, tp, ends) if g)
    return float(total / n_pos)


METRICS: Dict[str, Callable[[ScoredSet], float]] = {"auroc": auroc, "auprc": auprc}


def _admissible(metric: Callable, y: np.ndarray) -> bool:
    n_pos = int(y.sum())
    if metric is auroc:
        return 0 < n_pos < y.size
    return n_pos > 0


def bootstrap_ci(
    s: ScoredSet, metric="auroc", iters: int = 500, seed: int = 0, level: float = 0.95
) -> Tuple[float, float]:
    """Percentile bootstrap interval, resampling records with replacement.

    Resamples on which the metric is undefined are redrawn; more than
    ``10 * iters`` redraws raises MetricError.
    """
    fn = METRICS[metric] if isinstance(metric, str) else metric
    if iters < 1:
        raise ArgumentError("iters must be positive")
    rng = np.random.default_rng(seed)
    n = len(s)
    values, redraws = [], 0
    while len(values) < iters:
        idx = rng.integers(0, n, size=n)
        if not _admissible(fn, s.labels[idx]):
            redraws += 1
            if redraws > 10 * iters:
                raise MetricError(f"bootstrap redraw cap exceeded ({redraws} redraws)")
            continue
        values.append(fn(s.subset(idx)))
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(values, [tail, 100.0 - tail])
    return float(low), float(high)


@dataclass
class EvalReport:
    auroc: float
    auprc: float
    auroc_ci: Tuple[float, float]
    auprc_ci: Tuple[float, float]
    n_bootstrap: int
    prevalence: float
    fraction: float = 1.0
    split_tag: str = "test"
    n: int = 0

    def __post_init__(self):
        for lo, hi in (self.auroc_ci, self.auprc_ci):
            if not 0.0 <= lo <= hi <= 1.0:
                raise MetricError(f"invalid confidence interval ({lo}, {hi})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["auroc_ci"], d["auprc_ci"] = list(self.auroc_ci), list(self.auprc_ci)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["auroc_ci"], d["auprc_ci"] = tuple(d["auroc_ci"]), tuple(d["auprc_ci"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


REPORT_FIELDS = ("split_tag", "fraction", "n", "prevalence", "auroc", "auroc_low", "auroc_high",
                 "auprc", "auprc_low", "auprc_high", "n_bootstrap")


def report_row(r: EvalReport) -> List:
    return [r.split_tag, r.fraction, r.n, r.prevalence, r.auroc, r.auroc_ci[0], r.auroc_ci[1],
            r.auprc, r.auprc_ci[0], r.auprc_ci[1], r.n_bootstrap]


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        w.writerows(report_row(r) for r in reports)


def evaluate(s: ScoredSet, n_bootstrap: int = 500, seed: int = 0, fraction: float = 1.0, split_tag: str = "test") -> EvalReport:
    prevalence = s.n_pos / len(s) if len(s) else float("nan")
    if not 0.0 < prevalence < 1.0:
        raise MetricError("evaluation needs both classes present")
    return EvalReport(
        auroc=auroc(s),
        auprc=auprc(s),
        auroc_ci=bootstrap_ci(s, "auroc", n_bootstrap, seed),
        auprc_ci=bootstrap_ci(s, "auprc", n_bootstrap, seed),
        n_bootstrap=n_bootstrap,
        prevalence=prevalence,
        fraction=fraction,
        split_tag=split_tag,
        n=len(s),
    )


def roc_points(s: ScoredSet) -> np.ndarray:
    """(threshold, fpr, tpr) rows, thresholds descending, starting at (inf, 0, 0)."""
    order = np.argsort(-s.scores, kind="mergesort")
    scores, labels = s.scores[order], s.labels[order]
    ends = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tp = np.cumsum(labels)[ends]
    fp = ends + 1 - tp
    return np.column_stack([np.r_[np.inf, scores[ends]], np.r_[0, fp] / max(s.n_neg, 1), np.r_[0, tp] / max(s.n_pos, 1)])


def pr_points(s: ScoredSet) -> np.ndarray:
    """(threshold, recall, precision) rows, thresholds descending."""
    order = np.argsort(-s.scores, kind="mergesort")
    scores, labels = s.scores[order], s.labels[order]
    ends = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tp = np.cumsum(labels)[ends]
    return np.column_stack([scores[ends], tp / max(s.n_pos, 1), tp / (ends + 1)])


def write_curve_csv(points: np.ndarray, header: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([repr(float(v)) for v in row] for row in points)


def write_scored_csv(s: ScoredSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "score", "label"])
        ids = s.record_ids or [str(i) for i in range(len(s))]
        w.writerows((rid, repr(float(sc)), int(lb)) for rid, sc, lb in zip(ids, s.scores, s.labels))


def read_scored_csv(path) -> ScoredSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"score", "label"} <= set(rows[0]):
        raise MetricError(f"{path}: expected columns record_id,score,label")
    try:
        scores = [float(r["score"]) for r in rows]
        labels = [int(r["label"]) for r in rows]
    except ValueError as exc:
        raise MetricError(f"{path}: {exc}") from exc
    return ScoredSet(np.array(scores), np.array(labels), [r.get("record_id", "") for r in rows])
