from .distance import cohort_distance, wasserstein_1d
from .metrics import EvalReport, ScoredSet, auprc, auroc, bootstrap_ci, evaluate
from .saliency import SaliencyMap, saliency

__all__ = [
    "EvalReport",
    "SaliencyMap",
    "ScoredSet",
    "auprc",
    "auroc",
    "bootstrap_ci",
    "cohort_distance",
    "evaluate",
    "saliency",
    "wasserstein_1d",
]
