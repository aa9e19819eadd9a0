"""Overlap scores, transformation regularity and paired significance statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .warp import interior, jacobian_determinant, warp_nearest


def dice(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Sørensen-Dice overlap of one class; 1.0 when the class is absent from both maps."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"label maps differ in shape: {pred.shape} vs {truth.shape}")
    a = pred == class_id
    b = truth == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def per_class_dice(pred, truth, classes) -> dict[int, float]:
    return {int(c): dice(pred, truth, c) for c in classes}


def foreground_classes(num_classes: int, include_background: bool = False) -> list[int]:
    return list(range(0 if include_background else 1, num_classes))


def mean_dice(pred, truth, classes) -> float:
    """Unweighted mean of per-class Dice over ``classes``."""
    classes = list(classes)
    if not classes:
        raise ValueError("mean_dice needs at least one class")
    return float(np.mean(list(per_class_dice(pred, truth, classes).values())))


@dataclass
class RegularityReport:
    sigma2_jac: float
    fold_pct: float


def regularity(field) -> RegularityReport:
    """Variance of the Jacobian determinant and percentage of folded pixels (interior only)."""
    det = interior(jacobian_determinant(field))
    return RegularityReport(sigma2_jac=float(det.var()), fold_pct=float(100.0 * (det < 0).mean()))


# -- paired statistics ------------------------------------------------------------------------------


@dataclass
class PairedStats:
    p_value: float
    effect_size_d: float
    n: int
    significance_threshold: float

    @property
    def significant(self) -> bool:
        return self.p_value < self.significance_threshold


def _signed_rank_inputs(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    d = a - b
    d = d[d != 0]
    if len(d) < 5:
        raise ValueError(f"Wilcoxon signed-rank test needs >= 5 non-zero differences, got {len(d)}")
    return d, rankdata(np.abs(d))


def wilcoxon_exact_p(d: np.ndarray, ranks: np.ndarray) -> float:
    """Two-sided p by enumerating every sign assignment of the ranks."""
    n = len(d)
    w_obs = ranks[d > 0].sum()
    signs = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
    w_all = signs @ ranks
    tol = 1e-9
    lower = np.mean(w_all <= w_obs + tol)
    upper = np.mean(w_all >= w_obs - tol)
    return float(min(1.0, 2.0 * min(lower, upper)))


def wilcoxon_normal_p(d: np.ndarray, ranks: np.ndarray) -> float:
    """Two-sided p from the normal approximation with tie and continuity corrections."""
    n = len(d)
    w_obs = ranks[d > 0].sum()
    mu = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (counts ** 3 - counts).sum() / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_obs - mu) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, math.erfc(z / math.sqrt(2.0))))


def wilcoxon_signed_rank(a, b, exact_max_n: int = 12) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped and tied magnitudes get average ranks. Up to
    ``exact_max_n`` pairs the null distribution is enumerated exactly; above
    that the normal approximation is used.
    """
    d, ranks = _signed_rank_inputs(a, b)
    if len(d) <= exact_max_n:
        return wilcoxon_exact_p(d, ranks)
    return wilcoxon_normal_p(d, ranks)


def cohens_d(a, b) -> float:
    """Paired effect size: mean difference over the sample std of the differences."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or len(d) < 2:
        raise ValueError("cohens_d needs two paired samples of length >= 2")
    sd = d.std(ddof=1)
    if sd == 0:
        raise ValueError("effect size undefined: differences have zero variance")
    return float(d.mean() / sd)


def bonferroni(alpha: float, m: int) -> float:
    if m < 1:
        raise ValueError("number of comparisons must be >= 1")
    return alpha / m


def paired_stats(a, b, alpha: float = 0.05, comparisons: int = 1) -> PairedStats:
    return PairedStats(
        p_value=wilcoxon_signed_rank(a, b),
        effect_size_d=cohens_d(a, b),
        n=len(a),
        significance_threshold=bonferroni(alpha, comparisons),
    )


# -- registration evaluation ------------------------------------------------------------------------


@dataclass
class SampleEvaluation:
    sample_id: str
    class_dice: dict[int, float]
    mean_dice: float
    sigma2_jac: float
    fold_pct: float


def evaluate_fields(samples, fields, num_classes: int, include_background: bool = False) -> list[SampleEvaluation]:
    """Score predicted fields: Dice on nearest-neighbour warped labels, plus regularity."""
    classes = foreground_classes(num_classes, include_background)
    rows = []
    for s, u in zip(samples, fields):
        u = np.asarray(u)
        warped = warp_nearest(s.moving_labels, u[None] if u.ndim == 3 else u)
        per = per_class_dice(warped, s.fixed_labels, classes)
        reg = regularity(u)
        rows.append(SampleEvaluation(s.sample_id, per, float(np.mean(list(per.values()))), reg.sigma2_jac, reg.fold_pct))
    return rows


def identity_dice(samples, num_classes: int, include_background: bool = False) -> float:
    """Mean Dice of the untransformed moving labels against the fixed labels."""
    classes = foreground_classes(num_classes, include_background)
    return float(np.mean([mean_dice(s.moving_labels, s.fixed_labels, classes) for s in samples]))


def lambda_sweep(dataset, extractor, base_config, lambdas, jobs: int = 1):
    """Train one registration model per regularizer weight and pick the best.

    The winner has the highest validation mean Dice; ties go to the larger
    weight (the smoother model).

    Returns:
        ``(best_lambda, {lambda: val_mean_dice}, {lambda: (network, log)})``.
    """
    from .train import train_registration  # avoid an import cycle

    lambdas = [float(x) for x in lambdas]
    if not lambdas:
        raise ValueError("lambda grid is empty")

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {lam: pool.submit(train_registration, dataset, extractor, base_config.replace(lam=lam))
                       for lam in lambdas}
            results = {lam: f.result() for lam, f in futures.items()}
    else:
        results = {lam: train_registration(dataset, extractor, base_config.replace(lam=lam)) for lam in lambdas}
    scores = {lam: results[lam][1].best_val_dice for lam in lambdas}
    best = max(lambdas, key=lambda lam: (scores[lam], lam))
    return best, scores, results
