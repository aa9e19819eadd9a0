import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from deepsimreg.data import RegistrationSample
from deepsimreg.evaluation import (
    bonferroni,
    cohens_d,
    dice,
    evaluate_fields,
    identity_dice,
    lambda_sweep,
    mean_dice,
    paired_stats,
    per_class_dice,
    regularity,
    wilcoxon_exact_p,
    wilcoxon_normal_p,
    wilcoxon_signed_rank,
)
from deepsimreg.train import TrainConfig
from deepsimreg.warp import AffineRanges, affine_to_field, random_affine


def grid(h=8, w=9):
    return np.mgrid[0:h, 0:w].astype(float)


def test_dice_examples():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[0, :4] = 1
    b[0, :2] = 1
    b[1, :2] = 1
    assert dice(a, b, 1) == 0.5
    assert dice(a, a, 1) == 1.0
    c = np.zeros((4, 4), int)
    c[3, :] = 1
    assert dice(a, c, 1) == 0.0
    assert dice(a, b, 7) == 1.0  # absent from both
    with pytest.raises(ValueError):
        dice(a, a[:2], 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_dice_symmetric_and_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, (2, 6, 6))
    perm = rng.permutation(4)
    for c in range(4):
        assert dice(a, b, c) == dice(b, a, c)
        assert dice(perm[a], perm[b], perm[c]) == dice(a, b, c)


def test_mean_dice_examples():
    a = np.array([[1, 2], [1, 2]])
    assert mean_dice(a, a, [1, 2]) == 1.0
    b = np.array([[1, 0], [1, 0]])
    assert per_class_dice(a, b, [1, 2]) == {1: 1.0, 2: 0.0}
    assert mean_dice(a, b, [1, 2]) == 0.5
    with pytest.raises(ValueError):
        mean_dice(a, b, [])


def test_regularity_examples():
    ys, xs = grid()
    r0 = regularity(np.zeros((1, 2, 8, 9)))
    assert (r0.sigma2_jac, r0.fold_pct) == (0.0, 0.0)
    r1 = regularity(np.stack([xs, ys])[None])
    assert abs(r1.sigma2_jac) <= 1e-4 and r1.fold_pct == 0.0
    r2 = regularity(np.stack([-2 * xs, 0 * xs])[None])
    assert abs(r2.fold_pct - 100.0) <= 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_affine_fields_never_fold(seed):
    p = random_affine(np.random.default_rng(seed), AffineRanges(rotation_deg=45, shear=0.3, scale=(0.5, 2.0)))
    r = regularity(affine_to_field(p, 12, 12))
    assert r.fold_pct == 0.0
    assert 0.0 <= r.sigma2_jac <= 1e-8


def test_wilcoxon_exact_all_positive():
    a = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    assert wilcoxon_signed_rank(a + 0.5 * np.arange(1, 7), a) == pytest.approx(0.03125, abs=1e-12)


def test_wilcoxon_rejects_degenerate_inputs():
    a = np.arange(8.0)
    with pytest.raises(ValueError, match="non-zero"):
        wilcoxon_signed_rank(a, a)
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(a[:4], a[:4] + 1)
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(a, a[:5])


def enumerate_p(d):
    """Independent exact p: walk sign patterns with itertools over the ranked magnitudes."""
    ranks = stats.rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    total = 0
    le = ge = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        w = sum(r for r, s in zip(ranks, signs) if s)
        total += 1
        le += w <= w_obs + 1e-9
        ge += w >= w_obs - 1e-9
    return min(1.0, 2 * min(le, ge) / total)


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 10), st.integers(0, 10 ** 6))
def test_wilcoxon_exact_matches_independent_enumeration(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=n)
    b = a + rng.normal(0.3, 1.0, size=n)
    d = a - b
    assert wilcoxon_signed_rank(a, b) == pytest.approx(enumerate_p(d), abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_wilcoxon_exact_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 9))
    ref = stats.wilcoxon(a, b, method="exact").pvalue
    assert wilcoxon_signed_rank(a, b) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_wilcoxon_normal_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=30)
    b = a + np.round(rng.normal(0.2, 1, 30), 1)  # rounding creates ties
    ref = stats.wilcoxon(a, b, method="approx", correction=True).pvalue
    assert wilcoxon_signed_rank(a, b) == pytest.approx(ref, rel=1e-9)


def test_wilcoxon_branches_at_twelve_over_every_statistic():
    # ranks 1..12 with every sign pattern covers all attainable statistics
    n = 12
    ranks = np.arange(1.0, n + 1)
    gaps = []
    for w in range(n * (n + 1) // 2 + 1):
        signs = np.zeros(n, bool)
        rest = w
        for r in range(n, 0, -1):
            if r <= rest:
                signs[r - 1] = True
                rest -= r
        d = np.where(signs, ranks, -ranks)
        exact = wilcoxon_exact_p(d, ranks)
        gaps.append((exact, abs(exact - wilcoxon_normal_p(d, ranks))))
    gaps = np.array(gaps)
    assert gaps[gaps[:, 0] < 0.25, 1].max() <= 0.01
    # the continuity-corrected approximation overshoots 0.01 only in the mid-range
    assert 0.01 < gaps[:, 1].max() < 0.014


def test_cohens_d():
    b = np.array([0.2, 0.4, 0.1, 0.7])
    a = b + np.array([1, 1, 1, 3])
    assert cohens_d(a, b) == pytest.approx(1.5)
    assert cohens_d(b, a) == pytest.approx(-1.5)
    with pytest.raises(ValueError):
        cohens_d(np.array([2.0, 3.0, 4.0]), np.array([1.0, 2.0, 3.0]))


def test_bonferroni():
    assert bonferroni(0.05, 25) == pytest.approx(0.002)
    assert bonferroni(0.05, 1) == 0.05
    assert bonferroni(0.05, 10) == pytest.approx(0.005)
    with pytest.raises(ValueError):
        bonferroni(0.05, 0)


def test_paired_stats_bundle():
    rng = np.random.default_rng(0)
    b = rng.random(25)
    a = b + 0.1 + 0.01 * rng.normal(size=25)
    s = paired_stats(a, b, comparisons=25)
    assert s.n == 25 and s.significance_threshold == pytest.approx(0.002)
    assert 0 <= s.p_value < 0.002 and s.significant
    assert s.effect_size_d > 0


def test_evaluate_fields_on_known_shift():
    lab = np.zeros((8, 8), int)
    lab[2:5, 2:5] = 1
    moved = np.roll(lab, 1, axis=1)
    s = RegistrationSample(np.zeros((8, 8)), np.zeros((8, 8)), moved, lab, sample_id="a")
    u = np.zeros((2, 8, 8))
    u[0] = 1.0
    [row] = evaluate_fields([s], [u], 2)
    assert row.class_dice == {1: 1.0}
    assert row.mean_dice == 1.0 and row.fold_pct == 0.0
    assert identity_dice([s], 2) < 1.0


def test_lambda_sweep_contract(small_dataset):
    cfg = TrainConfig(epochs=1, lr=1e-3, channels=(4, 8, 16))
    best, scores, results = lambda_sweep(small_dataset, None, cfg, [0.5])
    assert best == 0.5 and set(scores) == {0.5}
    best, scores, _ = lambda_sweep(small_dataset, None, cfg, [0.01, 1.0])
    assert scores[best] == max(scores.values())
    with pytest.raises(ValueError):
        lambda_sweep(small_dataset, None, cfg, [])


def test_lambda_sweep_ties_prefer_larger_lambda(small_dataset, monkeypatch):
    from deepsimreg import train

    class FakeLog:
        best_val_dice = 0.7

    monkeypatch.setattr(train, "train_registration", lambda ds, ex, cfg: (None, FakeLog()))
    best, _, _ = lambda_sweep(small_dataset, None, TrainConfig(), [0.1, 3.0, 1.0])
    assert best == 3.0
