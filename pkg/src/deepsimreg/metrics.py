"""Similarity measures, the diffusion regularizer and the registration loss.

Similarities (``ncc``, ``ncc_supervised``, ``deepsim``) are "higher is better";
:func:`registration_loss` negates them so every metric is minimized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from . import tensor as T
from .tensor import Tensor, as_tensor
from .warp import warp_bilinear

METRIC_KINDS = ("mse", "ncc", "ncc_sup", "deepsim_ae", "deepsim_seg")


@dataclass
class MetricSpec:
    """Which similarity drives registration, plus its knobs.

    ``extractor`` is the frozen feature network and is required for the two
    DeepSim kinds and rejected for the others.
    """

    kind: str = "mse"
    window: int = 9
    gamma: float = 1.0
    eps: float = 1e-5
    extractor: Any = None

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric {self.kind!r}; expected one of {METRIC_KINDS}")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"NCC window must be odd and >= 3, got {self.window}")
        if self.is_deepsim and self.extractor is None:
            raise ValueError(f"metric {self.kind} needs a feature extractor")
        if not self.is_deepsim and self.extractor is not None:
            raise ValueError(f"metric {self.kind} does not take a feature extractor")

    @property
    def is_deepsim(self) -> bool:
        return self.kind.startswith("deepsim")

    @property
    def needs_labels(self) -> bool:
        return self.kind == "ncc_sup"


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def mse(morphed, fixed) -> Tensor:
    morphed, fixed = as_tensor(morphed), as_tensor(fixed)
    _check_same(morphed, fixed, "mse")
    return T.mean(T.square(morphed - fixed))


def ncc_map(morphed, fixed, window: int = 9, eps: float = 1e-5) -> Tensor:
    """Windowed NCC at every position where the window fits inside the image.

    Each value is the cosine similarity of the two mean-centred window
    vectors, so it lies in ``[-1, 1]``. The denominator is floored at
    ``eps * window**2``; flat windows therefore score 0.

    Returns:
        ``(N, 1, H - window + 1, W - window + 1)`` tensor.
    """
    morphed, fixed = as_tensor(morphed), as_tensor(fixed)
    _check_same(morphed, fixed, "ncc")
    h, w = morphed.shape[2:]
    if window % 2 == 0 or window > min(h, w):
        raise ValueError(f"NCC window {window} must be odd and fit the {h}x{w} image")
    n = float(window * window)
    # NCC ignores additive offsets; removing the (detached) image means keeps the
    # windowed moment differences well conditioned in single precision.
    a = morphed - morphed.data.mean(axis=(1, 2, 3), keepdims=True)
    b = fixed - fixed.data.mean(axis=(1, 2, 3), keepdims=True)
    s_a = T.box_sum2d(a, window)
    s_b = T.box_sum2d(b, window)
    s_aa = T.box_sum2d(T.square(a), window)
    s_bb = T.box_sum2d(T.square(b), window)
    s_ab = T.box_sum2d(a * b, window)
    cross = s_ab - s_a * s_b * (1.0 / n)
    var_a = s_aa - T.square(s_a) * (1.0 / n)
    var_b = s_bb - T.square(s_b) * (1.0 / n)
    floor = (eps * n) ** 2
    denom = T.sqrt(T.clamp_min(var_a * var_b, floor))
    return cross / denom


def ncc(morphed, fixed, window: int = 9, eps: float = 1e-5) -> Tensor:
    """Patch-wise NCC averaged over all window positions (stride 1) and the batch."""
    return T.mean(ncc_map(morphed, fixed, window, eps))


def soft_dice(pred, target, eps: float = 1e-5) -> Tensor:
    """Mean over classes of ``2 sum(a b) / (sum a^2 + sum b^2 + eps)``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"label shape mismatch {pred.shape} vs {target.shape}")
    axes = (0, 2, 3)
    inter = T.tsum(pred * target, axis=axes)
    denom = T.tsum(T.square(pred), axis=axes) + T.tsum(T.square(target), axis=axes) + eps
    return T.mean(T.scalar_mul(inter, 2.0) / denom)


def ncc_supervised(morphed, fixed, warped_labels_soft, fixed_labels_onehot, gamma: float = 1.0,
                   window: int = 9, eps: float = 1e-5) -> Tensor:
    """NCC plus ``gamma`` times the soft Dice of warped and fixed label maps."""
    warped_labels_soft, fixed_labels_onehot = as_tensor(warped_labels_soft), as_tensor(fixed_labels_onehot)
    if warped_labels_soft.shape != fixed_labels_onehot.shape:
        raise ValueError(f"label shape mismatch {warped_labels_soft.shape} vs {fixed_labels_onehot.shape}")
    sim = ncc(morphed, fixed, window, eps)
    if gamma == 0:
        return sim
    return sim + T.scalar_mul(soft_dice(warped_labels_soft, fixed_labels_onehot, eps), gamma)


def feature_cosine(fa: Tensor, fb: Tensor, eps: float = 1e-5) -> Tensor:
    """Mean over pixels (and batch) of the cosine between per-pixel channel vectors."""
    dot = T.tsum(fa * fb, axis=1)
    na = T.tsum(T.square(fa), axis=1)
    nb = T.tsum(T.square(fb), axis=1)
    denom = T.sqrt(T.clamp_min(na * nb, eps * eps))
    return T.mean(dot / denom)


def deepsim(morphed, fixed, extractor, eps: float = 1e-5) -> Tensor:
    """Mean cosine similarity of per-pixel feature vectors over all extractor stages.

    ``extractor`` must expose ``features(image) -> list[Tensor]`` evaluated in
    eval mode. Gradients reach ``morphed`` only; the extractor's parameters
    must already be frozen.
    """
    if extractor is None:
        raise ValueError("deepsim needs a feature extractor")
    morphed, fixed = as_tensor(morphed), as_tensor(fixed)
    _check_same(morphed, fixed, "deepsim")
    with T.no_grad():
        target = extractor.features(fixed)
    source = extractor.features(morphed)
    per_layer = [feature_cosine(a, b, eps) for a, b in zip(source, target)]
    total = per_layer[0]
    for term in per_layer[1:]:
        total = total + term
    return T.scalar_mul(total, 1.0 / len(per_layer))


def diffusion_regularizer(field) -> Tensor:
    """Squared forward-difference gradient of the displacement.

    Each difference direction is averaged over the pixels where it is
    defined (trailing border excluded) and summed over both displacement
    components, so ``u = (x, 0)`` scores exactly 1.
    """
    field = as_tensor(field)
    if field.shape[2] < 2 or field.shape[3] < 2:
        raise ValueError("diffusion_regularizer needs H, W >= 2")
    dx = field[:, :, :, 1:] - field[:, :, :, :-1]
    dy = field[:, :, 1:, :] - field[:, :, :-1, :]
    c = field.shape[1]
    # mean over positions of the channel-summed squares == c * mean over all entries
    return T.scalar_mul(T.mean(T.square(dx)) + T.mean(T.square(dy)), float(c))


def similarity(spec: MetricSpec, morphed: Tensor, fixed: Tensor, warped_labels=None, fixed_labels=None) -> Tensor:
    """The raw metric value for ``spec`` (MSE as a distance, others as similarities)."""
    if spec.kind == "mse":
        return mse(morphed, fixed)
    if spec.kind == "ncc":
        return ncc(morphed, fixed, spec.window, spec.eps)
    if spec.kind == "ncc_sup":
        if warped_labels is None or fixed_labels is None:
            raise ValueError("ncc_sup needs label maps")
        return ncc_supervised(morphed, fixed, warped_labels, fixed_labels, spec.gamma, spec.window, spec.eps)
    return deepsim(morphed, fixed, spec.extractor, spec.eps)


def registration_loss(sample, field, spec: MetricSpec, lam: float) -> Tensor:
    """``D(I o phi, J) + lam * R(phi)`` for a batch.

    Args:
        sample: object with ``moving`` and ``fixed`` ``(N, 1, H, W)`` arrays or
            tensors, and for ``ncc_sup`` also ``moving_onehot`` /
            ``fixed_onehot`` ``(N, C, H, W)`` label maps.
        field: predicted ``(N, 2, H, W)`` displacement.
        spec: metric description.
        lam: regularizer weight, ``>= 0``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    field = as_tensor(field)
    moving, fixed = as_tensor(sample.moving), as_tensor(sample.fixed)
    morphed = warp_bilinear(moving, field)
    warped_labels = fixed_labels = None
    if spec.needs_labels:
        moving_onehot = getattr(sample, "moving_onehot", None)
        fixed_labels = getattr(sample, "fixed_onehot", None)
        if moving_onehot is None or fixed_labels is None:
            raise ValueError("ncc_sup needs moving_onehot and fixed_onehot label maps")
        warped_labels = warp_bilinear(as_tensor(moving_onehot), field)
    value = similarity(spec, morphed, fixed, warped_labels, fixed_labels)
    data_term = value if spec.kind == "mse" else -value
    if lam == 0:
        return data_term
    return data_term + T.scalar_mul(diffusion_regularizer(field), lam)

