"""Training losses with closed-form gradients.

Every function returns ``(loss, grad)`` where ``grad`` has the shape of
the prediction it differentiates. The autodiff tape wraps these rather
than re-deriving them, so the math here is testable in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from focaldet.encode import TargetMaps

EPS = 1e-6


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        if self.gamma < 0 or self.beta < 0:
            raise ValueError(f"focal exponents must be non-negative: {self}")


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 0.05
    lambda_c: float = 0.01
    lambda_o: float = 0.1

    def __post_init__(self):
        if min(self.lambda_r, self.lambda_c, self.lambda_o) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")

    def combine(self, scale: float, center: float, offset: float) -> float:
        return self.lambda_r * scale + self.lambda_c * center + self.lambda_o * offset


def clamp_prob(p: np.ndarray, eps: float = EPS) -> np.ndarray:
    return np.clip(p, eps, 1.0 - eps)


def _check_shape(name: str, pred: np.ndarray, expected: tuple[int, ...]) -> None:
    if pred.shape != tuple(expected):
        raise ValueError(f"{name}: prediction shape {pred.shape} != target shape {expected}")


def center_loss(
    p: np.ndarray, targets: TargetMaps, params: FocalParams = FocalParams()
) -> tuple[float, np.ndarray]:
    """Penalty-reduced focal loss over the center map.

    Positives are weighted by (1-p)^gamma, negatives by
    p^gamma (1-M)^beta; the sum is divided by K = max(1, #positives).
    ``p`` must already be clamped away from 0 and 1.
    """
    _check_shape("center_loss", p, targets.center.shape)
    g, b = params.gamma, params.beta
    pos = targets.pos_mask
    k = targets.norm
    one_m = 1.0 - p
    log_p, log_1mp = np.log(p), np.log(one_m)

    # positives: -(1-p)^g log p
    pos_w = one_m**g
    pos_loss = -pos_w * log_p
    pos_grad = g * one_m ** (g - 1) * log_p - pos_w / p if g > 0 else -1.0 / p

    # negatives: -p^g (1-M)^b log(1-p)
    reduce = (1.0 - targets.penalty) ** b
    neg_w = p**g * reduce
    neg_loss = -neg_w * log_1mp
    if g > 0:
        neg_grad = reduce * (-g * p ** (g - 1) * log_1mp + p**g / one_m)
    else:
        neg_grad = reduce / one_m

    loss = float(np.where(pos, pos_loss, neg_loss).sum() / k)
    grad = np.where(pos, pos_grad, neg_grad) / k
    return loss, grad


def scale_loss(pred_log_h: np.ndarray, targets: TargetMaps) -> tuple[float, np.ndarray]:
    """Vanilla L1 on log-height at positive cells, divided by K."""
    _check_shape("scale_loss", pred_log_h, targets.log_height.shape)
    pos = targets.pos_mask
    diff = np.where(pos, pred_log_h - targets.log_height, 0.0)
    k = targets.norm
    return float(np.abs(diff).sum() / k), np.sign(diff) / k


def smooth_l1(x: np.ndarray, beta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    ax = np.abs(x)
    quad = ax < beta
    val = np.where(quad, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.where(quad, x / beta, np.sign(x))
    return val, grad


def offset_loss(pred_offset: np.ndarray, targets: TargetMaps) -> tuple[float, np.ndarray]:
    """Smooth-L1 (transition 1.0) on both offset channels at positive cells.

    Averaged over the two channels, then divided by K.
    """
    _check_shape("offset_loss", pred_offset, targets.offset.shape)
    pos = targets.pos_mask[None]
    diff = np.where(pos, pred_offset - targets.offset, 0.0)
    val, grad = smooth_l1(diff)
    denom = 2.0 * targets.norm
    return float(val.sum() / denom), np.where(pos, grad, 0.0) / denom


@dataclass
class FdnLoss:
    total: float
    center: float
    scale: float
    offset: float
    grad_center: np.ndarray
    grad_log_h: np.ndarray
    grad_offset: np.ndarray


def fdn_loss(
    p_center: np.ndarray,
    pred_log_h: np.ndarray,
    pred_offset: np.ndarray,
    targets: TargetMaps,
    weights: LossWeights = LossWeights(),
    params: FocalParams = FocalParams(),
) -> FdnLoss:
    """lambda_r * scale + lambda_c * center + lambda_o * offset.

    The center probabilities are clamped to [EPS, 1-EPS] here; the
    gradient is zero where the clamp is active.
    """
    p = clamp_prob(p_center)
    l_c, g_c = center_loss(p, targets, params)
    g_c = np.where((p_center > EPS) & (p_center < 1.0 - EPS), g_c, 0.0)
    l_r, g_r = scale_loss(pred_log_h, targets)
    l_o, g_o = offset_loss(pred_offset, targets)
    total = weights.combine(l_r, l_c, l_o)
    return FdnLoss(
        total=total,
        center=l_c,
        scale=l_r,
        offset=l_o,
        grad_center=weights.lambda_c * g_c,
        grad_log_h=weights.lambda_r * g_r,
        grad_offset=weights.lambda_o * g_o,
    )


def bce_loss(p: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy; ``p`` must already be clamped."""
    p = np.asarray(p, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise ValueError("bce_loss needs at least one prediction")
    if p.shape != labels.shape:
        raise ValueError(f"bce_loss: shape {p.shape} != labels {labels.shape}")
    n = p.size
    loss = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    grad = (-(labels / p) + (1.0 - labels) / (1.0 - p)) / n
    return float(loss.mean()), grad
