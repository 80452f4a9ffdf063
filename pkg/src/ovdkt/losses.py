"""Box geometry, box regression loss, focal loss and similarity classification.

Boxes are ``(cx, cy, w, h)`` in normalised image coordinates. Every loss
returns ``(value, gradient)`` with the gradient taken with respect to the
predicted quantity. The vectorised ``*_batch`` variants are what the trainer
uses; the scalar functions wrap them.

Kink convention: where a ``max``/``min``/``abs`` is not differentiable we take
the right derivative, i.e. ``d|x|/dx = +1`` at 0, ``d max(a, b)/da = 1`` when
``a == b`` and ``d min(a, b)/da = 0`` when ``a == b``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .embedding import DomainError

PROB_EPS = 1e-8
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class LossWeights:
    lambda_L1: float = 5.0
    lambda_gIoU: float = 2.0
    lambda_cls: float = 2.0
    lambda_contrast: float = 1.0

    def __post_init__(self):
        for name in ("lambda_L1", "lambda_gIoU", "lambda_cls", "lambda_contrast"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# box geometry


def _corners(b):
    """Clamped corners and the clamp masks (d corner / d unclamped corner)."""
    b = np.asarray(b, dtype=np.float64)
    raw = np.stack(
        [b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2, b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2],
        axis=-1,
    )
    clamped = np.clip(raw, 0.0, 1.0)
    # right-derivative: at exactly 0 moving up is inside; at exactly 1 moving up is clamped
    mask = ((raw >= 0.0) & (raw < 1.0)).astype(np.float64)
    return clamped, mask


def box_area(b) -> np.ndarray:
    c, _ = _corners(b)
    return (c[..., 2] - c[..., 0]) * (c[..., 3] - c[..., 1])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``a`` (n, 4) and ``b`` (m, 4), boxes clamped to the unit square."""
    ca, _ = _corners(np.atleast_2d(a))
    cb, _ = _corners(np.atleast_2d(b))
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


def giou_batch(pred, gt, with_grad: bool = True):
    """Row-wise generalised IoU of ``pred`` (M, 4) vs ``gt`` (M, 4).

    Returns ``(giou, d giou / d pred)`` with shapes (M,) and (M, 4).
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    a, amask = _corners(pred)
    b, _ = _corners(gt)
    ax1, ay1, ax2, ay2 = a.T
    bx1, by1, bx2, by2 = b.T
    aw, ah = ax2 - ax1, ay2 - ay1
    bw, bh = bx2 - bx1, by2 - by1
    if np.any(aw <= 0) or np.any(ah <= 0) or np.any(bw <= 0) or np.any(bh <= 0):
        raise DomainError("degenerate box (zero area after clamping)")
    area_a = aw * ah
    area_b = bw * bh

    ix_raw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    iy_raw = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    iw = np.maximum(ix_raw, 0.0)
    ih = np.maximum(iy_raw, 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    cw = np.maximum(ax2, bx2) - np.minimum(ax1, bx1)
    ch = np.maximum(ay2, by2) - np.minimum(ay1, by1)
    C = cw * ch
    iou_ = inter / union
    g = iou_ - (C - union) / C
    if not with_grad:
        return g, None

    # d iw / d (ax1, ax2); right-derivative conventions for min/max
    pos_x = (ix_raw >= 0).astype(np.float64)
    pos_y = (iy_raw >= 0).astype(np.float64)
    diw_dax1 = -(ax1 >= bx1).astype(np.float64) * pos_x
    diw_dax2 = (ax2 < bx2) * pos_x
    dih_day1 = -(ay1 >= by1).astype(np.float64) * pos_y
    dih_day2 = (ay2 < by2) * pos_y
    dcw_dax1 = -(ax1 < bx1).astype(np.float64)
    dcw_dax2 = (ax2 >= bx2).astype(np.float64)
    dch_day1 = -(ay1 < by1).astype(np.float64)
    dch_day2 = (ay2 >= by2).astype(np.float64)

    dinter = np.stack([diw_dax1 * ih, dih_day1 * iw, diw_dax2 * ih, dih_day2 * iw], axis=1)
    darea = np.stack([-ah, -aw, ah, aw], axis=1)
    dC = np.stack([dcw_dax1 * ch, dch_day1 * cw, dcw_dax2 * ch, dch_day2 * cw], axis=1)
    dunion = darea - dinter
    # g = inter/union - 1 + union/C
    dg = (
        dinter / union[:, None]
        - (inter / union**2)[:, None] * dunion
        + dunion / C[:, None]
        - (union / C**2)[:, None] * dC
    )
    dg *= amask
    # corners -> (cx, cy, w, h)
    grad = np.stack(
        [
            dg[:, 0] + dg[:, 2],
            dg[:, 1] + dg[:, 3],
            0.5 * (dg[:, 2] - dg[:, 0]),
            0.5 * (dg[:, 3] - dg[:, 1]),
        ],
        axis=1,
    )
    return g, grad


def giou(a, b) -> float:
    g, _ = giou_batch(a, b, with_grad=False)
    return float(g[0])


def bbox_loss_batch(pred, gt, weights: LossWeights = LossWeights()):
    """Per-pair ``lambda_L1 * |pred - gt|_1 + lambda_gIoU * (1 - giou)``."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    diff = pred - gt
    l1 = np.abs(diff).sum(axis=1)
    g, dg = giou_batch(pred, gt)
    loss = weights.lambda_L1 * l1 + weights.lambda_gIoU * (1.0 - g)
    sign = np.where(diff >= 0, 1.0, -1.0)
    grad = weights.lambda_L1 * sign - weights.lambda_gIoU * dg
    return loss, grad


def bbox_loss(pred, gt, weights: LossWeights = LossWeights()):
    loss, grad = bbox_loss_batch(pred, gt, weights)
    return float(loss[0]), grad[0]


# ---------------------------------------------------------------------------
# similarity classification


def similarity_logits(e, text_vectors, tau: float, with_grad: bool = False):
    """Temperature-scaled cosines between region embeddings and text embeddings.

    ``e`` is (D,) or (N, D); ``text_vectors`` is (K, D). Returns logits of shape
    (N, K) (or (K,)) and, if requested, the cosines and norms needed by
    :func:`similarity_logits_backward`.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    e = np.asarray(e, dtype=np.float64)
    single = e.ndim == 1
    E = np.atleast_2d(e)
    en = np.linalg.norm(E, axis=1)
    if np.any(en == 0):
        raise DomainError("similarity is undefined for a zero-norm region embedding")
    T = np.asarray(text_vectors, dtype=np.float64)
    tn = np.linalg.norm(T, axis=1)
    Eh = E / en[:, None]
    Th = T / tn[:, None]
    cos = Eh @ Th.T
    logits = cos / tau
    if single:
        logits = logits[0]
    if not with_grad:
        return logits
    return logits, (Eh, Th, en, cos, tau)


def similarity_logits_backward(dlogits, cache) -> np.ndarray:
    """Gradient wrt ``e`` (N, D) given gradient on the (N, K) logits."""
    Eh, Th, en, cos, tau = cache
    dlogits = np.atleast_2d(dlogits)
    dcos = dlogits / tau
    # d cos_ik / d e_i = (t_k_hat - cos_ik * e_i_hat) / |e_i|
    g = dcos @ Th - np.sum(dcos * cos, axis=1, keepdims=True) * Eh
    return g / en[:, None]


def similarity_prob(e, bank, tau: float = 0.07) -> np.ndarray:
    """Independent per-class logistic of the cosine between ``e`` and each text embedding."""
    vectors = bank.vectors if hasattr(bank, "vectors") else bank
    return sigmoid(similarity_logits(e, vectors, tau))


# ---------------------------------------------------------------------------
# focal loss


def focal_loss(probs, target=None, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Sigmoid focal loss summed over classes, with gradient wrt ``probs``.

    ``target`` is a class index into ``probs`` or ``None`` for no-object.
    """
    p_raw = np.asarray(probs, dtype=np.float64)
    targets = np.zeros_like(p_raw)
    if target is not None:
        targets[target] = 1.0
    loss, grad = focal_loss_batch(p_raw[None, :], targets[None, :], alpha, gamma)
    return float(loss[0]), grad[0]


def focal_loss_batch(probs, targets, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Row-wise focal loss for (N, K) probabilities and 0/1 targets."""
    p_raw = np.asarray(probs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    p = np.clip(p_raw, PROB_EPS, 1.0 - PROB_EPS)
    inside = ((p_raw > PROB_EPS) & (p_raw < 1.0 - PROB_EPS)).astype(np.float64)
    logp = np.log(p)
    log1mp = np.log1p(-p)
    one_m = 1.0 - p
    pos = -alpha * one_m**gamma * logp
    neg = -(1.0 - alpha) * p**gamma * log1mp
    loss = np.where(y > 0, pos, neg).sum(axis=1)
    if gamma == 0:
        dpos = -alpha / p
        dneg = (1.0 - alpha) / one_m
    else:
        dpos = alpha * gamma * one_m ** (gamma - 1) * logp - alpha * one_m**gamma / p
        dneg = -(1.0 - alpha) * (gamma * p ** (gamma - 1) * log1mp - p**gamma / one_m)
    grad = np.where(y > 0, dpos, dneg) * inside
    return loss, grad


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_gradient(f: Callable[[np.ndarray], float], point, epsilon: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``point`` (any shape)."""
    x = np.array(point, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + epsilon
        fp = float(f(x))
        flat[k] = orig - epsilon
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near coordinate {k}")
        gflat[k] = (fp - fm) / (2 * epsilon)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``: normwise relative error."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), floor)
    return float(np.max(np.abs(a - n), initial=0.0)) / scale
