"""Finite-difference checks of every hand-written gradient.

Each check draws random instances away from kinks, compares the analytic
gradient against central differences and keeps the worst normwise relative
error over the trials.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .detector import PARAM_NAMES, backward, forward, init_state
from .distill import PairSet, contrastive_loss, l1_distill, loss_student_to_teacher, loss_teacher_to_student
from .embedding import _rng, normalize
from .losses import (
    bbox_loss,
    finite_diff_gradient,
    focal_loss,
    relative_error,
    sigmoid,
    similarity_logits,
    similarity_logits_backward,
)
from .matcher import hungarian, match_cost
from .scenes import GroundTruthObject, SyntheticScene


@dataclass(frozen=True)
class GradcheckSizes:
    N: int = 4
    G: int = 4
    D: int = 8
    Dq: int = 8
    H: int = 8
    K: int = 6
    M: int = 3


@dataclass(frozen=True)
class GradcheckRow:
    component: str
    worst_error: float
    trials: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_error <= self.tolerance


def _random_box(rng):
    w, h = rng.uniform(0.1, 0.5, size=2)
    cx = rng.uniform(w / 2 + 0.01, 1 - w / 2 - 0.01)
    cy = rng.uniform(h / 2 + 0.01, 1 - h / 2 - 0.01)
    return np.array([cx, cy, w, h])


def _check_bbox(rng, sizes):
    pred, gt = _random_box(rng), _random_box(rng)
    _, g = bbox_loss(pred, gt)
    return g, finite_diff_gradient(lambda x: bbox_loss(x, gt)[0], pred)


def _check_focal(rng, sizes):
    p = rng.uniform(0.05, 0.95, size=sizes.K)
    target = int(rng.integers(-1, sizes.K))
    target = None if target < 0 else target
    _, g = focal_loss(p, target)
    return g, finite_diff_gradient(lambda x: focal_loss(x, target)[0], p)


def _check_similarity(rng, sizes):
    e = rng.standard_normal((sizes.N, sizes.D))
    t = normalize(rng.standard_normal((sizes.K, sizes.D)))
    w = rng.standard_normal((sizes.N, sizes.K))

    def f(x):
        return float(np.sum(w * sigmoid(similarity_logits(x, t, 0.07))))

    logits, cache = similarity_logits(e, t, 0.07, with_grad=True)
    p = sigmoid(logits)
    g = similarity_logits_backward(w * p * (1 - p), cache)
    return g, finite_diff_gradient(f, e)


def _pairs(rng, M, N):
    js = rng.permutation(N)[:M]
    return PairSet(tuple((i, int(j)) for i, j in enumerate(js)), M, N)


def _check_t2s(rng, sizes):
    N, M = 2 * sizes.N, sizes.M
    r = rng.standard_normal((M, sizes.D))
    e = rng.standard_normal((N, sizes.D))
    ps = _pairs(rng, M, N)
    _, g = loss_teacher_to_student(r, e, ps, 0.07)
    return g, finite_diff_gradient(lambda x: loss_teacher_to_student(r, x, ps, 0.07)[0], e)


def _check_s2t(rng, sizes):
    M = sizes.M + 2
    r = rng.standard_normal((M, sizes.D))
    e = rng.standard_normal((M, sizes.D))
    _, g = loss_student_to_teacher(r, e, 0.07)
    return g, finite_diff_gradient(lambda x: loss_student_to_teacher(r, x, 0.07)[0], e)


def _check_contrastive(rng, sizes):
    N, M = 2 * sizes.N, sizes.M
    r = rng.standard_normal((M, sizes.D))
    e = rng.standard_normal((N, sizes.D))
    ps = _pairs(rng, M, N)
    _, g = contrastive_loss(r, e, ps, 0.07)
    return g, finite_diff_gradient(lambda x: contrastive_loss(r, x, ps, 0.07)[0], e)


def _check_l1(rng, sizes):
    r = rng.standard_normal((sizes.M, sizes.D))
    e = rng.standard_normal((sizes.M, sizes.D))
    _, g = l1_distill(r, e)
    return g, finite_diff_gradient(lambda x: l1_distill(r, x)[0], e)


def random_instance(rng, sizes: GradcheckSizes):
    """A perturbed small detector, a scene, a bank and prior rows."""
    from .embedding import TextEmbeddingBank
    from .trainer import TrainConfig

    st = init_state(sizes.N, sizes.D, sizes.Dq, sizes.H, seed=int(rng.integers(2**31)))
    for k in PARAM_NAMES:
        st.params[k] = st.params[k] + 0.3 * rng.standard_normal(st.params[k].shape)
    bank = TextEmbeddingBank(normalize(rng.standard_normal((sizes.K, sizes.D))))
    M = min(sizes.M, sizes.N)
    objs = tuple(
        GroundTruthObject(_random_box(rng), int(rng.integers(sizes.K)), normalize(rng.standard_normal(sizes.D)))
        for _ in range(M)
    )
    scene = SyntheticScene(0, rng.standard_normal((sizes.G * sizes.G, sizes.D)), objs)
    t = bank.vectors[rng.integers(sizes.K, size=sizes.N)]
    cfg = TrainConfig(num_queries=sizes.N, query_dim=sizes.Dq, hidden_dim=sizes.H, max_priors=1)
    return st, scene, bank, t, cfg


def _check_detector(rng, sizes):
    from .trainer import total_loss

    st, scene, bank, t, cfg = random_instance(rng, sizes)
    class_ids = list(range(sizes.K))
    e, b, tr = forward(st, scene.context, t)
    match = hungarian(match_cost(e, b, scene.labels, scene.boxes, bank, cfg.tau_cls, cfg.weights))

    def loss_of(state):
        e_, b_, tr_ = forward(state, scene.context, t)
        parts, de, db = total_loss(e_, b_, scene, match, bank, class_ids, cfg.weights, cfg.tau_cls,
                                   cfg.tau_contrast, 2, "contrastive")
        return parts.total, tr_, de, db

    _, tr, de, db = loss_of(st)
    g = backward(st, tr, de, db)
    analytic, numeric = [], []
    for k in PARAM_NAMES:
        def f(x, k=k):
            old = st.params[k]
            st.params[k] = x
            try:
                return loss_of(st)[0]
            finally:
                st.params[k] = old

        analytic.append(g[k].ravel())
        numeric.append(finite_diff_gradient(f, st.params[k]).ravel())
    return np.concatenate(analytic), np.concatenate(numeric)


CHECKS: dict[str, Callable] = {
    "bbox_loss": _check_bbox,
    "focal_loss": _check_focal,
    "similarity_prob": _check_similarity,
    "teacher_to_student": _check_t2s,
    "student_to_teacher": _check_s2t,
    "contrastive_loss": _check_contrastive,
    "l1_distill": _check_l1,
    "detector_total_loss": _check_detector,
}


def run_gradcheck(trials: int = 20, tolerance: float = 1e-4, seed: int = 0,
                  sizes: GradcheckSizes = GradcheckSizes(), components=None) -> list[GradcheckRow]:
    rows = []
    for name in components or CHECKS:
        worst = 0.0
        for k in range(trials):
            a, n = CHECKS[name](_rng((seed, k, len(name))), sizes)
            worst = max(worst, relative_error(a, n))
        rows.append(GradcheckRow(name, worst, trials, tolerance))
    return rows
