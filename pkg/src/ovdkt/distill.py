"""Regional contrastive distillation between teacher crop features and query embeddings.

Positive pairs come from the Hungarian match: teacher feature ``r_i`` pairs
with the query embedding that was assigned to ground truth ``i``. All
embeddings are L2-normalised before the dot products.

Summation order is fixed: every row of exponentials is sorted before it is
summed, so reordering the candidate set leaves the loss bitwise unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import DomainError
from .matcher import MatchResult


class PairError(ValueError):
    pass


@dataclass(frozen=True)
class PairSet:
    pairs: tuple[tuple[int, int], ...]
    M: int
    N: int

    def __post_init__(self):
        teachers = sorted(i for i, _ in self.pairs)
        if teachers != list(range(self.M)):
            raise PairError("teacher indices must cover [0, M) exactly once")
        students = [j for _, j in self.pairs]
        if len(set(students)) != len(students):
            raise PairError("student indices must be distinct")
        if any(not 0 <= j < self.N for j in students):
            raise PairError("student index out of range")

    @property
    def student_indices(self) -> np.ndarray:
        """Student index for teacher 0, 1, ..., M-1."""
        out = np.empty(self.M, dtype=int)
        for i, j in self.pairs:
            out[i] = j
        return out


def build_pairs(match: MatchResult, M: int, N: int) -> PairSet:
    covered = sorted(i for i, _ in match.pairs)
    if covered != list(range(M)):
        raise PairError(f"match does not cover all {M} ground truths: {covered}")
    return PairSet(tuple(sorted(match.pairs)), M, N)


def _unit_rows(X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = np.sqrt(np.sum(X * X, axis=1))
    if np.any(n == 0):
        raise DomainError("zero-norm embedding in contrastive loss")
    return X / n[:, None], n


def _rowwise_dot(A, B):
    # (a, D) x (b, D) -> (a, b); each entry reduced identically regardless of position
    return np.sum(A[:, None, :] * B[None, :, :], axis=2)


def _ce_rows(S, pos):
    """Sum over rows of ``-log softmax(S_row)[pos_row]`` and dL/dS."""
    m = np.max(S, axis=1, keepdims=True)
    ex = np.exp(S - m)
    denom = np.sum(np.sort(ex, axis=1), axis=1)
    rows = np.arange(S.shape[0])
    loss = float(np.sum(np.log(denom) + m[:, 0] - S[rows, pos]))
    dS = ex / denom[:, None]
    dS[rows, pos] -= 1.0
    return loss, dS


def _unnormalize_grad(dU, U, norms):
    # d(x/|x|) projection: (I - u u^T)/|x|
    return (dU - np.sum(dU * U, axis=1, keepdims=True) * U) / norms[:, None]


def loss_teacher_to_student(r, e, pairs: PairSet, tau: float = 0.07):
    """Each teacher feature vs all N query embeddings; matched query is the positive.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``e``.
    """
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    if pairs.M == 0:
        return 0.0, np.zeros_like(e)
    R, _ = _unit_rows(r)
    E, en = _unit_rows(e)
    S = _rowwise_dot(R, E) / tau  # (M, N)
    loss, dS = _ce_rows(S, pairs.student_indices)
    dE = dS.T @ R / tau
    return loss, _unnormalize_grad(dE, E, en)


def loss_student_to_teacher(r, e_matched, tau: float = 0.07):
    """Each matched query embedding vs the M teacher features of its image."""
    e_matched = np.atleast_2d(np.asarray(e_matched, dtype=np.float64))
    M = 0 if np.size(r) == 0 else np.atleast_2d(r).shape[0]
    if M == 0:
        return 0.0, np.zeros_like(e_matched)
    R, _ = _unit_rows(r)
    E, en = _unit_rows(e_matched)
    S = _rowwise_dot(E, R) / tau  # (M, M), row = student
    loss, dS = _ce_rows(S, np.arange(M))
    dE = dS @ R / tau
    return loss, _unnormalize_grad(dE, E, en)


def contrastive_loss(r, e, pairs: PairSet, tau: float = 0.07):
    """Mean of the two directional losses; gradient over all N query embeddings."""
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    if pairs.M == 0:
        return 0.0, np.zeros_like(e)
    idx = pairs.student_indices
    l_ts, g_ts = loss_teacher_to_student(r, e, pairs, tau)
    l_st, g_st = loss_student_to_teacher(r, e[idx], tau)
    grad = 0.5 * g_ts
    grad[idx] += 0.5 * g_st
    return 0.5 * (l_ts + l_st), grad


def l1_distill(r, e_matched):
    """Mean absolute difference over pairs and dimensions (element-wise baseline)."""
    e_matched = np.atleast_2d(np.asarray(e_matched, dtype=np.float64))
    if np.size(r) == 0 or e_matched.shape[0] == 0:
        return 0.0, np.zeros_like(e_matched)
    R = np.atleast_2d(np.asarray(r, dtype=np.float64))
    diff = e_matched - R
    n = diff.size
    loss = float(np.abs(diff).sum() / n)
    grad = np.where(diff >= 0, 1.0, -1.0) / n
    return loss, grad
