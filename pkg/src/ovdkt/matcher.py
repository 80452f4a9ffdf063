"""Matching cost between ground truth and queries, and exact rectangular assignment.

:func:`hungarian` solves the rectangular assignment problem (rows = ground
truth, columns = queries, ``M <= N``) with the shortest-augmenting-path
Hungarian method and dual potentials. Among several optimal assignments it
returns the lexicographically smallest pair list: the optimal duals identify
the tight edges, and every optimal assignment is a row-saturating matching
that uses tight edges only, so a greedy row-by-row pick with a feasibility
check on the tight graph yields the lexicographic minimum.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .losses import LossWeights, bbox_loss_batch, sigmoid, similarity_logits


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.pairs], dtype=int)

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([j for _, j in self.pairs], dtype=int)


def match_cost(pred_embeds, pred_boxes, gt_labels, gt_boxes, bank, tau: float = 0.07,
               weights: LossWeights = LossWeights()) -> np.ndarray:
    """(M, N) cost: ``-p_j(c_i) + bbox_loss(pred_box_j, gt_box_i)``."""
    pred_boxes = np.atleast_2d(np.asarray(pred_boxes, dtype=np.float64))
    gt_boxes = np.atleast_2d(np.asarray(gt_boxes, dtype=np.float64))
    gt_labels = np.asarray(gt_labels, dtype=int)
    M, N = len(gt_labels), pred_boxes.shape[0]
    if M < 1 or N < 1:
        raise ShapeError("match_cost needs at least one ground truth and one query")
    vectors = bank.vectors if hasattr(bank, "vectors") else np.asarray(bank)
    probs = sigmoid(similarity_logits(np.atleast_2d(pred_embeds), vectors[gt_labels], tau))  # (N, M)
    rows = np.repeat(np.arange(M), N)
    cols = np.tile(np.arange(N), M)
    box_cost, _ = bbox_loss_batch(pred_boxes[cols], gt_boxes[rows], weights)
    return -probs.T + box_cost.reshape(M, N)


def _solve_rect(C: np.ndarray):
    """Min-cost injection of the rows of ``C`` (M <= N) into its columns.

    Returns ``(col_of_row, u, v)`` with feasible optimal duals: ``C - u - v >= 0``,
    equality on the assignment, and ``v = 0`` on every unassigned column.
    """
    M, N = C.shape
    INF = np.inf
    u = np.zeros(M + 1)
    v = np.zeros(N + 1)
    p = np.zeros(N + 1, dtype=int)  # p[j] = row (1-based) on column j; column 0 is virtual
    way = np.zeros(N + 1, dtype=int)
    for i in range(1, M + 1):
        p[0] = i
        j0 = 0
        minv = np.full(N + 1, INF)
        used = np.zeros(N + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.empty(M, dtype=int)
    for j in range(1, N + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _has_perfect_matching(adj: list[list[int]], fixed_rows: dict[int, int], n: int) -> bool:
    """Kuhn's augmenting paths on the tight graph with some rows pinned."""
    match_col = [-1] * n
    taken = set(fixed_rows.values())
    for r, c in fixed_rows.items():
        match_col[c] = r

    def augment(r, seen):
        for c in adj[r]:
            if c in taken or seen[c]:
                continue
            seen[c] = True
            if match_col[c] == -1 or augment(match_col[c], seen):
                match_col[c] = r
                return True
        return False

    for r in range(n):
        if r in fixed_rows:
            continue
        if not augment(r, [False] * n):
            return False
    return True


def hungarian(cost, tol: float = 1e-9) -> MatchResult:
    """Exact minimum-cost injection of rows into columns (``M <= N``)."""
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ShapeError("cost must be a 2-D matrix")
    M, N = C.shape
    if M > N:
        raise ShapeError(f"more ground truths ({M}) than queries ({N})")
    if M == 0:
        return MatchResult((), 0.0)
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    col_of_row, u, v = _solve_rect(C)
    scale = max(1.0, float(np.max(np.abs(C))))
    eps = tol * scale
    tight = (C - u[:, None] - v[None, :]) <= eps
    # dummy rows (zero cost, zero dual) complete the square; they may only use
    # columns whose dual is zero, i.e. columns an optimum is free to leave empty
    free_cols = np.abs(v) <= eps
    tight = np.vstack([tight, np.repeat(free_cols[None, :], N - M, axis=0)])
    adj = [list(np.nonzero(tight[r])[0]) for r in range(N)]
    fixed: dict[int, int] = {}
    for r in range(M):
        if len(adj[r]) == 1:  # forced: some optimum exists and must use it
            fixed[r] = int(adj[r][0])
            continue
        for c in adj[r]:
            if c in fixed.values():
                continue
            fixed[r] = c
            if _has_perfect_matching(adj, fixed, N):
                break
            del fixed[r]
        else:  # numerical fallback: keep the solver's answer for this row
            fixed[r] = int(col_of_row[r])
    pairs = tuple((r, int(fixed[r])) for r in range(M))
    total = float(sum(C[r, c] for r, c in pairs))
    return MatchResult(pairs, total)


def brute_force_assignment(cost) -> MatchResult:
    """Exhaustive search over all injections; lexicographic tie-break."""
    C = np.asarray(cost, dtype=np.float64)
    M, N = C.shape
    if N > 8:
        raise ValueError("brute force limited to N <= 8")
    if M > N:
        raise ShapeError(f"more ground truths ({M}) than queries ({N})")
    best = None
    best_cost = np.inf
    # permutations come out in lexicographic order, so strict < keeps the smallest
    for cols in itertools.permutations(range(N), M):
        total = sum(C[r, c] for r, c in enumerate(cols))
        if total < best_cost:
            best_cost = total
            best = cols
    if best is None:
        return MatchResult((), 0.0)
    pairs = tuple(enumerate(best))
    return MatchResult(tuple((r, int(c)) for r, c in pairs), float(sum(C[r, c] for r, c in pairs)))
