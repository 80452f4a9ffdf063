"""Per-image concept existence: which category priors get injected into the queries."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .embedding import CategorySpace, DomainError, _rng
from .losses import sigmoid, similarity_logits

SIMILARITY = "similarity_threshold"
ORACLE = "binary_oracle"


class PriorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FilterConfig:
    method: str = SIMILARITY
    rho: float = 0.7
    max_priors: int = 4
    oracle_error_rate: float = 0.0
    tau: float = 0.07

    def __post_init__(self):
        if self.method not in (SIMILARITY, ORACLE):
            raise PriorConfigError(f"unknown filter method {self.method!r}")
        if not 0 < self.rho < 1:
            raise PriorConfigError("rho must lie strictly between 0 and 1")
        if self.max_priors < 1:
            raise PriorConfigError("max_priors must be >= 1")
        if not 0 <= self.oracle_error_rate < 1:
            raise PriorConfigError("oracle_error_rate must be in [0, 1)")
        if self.tau <= 0:
            raise PriorConfigError("tau must be positive")


@dataclass(frozen=True)
class ConceptExistenceReport:
    scores: np.ndarray | None
    retained: tuple[int, ...]


def score_concepts_similarity(image_summary, bank, tau: float = 0.07) -> np.ndarray:
    s = np.asarray(image_summary, dtype=np.float64)
    if not np.any(s):
        raise DomainError("image summary has zero norm")
    vectors = bank.vectors if hasattr(bank, "vectors") else bank
    return sigmoid(similarity_logits(s, vectors, tau))


def filter_by_threshold(scores, rho: float) -> list[int]:
    """Ids with score >= rho, by descending score then ascending id."""
    if not 0 < rho < 1:
        raise PriorConfigError("rho must lie strictly between 0 and 1")
    scores = np.asarray(scores, dtype=np.float64)
    keep = [i for i in range(len(scores)) if scores[i] >= rho]
    return sorted(keep, key=lambda i: (-scores[i], i))


def binary_oracle_existence(labels: Iterable[int], category_space: CategorySpace,
                            oracle_error_rate: float, seed=0) -> list[int]:
    """Simulated yes/no existence oracle with symmetric error rate.

    Retained ids come out in ascending order.
    """
    if not 0 <= oracle_error_rate < 1:
        raise PriorConfigError("oracle_error_rate must be in [0, 1)")
    present = set(int(c) for c in labels)
    u = _rng(seed).random(len(category_space))
    out = []
    for c in range(len(category_space)):
        says_yes = u[c] >= oracle_error_rate if c in present else u[c] < oracle_error_rate
        if says_yes:
            out.append(c)
    return out


def pad_priors(retained: Sequence[int], L: int, category_space: CategorySpace, seed=0,
               pool: Sequence[int] | None = None) -> list[int]:
    """Truncate to the top ``L`` retained ids or pad with random distinct extras.

    Padding draws from ``pool`` (default: every category) minus ``retained``;
    if the pool runs dry the rest of the category space is used.
    """
    K = len(category_space)
    if L < 1:
        raise PriorConfigError("L must be >= 1")
    if L > K:
        raise PriorConfigError(f"L={L} exceeds the number of categories ({K})")
    retained = [int(c) for c in retained]
    if len(retained) >= L:
        return retained[:L]
    rng = _rng(seed)
    taken = set(retained)
    first = [c for c in (range(K) if pool is None else pool) if c not in taken]
    chosen = list(rng.permutation(first)[: L - len(retained)]) if first else []
    out = retained + [int(c) for c in chosen]
    if len(out) < L:
        rest = [c for c in range(K) if c not in set(out)]
        out += [int(c) for c in rng.permutation(rest)[: L - len(out)]]
    return out


def training_priors(scene) -> list[int]:
    return sorted({int(o.category_id) for o in scene.annotated})


def select_priors(scene, bank, category_space: CategorySpace, config: FilterConfig,
                  background_noise: float = 0.5, seed=0) -> ConceptExistenceReport:
    """Run the configured inference-time filter on one scene (before padding)."""
    from .scenes import image_summary

    if config.method == SIMILARITY:
        summary = image_summary(scene, background_noise, seed=seed)
        scores = score_concepts_similarity(summary, bank, config.tau)
        return ConceptExistenceReport(scores, tuple(filter_by_threshold(scores, config.rho)))
    labels = [o.category_id for o in scene.all_objects]
    kept = binary_oracle_existence(labels, category_space, config.oracle_error_rate,
                                   seed=(seed, scene.scene_id, 3))
    return ConceptExistenceReport(None, tuple(kept))
