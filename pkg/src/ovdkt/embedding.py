"""Synthetic teacher visual-semantic space and per-category text embeddings.

Embeddings are plain 1-D ``float64`` numpy arrays. The teacher is a set of
unit anchors, one per category; text embeddings are template-averaged
perturbations of the anchors, and region (crop) embeddings are anchors pushed
off along a fixed per-category misalignment direction plus instance noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

BASE = "base"
NOVEL = "novel"


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain (e.g. a zero vector)."""


class TeacherConstructionError(RuntimeError):
    pass


class EmbeddingBankError(ValueError):
    pass


def _rng(seed) -> np.random.Generator:
    # seeds may be ints or tuples of ints
    if isinstance(seed, (tuple, list)):
        return np.random.default_rng(list(seed))
    return np.random.default_rng(seed)


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise DomainError("cannot normalize a zero-norm vector")
    return v / n


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine is undefined for zero-norm inputs")
    c = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, c))


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    group: str


@dataclass(frozen=True)
class CategorySpace:
    categories: tuple[Category, ...]

    def __post_init__(self):
        ids = [c.id for c in self.categories]
        if ids != list(range(len(ids))):
            raise ValueError("category ids must be unique and contiguous from 0")
        for c in self.categories:
            if c.group not in (BASE, NOVEL):
                raise ValueError(f"category {c.id} has unknown group {c.group!r}")

    @classmethod
    def make(cls, n_base: int, n_novel: int) -> "CategorySpace":
        cats = [Category(i, f"base_{i}", BASE) for i in range(n_base)]
        cats += [Category(n_base + i, f"novel_{i}", NOVEL) for i in range(n_novel)]
        return cls(tuple(cats))

    def __len__(self) -> int:
        return len(self.categories)

    def ids_in(self, groups) -> list[int]:
        if isinstance(groups, str):
            groups = {groups}
        return [c.id for c in self.categories if c.group in groups]

    @property
    def base_ids(self) -> list[int]:
        return self.ids_in(BASE)

    @property
    def novel_ids(self) -> list[int]:
        return self.ids_in(NOVEL)

    def group_of(self, category_id: int) -> str:
        return self.categories[category_id].group


@dataclass(frozen=True)
class TeacherSpace:
    """Unit anchors per category plus the noise model for the visual side.

    ``misalignment`` holds one unit direction per category; region embeddings
    are centred on ``normalize(anchor + alignment_noise * misalignment)``, so
    ``alignment_noise`` is the (tangent) offset between what the teacher sees
    and what its text side says. Smaller is a stronger teacher.
    """

    anchors: np.ndarray
    misalignment: np.ndarray
    alignment_noise: float = 0.2
    instance_noise: float = 0.1
    max_cosine: float = 1.0

    @property
    def dimension(self) -> int:
        return self.anchors.shape[1]

    @property
    def n_categories(self) -> int:
        return self.anchors.shape[0]

    def visual_centers(self) -> np.ndarray:
        if self.alignment_noise == 0:
            return self.anchors.copy()
        return normalize(self.anchors + self.alignment_noise * self.misalignment)

    def with_noise(self, alignment_noise=None, instance_noise=None) -> "TeacherSpace":
        return TeacherSpace(
            self.anchors,
            self.misalignment,
            self.alignment_noise if alignment_noise is None else float(alignment_noise),
            self.instance_noise if instance_noise is None else float(instance_noise),
            self.max_cosine,
        )


def build_teacher_space(
    category_space: CategorySpace,
    D: int = 64,
    min_angular_separation: float = 45.0,
    seed=0,
    alignment_noise: float = 0.2,
    instance_noise: float = 0.1,
    max_attempts: int = 2000,
) -> TeacherSpace:
    """Sample well-separated unit anchors by sequential rejection.

    ``min_angular_separation`` is in degrees. Each anchor gets ``max_attempts``
    draws to clear every previously accepted anchor; failing that, the
    configuration is treated as infeasible.
    """
    K = len(category_space)
    if D < 4:
        raise ValueError("dimension must be at least 4")
    if K < 2:
        raise ValueError("need at least two categories")
    if alignment_noise < 0 or instance_noise < 0:
        raise ValueError("noise scales must be non-negative")
    bound = math.cos(math.radians(min_angular_separation))
    rng = _rng(seed)
    anchors = np.empty((K, D))
    for k in range(K):
        for _ in range(max_attempts):
            v = rng.standard_normal(D)
            v /= np.linalg.norm(v)
            if k == 0 or np.max(anchors[:k] @ v) <= bound:
                anchors[k] = v
                break
        else:
            raise TeacherConstructionError(
                f"could not place anchor {k} of {K} in D={D} with separation "
                f"{min_angular_separation} deg after {max_attempts} attempts"
            )
    # misalignment directions are tangent to the sphere at each anchor
    m = rng.standard_normal((K, D))
    m -= np.sum(m * anchors, axis=1, keepdims=True) * anchors
    m = normalize(m)
    anchors.setflags(write=False)
    m.setflags(write=False)
    return TeacherSpace(anchors, m, float(alignment_noise), float(instance_noise), bound)


def text_embedding(
    teacher: TeacherSpace,
    category_id: int,
    template_count: int = 12,
    template_noise: float = 0.05,
    seed=0,
) -> np.ndarray:
    """Average of ``template_count`` perturbed copies of the anchor, renormalised.

    The perturbation is isotropic Gaussian with expected norm ``template_noise``.
    """
    if not 0 <= category_id < teacher.n_categories:
        raise IndexError(f"invalid category id {category_id}")
    if template_count < 1:
        raise ValueError("template_count must be >= 1")
    anchor = teacher.anchors[category_id]
    if template_noise == 0:
        return anchor.copy()
    D = teacher.dimension
    rng = _rng(seed)
    copies = anchor + template_noise / math.sqrt(D) * rng.standard_normal((template_count, D))
    return normalize(copies.mean(axis=0))


def region_embedding(teacher: TeacherSpace, category_id: int, seed=0) -> np.ndarray:
    """Teacher crop feature for one object of ``category_id``."""
    if not 0 <= category_id < teacher.n_categories:
        raise IndexError(f"invalid category id {category_id}")
    if teacher.alignment_noise == 0 and teacher.instance_noise == 0:
        return teacher.anchors[category_id].copy()
    D = teacher.dimension
    center = teacher.anchors[category_id] + teacher.alignment_noise * teacher.misalignment[category_id]
    noise = teacher.instance_noise / math.sqrt(D) * _rng(seed).standard_normal(D)
    return normalize(center + noise)


@dataclass(frozen=True)
class TextEmbeddingBank:
    vectors: np.ndarray  # (K, D), unit rows
    template_count: int = 12
    names: tuple[str, ...] = field(default=())

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, category_id: int) -> np.ndarray:
        return self.vectors[category_id]

    def to_json(self) -> dict:
        names = self.names or tuple(str(i) for i in range(len(self)))
        return {
            "dimension": self.dimension,
            "entries": [
                {"id": i, "name": names[i], "values": self.vectors[i].tolist()}
                for i in range(len(self))
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def build_text_bank(
    teacher: TeacherSpace,
    category_space: CategorySpace,
    template_count: int = 12,
    template_noise: float = 0.05,
    seed=0,
) -> TextEmbeddingBank:
    vecs = np.stack(
        [
            text_embedding(teacher, c.id, template_count, template_noise, seed=(seed, c.id))
            for c in category_space.categories
        ]
    )
    vecs.setflags(write=False)
    return TextEmbeddingBank(vecs, template_count, tuple(c.name for c in category_space.categories))


def import_embedding_bank(file_path, category_space: CategorySpace) -> TextEmbeddingBank:
    """Load a bank of precomputed text features, renormalising every entry."""
    try:
        doc = json.loads(Path(file_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise EmbeddingBankError(f"cannot read embedding bank {file_path}: {exc}") from exc
    if not isinstance(doc, dict) or "dimension" not in doc or "entries" not in doc:
        raise EmbeddingBankError("embedding bank must have 'dimension' and 'entries'")
    D = doc["dimension"]
    if not isinstance(D, int) or D < 1:
        raise EmbeddingBankError(f"invalid dimension {D!r}")
    by_id = {}
    for entry in doc["entries"]:
        try:
            cid = int(entry["id"])
            values = entry["values"]
        except (KeyError, TypeError, ValueError) as exc:
            raise EmbeddingBankError(f"malformed entry {entry!r}") from exc
        if len(values) != D:
            raise EmbeddingBankError(f"entry id {cid}: expected {D} values, got {len(values)}")
        v = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise EmbeddingBankError(f"entry id {cid}: non-finite value")
        if not np.any(v):
            raise EmbeddingBankError(f"entry id {cid}: zero vector")
        by_id[cid] = v
    missing = [c.id for c in category_space.categories if c.id not in by_id]
    if missing:
        raise EmbeddingBankError(f"missing category id {missing[0]} (all missing: {missing})")
    vecs = normalize(np.stack([by_id[c.id] for c in category_space.categories]))
    vecs.setflags(write=False)
    names = tuple(c.name for c in category_space.categories)
    return TextEmbeddingBank(vecs, template_count=0, names=names)


def pairwise_max_cosine(vectors: Sequence[np.ndarray]) -> float:
    V = normalize(np.asarray(vectors))
    G = V @ V.T
    np.fill_diagonal(G, -np.inf)
    return float(G.max())
