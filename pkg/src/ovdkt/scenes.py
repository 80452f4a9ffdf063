"""Synthetic detection scenes with a grid of context vectors and cached teacher features.

A scene is a ``G x G`` grid of D-dim context vectors standing in for encoder
output. A cell whose centre falls inside an object's box carries that
object's teacher crop feature plus noise (the smallest box wins on overlap);
every other cell is pure noise. Objects whose category group is not in
``annotate_groups`` stay in the scene but are recorded as hidden.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .embedding import BASE, NOVEL, CategorySpace, TeacherSpace, _rng, normalize, region_embedding
from .losses import iou_matrix


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GroundTruthObject:
    bbox: np.ndarray  # (cx, cy, w, h)
    category_id: int
    teacher_feature: np.ndarray

    def to_json(self) -> dict:
        return {
            "bbox": [float(x) for x in self.bbox],
            "category": int(self.category_id),
            "teacher": self.teacher_feature.tolist(),
        }

    @classmethod
    def from_json(cls, d) -> "GroundTruthObject":
        return cls(np.asarray(d["bbox"], dtype=np.float64), int(d["category"]),
                   np.asarray(d["teacher"], dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, GroundTruthObject):
            return NotImplemented
        return (self.category_id == other.category_id
                and np.array_equal(self.bbox, other.bbox)
                and np.array_equal(self.teacher_feature, other.teacher_feature))


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: int
    context: np.ndarray  # (G*G, D), row-major over (row=y, col=x)
    annotated: tuple[GroundTruthObject, ...]
    hidden: tuple[GroundTruthObject, ...] = ()

    @property
    def grid_size(self) -> int:
        return int(round(math.sqrt(self.context.shape[0])))

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.category_id for o in self.annotated], dtype=int)

    @property
    def boxes(self) -> np.ndarray:
        if not self.annotated:
            return np.zeros((0, 4))
        return np.stack([o.bbox for o in self.annotated])

    @property
    def teacher_features(self) -> np.ndarray:
        if not self.annotated:
            return np.zeros((0, self.context.shape[1]))
        return np.stack([o.teacher_feature for o in self.annotated])

    @property
    def all_objects(self) -> tuple[GroundTruthObject, ...]:
        return self.annotated + self.hidden

    def with_annotations(self, annotated) -> "SyntheticScene":
        return SyntheticScene(self.scene_id, self.context, tuple(annotated), self.hidden)

    def to_json(self) -> dict:
        return {
            "id": self.scene_id,
            "context": self.context.tolist(),
            "annotated": [o.to_json() for o in self.annotated],
            "hidden": [o.to_json() for o in self.hidden],
        }

    @classmethod
    def from_json(cls, d) -> "SyntheticScene":
        return cls(
            int(d["id"]),
            np.asarray(d["context"], dtype=np.float64),
            tuple(GroundTruthObject.from_json(o) for o in d["annotated"]),
            tuple(GroundTruthObject.from_json(o) for o in d.get("hidden", [])),
        )

    def __eq__(self, other):
        if not isinstance(other, SyntheticScene):
            return NotImplemented
        return (self.scene_id == other.scene_id
                and np.array_equal(self.context, other.context)
                and self.annotated == other.annotated
                and self.hidden == other.hidden)


@dataclass(frozen=True)
class SceneGenConfig:
    objects_per_scene: tuple[int, int] = (1, 4)
    box_size: tuple[float, float] = (0.15, 0.5)
    max_pairwise_iou: float = 0.3
    background_noise: float = 0.5
    grid_size: int = 8
    annotate_groups: frozenset = frozenset({BASE})
    max_attempts: int = 200

    def __post_init__(self):
        lo, hi = self.objects_per_scene
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid objects_per_scene {self.objects_per_scene}")
        blo, bhi = self.box_size
        if not 0 < blo <= bhi <= 1:
            raise ValueError(f"invalid box_size {self.box_size}")
        if not 0 <= self.max_pairwise_iou < 1:
            raise ValueError("max_pairwise_iou must be in [0, 1)")
        if self.background_noise < 0:
            raise ValueError("background_noise must be >= 0")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        object.__setattr__(self, "annotate_groups", frozenset(self.annotate_groups))
        if not self.annotate_groups <= {BASE, NOVEL}:
            raise ValueError(f"unknown groups in {set(self.annotate_groups)}")


def cell_centers(G: int) -> np.ndarray:
    """(G*G, 2) array of (x, y) cell centres, row-major."""
    c = (np.arange(G) + 0.5) / G
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def assign_cells(boxes: np.ndarray, G: int) -> np.ndarray:
    """Index of the owning object per cell, or -1 for background."""
    owner = np.full(G * G, -1, dtype=int)
    if len(boxes) == 0:
        return owner
    centers = cell_centers(G)
    areas = boxes[:, 2] * boxes[:, 3]
    # paint largest first so smaller boxes overwrite
    for k in sorted(range(len(boxes)), key=lambda i: (-areas[i], i)):
        cx, cy, w, h = boxes[k]
        inside = ((centers[:, 0] >= cx - w / 2) & (centers[:, 0] <= cx + w / 2)
                  & (centers[:, 1] >= cy - h / 2) & (centers[:, 1] <= cy + h / 2))
        owner[inside] = k
    return owner


def generate_scene(teacher: TeacherSpace, category_space: CategorySpace, config: SceneGenConfig,
                   seed=0, scene_id: int = 0) -> SyntheticScene:
    rng = _rng((_seed_int(seed), scene_id, 0))
    lo, hi = config.objects_per_scene
    k = int(rng.integers(lo, hi + 1))
    boxes = []
    for _ in range(k):
        for _attempt in range(config.max_attempts):
            w, h = rng.uniform(*config.box_size, size=2)
            cx = rng.uniform(w / 2, 1 - w / 2)
            cy = rng.uniform(h / 2, 1 - h / 2)
            b = np.array([cx, cy, w, h])
            if not boxes or iou_matrix(b, np.stack(boxes)).max() <= config.max_pairwise_iou:
                boxes.append(b)
                break
        else:
            raise SceneGenerationError(
                f"scene {scene_id}: could not place {k} boxes under IoU {config.max_pairwise_iou}"
            )
    labels = rng.integers(0, len(category_space), size=k)
    objects = []
    for i, (b, c) in enumerate(zip(boxes, labels)):
        r = region_embedding(teacher, int(c), seed=(_seed_int(seed), scene_id, 1, i))
        objects.append(GroundTruthObject(b, int(c), r))

    G, D = config.grid_size, teacher.dimension
    noise_scale = config.background_noise / math.sqrt(D)
    context = noise_scale * rng.standard_normal((G * G, D))
    owner = assign_cells(np.array(boxes).reshape(-1, 4), G)
    for i, obj in enumerate(objects):
        context[owner == i] += obj.teacher_feature
    annotated = tuple(o for o in objects if category_space.group_of(o.category_id) in config.annotate_groups)
    hidden = tuple(o for o in objects if category_space.group_of(o.category_id) not in config.annotate_groups)
    return SyntheticScene(scene_id, context, annotated, hidden)


def _seed_int(seed) -> int:
    return int(seed) if not isinstance(seed, (tuple, list)) else int(seed[0])


@dataclass(frozen=True)
class Dataset:
    train: tuple[SyntheticScene, ...]
    eval: tuple[SyntheticScene, ...]

    @property
    def dimension(self) -> int:
        return self.train[0].context.shape[1]

    @property
    def grid_size(self) -> int:
        return self.train[0].grid_size


def generate_dataset(n_scenes: int, teacher: TeacherSpace, category_space: CategorySpace,
                     train_config: SceneGenConfig, eval_config: SceneGenConfig | None = None,
                     seed=0, n_eval: int | None = None) -> Dataset:
    """Train split annotates base only; eval split annotates every group.

    ``n_eval`` defaults to ``n_scenes``. Scene ids are ``0..n-1`` for train and
    continue from there for eval.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    n_eval = n_scenes if n_eval is None else n_eval
    train_cfg = _with_groups(train_config, {BASE})
    eval_cfg = _with_groups(eval_config or train_config, {BASE, NOVEL})
    train = tuple(generate_scene(teacher, category_space, train_cfg, seed, i) for i in range(n_scenes))
    ev = tuple(generate_scene(teacher, category_space, eval_cfg, seed, n_scenes + i) for i in range(n_eval))
    return Dataset(train, ev)


def _with_groups(cfg: SceneGenConfig, groups) -> SceneGenConfig:
    from dataclasses import replace
    return replace(cfg, annotate_groups=frozenset(groups))


def image_summary(scene: SyntheticScene, background_noise: float, seed=0) -> np.ndarray:
    """Global image feature: mean teacher feature of every present object plus noise."""
    rng = _rng((_seed_int(seed), scene.scene_id, 2))
    D = scene.context.shape[1]
    objs = scene.all_objects
    base = np.mean([o.teacher_feature for o in objs], axis=0) if objs else np.zeros(D)
    noisy = base + background_noise / math.sqrt(D) * rng.standard_normal(D)
    return normalize(noisy)


def teacher_feature_cache(split: Sequence[SyntheticScene]) -> Mapping[tuple[int, int], np.ndarray]:
    cache = {}
    for scene in split:
        for i, obj in enumerate(scene.annotated):
            v = obj.teacher_feature.copy()
            v.setflags(write=False)
            cache[(scene.scene_id, i)] = v
    return MappingProxyType(cache)


# ---------------------------------------------------------------------------
# serialization


def split_to_json(split: Sequence[SyntheticScene]) -> dict:
    if not split:
        return {"dimension": 0, "grid": 0, "scenes": []}
    return {
        "dimension": int(split[0].context.shape[1]),
        "grid": split[0].grid_size,
        "scenes": [s.to_json() for s in split],
    }


def split_from_json(doc: dict) -> tuple[SyntheticScene, ...]:
    scenes = tuple(SyntheticScene.from_json(s) for s in doc["scenes"])
    D, G = doc["dimension"], doc["grid"]
    for s in scenes:
        if s.context.shape != (G * G, D):
            raise ValueError(f"scene {s.scene_id}: context shape {s.context.shape} != {(G * G, D)}")
    return scenes


def save_split(split, path) -> None:
    Path(path).write_text(json.dumps(split_to_json(split)))


def load_split(path) -> tuple[SyntheticScene, ...]:
    return split_from_json(json.loads(Path(path).read_text()))


def save_cache(cache: Mapping[tuple[int, int], np.ndarray], path) -> None:
    entries = [{"scene": s, "object": o, "teacher": v.tolist()} for (s, o), v in sorted(cache.items())]
    Path(path).write_text(json.dumps({"entries": entries}))


def load_cache(path) -> Mapping[tuple[int, int], np.ndarray]:
    doc = json.loads(Path(path).read_text())
    cache = {}
    for e in doc["entries"]:
        v = np.asarray(e["teacher"], dtype=np.float64)
        v.setflags(write=False)
        cache[(int(e["scene"]), int(e["object"]))] = v
    return MappingProxyType(cache)
