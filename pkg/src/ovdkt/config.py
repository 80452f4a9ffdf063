"""Run configuration: one JSON document covering every stage of the pipeline.

Unknown keys are rejected at every level. Two environment variables may
override the document: ``OVDKT_OUT_DIR`` (output directory) and
``OVDKT_SEED`` (global seed).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .concepts import FilterConfig, PriorConfigError
from .embedding import BASE, CategorySpace
from .evaluator import POSTPROCESS_MODES, SIMILARITY_ONLY
from .losses import LossWeights
from .scenes import SceneGenConfig
from .trainer import TrainConfig

ENV_OUT_DIR = "OVDKT_OUT_DIR"
ENV_SEED = "OVDKT_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CategoryOptions:
    n_base: int = 10
    n_novel: int = 4

    def __post_init__(self):
        if self.n_base < 1 or self.n_novel < 0:
            raise ConfigError("need at least one base category and a non-negative novel count")


@dataclass(frozen=True)
class TeacherOptions:
    dimension: int = 8
    min_angular_separation: float = 45.0
    alignment_noise: float = 0.2
    instance_noise: float = 0.1
    template_count: int = 12
    template_noise: float = 0.05

    def __post_init__(self):
        if self.dimension < 4:
            raise ConfigError("dimension must be >= 4")
        if self.alignment_noise < 0 or self.instance_noise < 0 or self.template_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.template_count < 1:
            raise ConfigError("template_count must be >= 1")
        if not 0 < self.min_angular_separation <= 180:
            raise ConfigError("min_angular_separation must be in (0, 180]")


@dataclass(frozen=True)
class SceneOptions:
    n_train: int = 400
    n_eval: int = 100
    objects_per_scene: tuple[int, int] = (1, 4)
    box_size: tuple[float, float] = (0.15, 0.5)
    max_pairwise_iou: float = 0.3
    background_noise: float = 0.2
    grid_size: int = 8

    def __post_init__(self):
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be >= 1")
        object.__setattr__(self, "objects_per_scene", tuple(int(x) for x in self.objects_per_scene))
        object.__setattr__(self, "box_size", tuple(float(x) for x in self.box_size))
        self.scene_config(frozenset({BASE}))  # validates ranges

    def scene_config(self, groups) -> SceneGenConfig:
        try:
            return SceneGenConfig(self.objects_per_scene, self.box_size, self.max_pairwise_iou,
                                  self.background_noise, self.grid_size, frozenset(groups))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class DetectorOptions:
    num_queries: int = 4
    query_dim: int = 32
    hidden_dim: int = 64

    def __post_init__(self):
        if min(self.num_queries, self.query_dim, self.hidden_dim) < 1:
            raise ConfigError("detector sizes must be positive")


@dataclass(frozen=True)
class TrainOptions:
    total_epochs: int = 60
    phase1_epochs: int = 20
    base_lr: float = 3e-3
    lr_decay_factor: float = 0.1
    decay_epoch: int = 50
    clip_max_norm: float = 0.1
    batch_size: int = 4
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_cls: float = 2.0
    lambda_contrast: float = 1.0
    tau_cls: float = 0.07
    tau_contrast: float = 0.07
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    guidance: bool = True
    distill: str = "contrastive"


@dataclass(frozen=True)
class EvalOptions:
    postprocess: str = SIMILARITY_ONLY
    score_floor: float = 0.05

    def __post_init__(self):
        if self.postprocess not in POSTPROCESS_MODES:
            raise ConfigError(f"postprocess must be one of {POSTPROCESS_MODES}")
        if not 0 <= self.score_floor <= 1:
            raise ConfigError("score_floor must be in [0, 1]")


_SECTIONS = {
    "categories": CategoryOptions,
    "teacher": TeacherOptions,
    "scenes": SceneOptions,
    "filter": FilterConfig,
    "detector": DetectorOptions,
    "train": TrainOptions,
    "eval": EvalOptions,
}


@dataclass(frozen=True)
class RunConfig:
    categories: CategoryOptions = field(default_factory=CategoryOptions)
    teacher: TeacherOptions = field(default_factory=TeacherOptions)
    scenes: SceneOptions = field(default_factory=SceneOptions)
    filter: FilterConfig = field(default_factory=FilterConfig)
    detector: DetectorOptions = field(default_factory=DetectorOptions)
    train: TrainOptions = field(default_factory=TrainOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if self.filter.max_priors > self.detector.num_queries:
            raise ConfigError("filter.max_priors cannot exceed detector.num_queries")
        if self.filter.max_priors > self.categories.n_base + self.categories.n_novel:
            raise ConfigError("filter.max_priors exceeds the number of categories")
        self.train_config()  # validates the schedule

    @property
    def category_space(self) -> CategorySpace:
        return CategorySpace.make(self.categories.n_base, self.categories.n_novel)

    def train_config(self, **changes) -> TrainConfig:
        t = self.train
        kw = dict(
            total_epochs=t.total_epochs, phase1_epochs=t.phase1_epochs, base_lr=t.base_lr,
            lr_decay_factor=t.lr_decay_factor, decay_epoch=t.decay_epoch, clip_max_norm=t.clip_max_norm,
            batch_size=t.batch_size,
            weights=LossWeights(t.lambda_l1, t.lambda_giou, t.lambda_cls, t.lambda_contrast),
            tau_cls=t.tau_cls, tau_contrast=t.tau_contrast, beta1=t.beta1, beta2=t.beta2, eps=t.eps,
            weight_decay=t.weight_decay, num_queries=self.detector.num_queries,
            query_dim=self.detector.query_dim, hidden_dim=self.detector.hidden_dim,
            max_priors=self.filter.max_priors, guidance=t.guidance, distill=t.distill, seed=self.seed,
        )
        kw.update(changes)
        try:
            return TrainConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenes"]["objects_per_scene"] = list(self.scenes.objects_per_scene)
        d["scenes"]["box_size"] = list(self.scenes.box_size)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict, env: dict | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        top = {f.name for f in fields(cls)}
        unknown = set(doc) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, section in _SECTIONS.items():
            if name in doc:
                kw[name] = _section(section, doc[name], name)
        if "output_dir" in doc:
            kw["output_dir"] = str(doc["output_dir"])
        if "seed" in doc:
            kw["seed"] = _int(doc["seed"], "seed")
        env = os.environ if env is None else env
        if env.get(ENV_OUT_DIR):
            kw["output_dir"] = env[ENV_OUT_DIR]
        if env.get(ENV_SEED):
            kw["seed"] = _int(env[ENV_SEED], ENV_SEED)
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, env: dict | None = None) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc, env)


def _int(v, name) -> int:
    try:
        out = int(v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be an integer") from exc
    if isinstance(v, float) and v != out:
        raise ConfigError(f"{name} must be an integer")
    return out


def _section(cls, doc, name):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError, PriorConfigError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc

