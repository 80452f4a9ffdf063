"""End-to-end pipeline helpers and the ablation harness.

A *world* is everything generated from a run config and a seed: category
space, teacher, text bank, dataset and teacher cache. A *variant* changes
training (guidance, distillation, teacher strength) and/or inference (prior
filter, number of priors, postprocess). The harness trains each distinct
training setup once per seed and evaluates every variant that shares it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

from .concepts import ORACLE, SIMILARITY, FilterConfig
from .config import RunConfig
from .detector import DetectorState
from .embedding import CategorySpace, TeacherSpace, TextEmbeddingBank, build_teacher_space, build_text_bank
from .evaluator import (
    COMBINED,
    RESULT_COLUMNS,
    SIMILARITY_ONLY,
    EvalResult,
    InferenceOptions,
    evaluate,
    infer_split,
)
from .scenes import Dataset, generate_dataset, teacher_feature_cache
from .trainer import TrainLog, train

SUITES = ("components", "teacher_scaling", "priors_grid", "distill_baseline")


@dataclass(frozen=True)
class World:
    category_space: CategorySpace
    teacher: TeacherSpace
    bank: TextEmbeddingBank
    dataset: Dataset
    cache: object


def build_world(rc: RunConfig, seed: int | None = None, alignment_noise: float | None = None) -> World:
    seed = rc.seed if seed is None else seed
    t = rc.teacher
    cs = rc.category_space
    teacher = build_teacher_space(
        cs, D=t.dimension, min_angular_separation=t.min_angular_separation, seed=seed,
        alignment_noise=t.alignment_noise if alignment_noise is None else alignment_noise,
        instance_noise=t.instance_noise,
    )
    bank = build_text_bank(teacher, cs, t.template_count, t.template_noise, seed=seed)
    sc = rc.scenes
    ds = generate_dataset(sc.n_train, teacher, cs, sc.scene_config({"base"}), sc.scene_config({"base", "novel"}),
                          seed=seed, n_eval=sc.n_eval)
    return World(cs, teacher, bank, ds, teacher_feature_cache(ds.train))


def train_world(rc: RunConfig, world: World, seed: int | None = None, progress=None, **changes):
    cfg = rc.train_config(seed=rc.seed if seed is None else seed, **changes)
    return train(world.dataset.train, world.cache, world.bank, cfg, world.category_space, progress=progress)


def evaluate_world(state: DetectorState, rc: RunConfig, world: World, filter_config: FilterConfig | None = None,
                   postprocess: str | None = None, guidance: bool = True, seed: int | None = None):
    """Returns ``(EvalResult, detections)`` on the eval split."""
    opts = InferenceOptions(
        postprocess=postprocess or rc.eval.postprocess,
        guidance=guidance,
        score_floor=rc.eval.score_floor,
        tau_cls=rc.train.tau_cls,
        background_noise=rc.scenes.background_noise,
        seed=rc.seed if seed is None else seed,
    )
    fc = filter_config or rc.filter
    dets = infer_split(state, world.dataset.eval, world.bank, fc, world.category_space, opts)
    return evaluate(dets, world.dataset.eval, world.category_space), dets


# ---------------------------------------------------------------------------
# harness


@dataclass(frozen=True)
class Variant:
    """One row of an ablation table. ``None`` fields inherit from the run config."""

    name: str
    guidance: bool = True
    distill: str = "contrastive"
    postprocess: str = SIMILARITY_ONLY
    alignment_noise: float | None = None
    filter_method: str | None = None
    rho: float | None = None
    max_priors: int | None = None

    def descriptor(self, rc: RunConfig) -> dict:
        fc = self.filter_config(rc)
        return {
            "variant": self.name,
            "guidance": self.guidance,
            "distill": self.distill,
            "postprocess": self.postprocess,
            "alignment_noise": self.noise(rc),
            "filter": fc.method,
            "rho": fc.rho,
            "priors": fc.max_priors,
        }

    def noise(self, rc: RunConfig) -> float:
        return rc.teacher.alignment_noise if self.alignment_noise is None else self.alignment_noise

    def filter_config(self, rc: RunConfig) -> FilterConfig:
        fc = rc.filter
        changes = {}
        if self.filter_method is not None:
            changes["method"] = self.filter_method
        if self.rho is not None:
            changes["rho"] = self.rho
        if self.max_priors is not None:
            changes["max_priors"] = self.max_priors
        return replace(fc, **changes) if changes else fc

    def training_key(self, rc: RunConfig, seed: int) -> tuple:
        return (self.guidance, self.distill, self.noise(rc), seed)


@dataclass(frozen=True)
class HarnessRow:
    variant: Variant
    seed: int
    result: EvalResult


def suite_variants(suite: str, rc: RunConfig) -> list[Variant]:
    if suite == "components":
        return [
            Variant("baseline", guidance=False, distill="none"),
            Variant("guidance", distill="none"),
            Variant("guidance+contrastive+combined", postprocess=COMBINED),
            Variant("full"),
        ]
    if suite == "teacher_scaling":
        return [Variant(f"alignment_noise={a}", alignment_noise=a) for a in (0.4, 0.2, 0.05)]
    if suite == "priors_grid":
        L = rc.filter.max_priors
        return [Variant(f"L={n},rho={r}", max_priors=n, rho=r) for n in (L, 2 * L) for r in (0.5, 0.7)]
    if suite == "distill_baseline":
        return [Variant(d, distill=d) for d in ("contrastive", "l1", "none")]
    raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")


def prior_noise_variants(rc: RunConfig) -> list[Variant]:
    """Oracle priors, thresholded priors, and thresholded priors padded to twice L."""
    L = rc.filter.max_priors
    return [
        Variant("oracle", filter_method=ORACLE, rho=0.7, max_priors=L),
        Variant("similarity", filter_method=SIMILARITY, rho=0.7, max_priors=L),
        Variant("similarity_2L", filter_method=SIMILARITY, rho=0.7, max_priors=2 * L),
    ]


class Harness:
    """Trains each distinct setup once per seed; worlds and models are cached."""

    def __init__(self, rc: RunConfig, progress: Callable[[str], None] | None = None):
        self.rc = rc
        self.progress = progress
        self._worlds: dict[tuple, World] = {}
        self._models: dict[tuple, tuple[DetectorState, TrainLog]] = {}

    def world(self, seed: int, alignment_noise: float) -> World:
        key = (seed, alignment_noise)
        if key not in self._worlds:
            self._worlds[key] = build_world(self.rc, seed, alignment_noise)
        return self._worlds[key]

    def model(self, variant: Variant, seed: int) -> tuple[DetectorState, TrainLog]:
        key = variant.training_key(self.rc, seed)
        if key not in self._models:
            if self.progress:
                self.progress(f"training guidance={key[0]} distill={key[1]} alignment_noise={key[2]} seed={seed}")
            w = self.world(seed, variant.noise(self.rc))
            self._models[key] = train_world(self.rc, w, seed, guidance=variant.guidance, distill=variant.distill)
        return self._models[key]

    def run(self, variants: Sequence[Variant], seeds: Iterable[int]) -> list[HarnessRow]:
        rows = []
        for seed in seeds:
            for v in variants:
                state, _ = self.model(v, seed)
                w = self.world(seed, v.noise(self.rc))
                res, _ = evaluate_world(state, self.rc, w, v.filter_config(self.rc), v.postprocess, v.guidance, seed)
                rows.append(HarnessRow(v, seed, res))
        return rows


def ablation_harness(rc: RunConfig, variants: Sequence[Variant], seeds: Iterable[int] = (0,),
                     progress=None) -> list[HarnessRow]:
    return Harness(rc, progress).run(variants, list(seeds))


def mean_by_variant(rows: Sequence[HarnessRow], metric: str = "ap50_novel") -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for r in rows:
        groups.setdefault(r.variant.name, []).append(getattr(r.result, metric))
    return {k: math.fsum(v) / len(v) for k, v in groups.items()}


def write_harness_csv(rows: Sequence[HarnessRow], rc: RunConfig, path, per_seed: bool = False) -> None:
    """One row per variant (metrics averaged over seeds), or one per (variant, seed)."""
    if per_seed:
        table = [({**r.variant.descriptor(rc), "seed": r.seed}, r.result) for r in rows]
    else:
        order: list[Variant] = []
        for r in rows:
            if r.variant not in order:
                order.append(r.variant)
        table = []
        for v in order:
            mine = [r for r in rows if r.variant == v]
            means = {c: math.fsum(getattr(r.result, c) for r in mine) / len(mine) for c in RESULT_COLUMNS}
            desc = {**v.descriptor(rc), "seeds": " ".join(str(r.seed) for r in mine)}
            table.append((desc, EvalResult(**means)))
    keys = list(table[0][0]) if table else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + list(RESULT_COLUMNS))
        for desc, res in table:
            w.writerow([desc[k] for k in keys] + [repr(getattr(res, c)) for c in RESULT_COLUMNS])

