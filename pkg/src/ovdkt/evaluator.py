"""Inference with per-image priors and box AP split by category group."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .concepts import FilterConfig, pad_priors, select_priors
from .detector import DetectorState, assign_priors_to_queries, forward
from .embedding import BASE, NOVEL, CategorySpace
from .losses import iou_matrix, sigmoid, similarity_logits

SIMILARITY_ONLY = "similarity_only"
COMBINED = "combined"
POSTPROCESS_MODES = (SIMILARITY_ONLY, COMBINED)
AP50 = (0.5,)
COCO_IOUS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = 101


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Detection:
    scene_id: int
    bbox: tuple[float, float, float, float]
    category_id: int
    score: float

    def to_json(self) -> dict:
        return {"scene": self.scene_id, "bbox": list(self.bbox), "category": self.category_id, "score": self.score}

    @classmethod
    def from_json(cls, d) -> "Detection":
        return cls(int(d["scene"]), tuple(float(x) for x in d["bbox"]), int(d["category"]), float(d["score"]))


@dataclass(frozen=True)
class InferenceOptions:
    postprocess: str = SIMILARITY_ONLY
    guidance: bool = True
    score_floor: float = 0.05
    tau_cls: float = 0.07
    background_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.postprocess not in POSTPROCESS_MODES:
            raise ValueError(f"postprocess must be one of {POSTPROCESS_MODES}")


def infer(state: DetectorState, scene, bank, filter_config: FilterConfig, category_space: CategorySpace,
          options: InferenceOptions = InferenceOptions()) -> list[Detection]:
    """Detections for one scene.

    With guidance, priors come from the configured existence filter, padded to
    ``max_priors``; each query is labelled with the best-scoring prior category.
    Without guidance the queries carry no prior and every category competes.
    ``combined`` multiplies the score by the closed-vocabulary confidence, the
    best similarity probability over the training (base) categories.
    """
    if not state.is_finite():
        raise InferenceError("detector state has non-finite parameters")
    if options.guidance:
        report = select_priors(scene, bank, category_space, filter_config, options.background_noise, options.seed)
        priors = pad_priors(list(report.retained), filter_config.max_priors, category_space,
                            seed=(options.seed, scene.scene_id))
        t = assign_priors_to_queries(priors, bank, state.N)
        cand = np.asarray(sorted(set(priors)), dtype=int)
    else:
        t = np.zeros((state.N, bank.dimension))
        cand = np.arange(len(category_space))
    e, boxes, _ = forward(state, scene.context, t)
    if not np.all(np.isfinite(e)):
        raise InferenceError(f"non-finite embeddings on scene {scene.scene_id}")
    probs = sigmoid(similarity_logits(e, bank.vectors[cand], options.tau_cls))
    best = probs.argmax(axis=1)
    scores = probs[np.arange(len(best)), best]
    if options.postprocess == COMBINED:
        base = np.asarray(category_space.base_ids, dtype=int)
        closed = sigmoid(similarity_logits(e, bank.vectors[base], options.tau_cls)).max(axis=1)
        scores = scores * closed
    dets = []
    for j in range(len(best)):
        if scores[j] < options.score_floor:
            continue
        dets.append(Detection(scene.scene_id, tuple(float(x) for x in boxes[j]), int(cand[best[j]]), float(scores[j])))
    return dets


def infer_split(state, split, bank, filter_config, category_space, options=InferenceOptions()) -> list[Detection]:
    out = []
    for scene in split:
        out.extend(infer(state, scene, bank, filter_config, category_space, options))
    return out


# ---------------------------------------------------------------------------
# AP


@dataclass
class EvalResult:
    ap50_novel: float
    ap50_base: float
    ap50_all: float
    map_novel: float
    map_base: float
    map_all: float
    per_category: dict[int, dict[str, float]] = field(default_factory=dict)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_category")
        return d


def average_precision(scored: Sequence[tuple[float, int, int]], ious: dict, n_gt_by_scene: dict, n_gt: int,
                      iou_threshold: float) -> float:
    """AP of one category with greedy matching in ranking order.

    ``scored`` holds ``(score, scene_id, det_index)`` already in ranking order;
    ``ious[det_index]`` is that detection's IoU row against its scene's ground
    truth of the category; ``n_gt_by_scene`` gives the row length per scene.
    """
    if n_gt == 0:
        return float("nan")
    used = {s: np.zeros(n, dtype=bool) for s, n in n_gt_by_scene.items()}
    tp = np.zeros(len(scored), dtype=np.int64)
    for k, (_, sid, di) in enumerate(scored):
        if not n_gt_by_scene.get(sid):
            continue
        row = np.where(used[sid], -1.0, ious[di])
        j = int(np.argmax(row))
        if row[j] >= iou_threshold:
            used[sid][j] = True
            tp[k] = 1
    return _interpolated_ap(np.cumsum(tp), np.arange(1, len(scored) + 1), n_gt)


def _interpolated_ap(ctp: np.ndarray, ndet: np.ndarray, n_gt: int) -> float:
    if len(ctp) == 0:
        return 0.0
    precision = ctp / ndet
    # envelope: best precision at this or any later rank
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    vals = []
    for k in range(RECALL_POINTS):
        # recall >= k/100 compared in integers
        ok = np.nonzero(100 * ctp >= k * n_gt)[0]
        vals.append(float(envelope[ok[0]]) if len(ok) else 0.0)
    return math.fsum(vals) / RECALL_POINTS


def evaluate(detections: Iterable[Detection], eval_split, category_space: CategorySpace,
             iou_thresholds: Sequence[float] = COCO_IOUS) -> EvalResult:
    """AP50 and AP@[.5:.95] per category, averaged within base / novel / all."""
    detections = list(detections)
    scenes = {s.scene_id: s for s in eval_split}
    for d in detections:
        if d.scene_id not in scenes:
            raise KeyError(f"detection references unknown scene {d.scene_id}")
    thresholds = sorted(set(float(t) for t in iou_thresholds) | {0.5})
    per_cat: dict[int, dict[str, float]] = {}
    for c in range(len(category_space)):
        gts = {sid: [o.bbox for o in s.annotated if o.category_id == c] for sid, s in scenes.items()}
        n_gt_by_scene = {sid: len(g) for sid, g in gts.items()}
        n_gt = sum(n_gt_by_scene.values())
        if n_gt == 0:
            continue
        mine = [(i, d) for i, d in enumerate(detections) if d.category_id == c]
        mine.sort(key=lambda p: (-p[1].score, p[1].scene_id, p[0]))
        by_scene: dict[int, list[int]] = {}
        for k, (_, d) in enumerate(mine):
            by_scene.setdefault(d.scene_id, []).append(k)
        ious = {}
        for sid, ks in by_scene.items():
            if not gts[sid]:
                continue
            m = iou_matrix(np.array([mine[k][1].bbox for k in ks]), np.stack(gts[sid]))
            for row, k in zip(m, ks):
                ious[mine[k][0]] = row
        scored = [(d.score, d.scene_id, i) for i, d in mine]
        aps = {thr: average_precision(scored, ious, n_gt_by_scene, n_gt, thr) for thr in thresholds}
        coco = [aps[t] for t in thresholds if t in set(float(x) for x in iou_thresholds)]
        per_cat[c] = {"ap50": aps[0.5], "map": math.fsum(coco) / len(coco), "n_gt": n_gt}

    def group_mean(ids, key):
        vals = [per_cat[c][key] for c in ids if c in per_cat]
        return math.fsum(vals) / len(vals) if vals else 0.0

    novel = category_space.ids_in(NOVEL)
    base = category_space.ids_in(BASE)
    every = list(range(len(category_space)))
    return EvalResult(
        ap50_novel=group_mean(novel, "ap50"),
        ap50_base=group_mean(base, "ap50"),
        ap50_all=group_mean(every, "ap50"),
        map_novel=group_mean(novel, "map"),
        map_base=group_mean(base, "map"),
        map_all=group_mean(every, "map"),
        per_category=per_cat,
    )


# ---------------------------------------------------------------------------
# files


def save_detections(dets: Sequence[Detection], path) -> None:
    Path(path).write_text(json.dumps([d.to_json() for d in dets]))


def load_detections(path) -> list[Detection]:
    return [Detection.from_json(d) for d in json.loads(Path(path).read_text())]


RESULT_COLUMNS = ("ap50_novel", "ap50_base", "ap50_all", "map_novel", "map_base", "map_all")


def write_results_csv(rows: Sequence[tuple[dict, EvalResult]], path) -> None:
    """Each row is ``(descriptor dict, EvalResult)``; descriptor keys become leading columns."""
    keys: list[str] = []
    for desc, _ in rows:
        for k in desc:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + list(RESULT_COLUMNS))
        for desc, res in rows:
            w.writerow([desc.get(k, "") for k in keys] + [repr(getattr(res, c)) for c in RESULT_COLUMNS])
