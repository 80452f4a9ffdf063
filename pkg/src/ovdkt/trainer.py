"""Two-phase training: guidance-only first, then with region distillation switched on."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .concepts import FilterConfig, pad_priors, select_priors, training_priors
from .detector import DetectorState, assign_priors_to_queries, backward, forward, init_state
from .distill import build_pairs, contrastive_loss, l1_distill
from .embedding import CategorySpace, DomainError, TeacherSpace, _rng, region_embedding
from .losses import (
    FOCAL_ALPHA,
    FOCAL_GAMMA,
    LossWeights,
    bbox_loss_batch,
    focal_loss_batch,
    iou_matrix,
    sigmoid,
    similarity_logits,
    similarity_logits_backward,
)
from .matcher import hungarian, match_cost
from .scenes import GroundTruthObject, SyntheticScene

log = logging.getLogger(__name__)

DISTILL_MODES = ("contrastive", "l1", "none")
LOG_COLUMNS = ("epoch", "step", "loss_total", "loss_bbox", "loss_cls", "loss_contrast", "grad_norm_pre_clip")


class TrainingError(FloatingPointError):
    def __init__(self, message, scene_id=None):
        super().__init__(message)
        self.scene_id = scene_id


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 30
    phase1_epochs: int = 10
    base_lr: float = 1e-3
    lr_decay_factor: float = 0.1
    decay_epoch: int = 11
    clip_max_norm: float = 0.1
    batch_size: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    tau_cls: float = 0.07
    tau_contrast: float = 0.07
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    focal_alpha: float = FOCAL_ALPHA
    focal_gamma: float = FOCAL_GAMMA
    num_queries: int = 16
    query_dim: int = 32
    hidden_dim: int = 64
    max_priors: int = 4
    guidance: bool = True
    distill: str = "contrastive"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.phase1_epochs <= self.total_epochs:
            raise ValueError("phase1_epochs must lie in [0, total_epochs]")
        if self.clip_max_norm <= 0:
            raise ValueError("clip_max_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.distill not in DISTILL_MODES:
            raise ValueError(f"distill must be one of {DISTILL_MODES}")
        if self.max_priors > self.num_queries:
            raise ValueError("max_priors cannot exceed num_queries")
        if self.tau_cls <= 0 or self.tau_contrast <= 0:
            raise ValueError("temperatures must be positive")

    def phase(self, epoch: int) -> int:
        """Phase of 1-based ``epoch``."""
        return 1 if epoch <= self.phase1_epochs else 2

    def lr(self, epoch: int) -> float:
        return self.base_lr * (self.lr_decay_factor if epoch >= self.decay_epoch else 1.0)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        for k in LOG_COLUMNS[2:]:
            if not math.isfinite(row[k]):
                raise TrainingError(f"non-finite {k} at step {row['step']}")
        self.records.append({k: row[k] for k in LOG_COLUMNS})

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def epoch_means(self, name="loss_total") -> np.ndarray:
        ep = self.column("epoch")
        vals = self.column(name)
        return np.array([vals[ep == e].mean() for e in np.unique(ep)])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


@dataclass
class LossBreakdown:
    total: float
    bbox: float
    cls: float
    contrast: float


def total_loss(e, boxes, scene: SyntheticScene, match, bank, class_ids: Sequence[int],
               weights: LossWeights, tau_cls: float, tau_contrast: float, phase: int,
               distill: str = "contrastive", alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Weighted box + focal + distillation loss for one scene, normalised by its GT count.

    ``class_ids`` is the classification vocabulary (the training categories).
    Returns ``(LossBreakdown, dL/de, dL/dboxes)``.
    """
    N = e.shape[0]
    M = len(scene.annotated)
    norm = float(max(M, 1))
    de = np.zeros_like(e)
    dboxes = np.zeros_like(boxes)
    class_ids = np.asarray(class_ids, dtype=int)
    col_of = {int(c): k for k, c in enumerate(class_ids)}

    gt_idx = match.gt_indices if M else np.zeros(0, dtype=int)
    q_idx = match.query_indices if M else np.zeros(0, dtype=int)

    # box term over matched pairs
    l_bbox = 0.0
    if M:
        per, g = bbox_loss_batch(boxes[q_idx], scene.boxes[gt_idx], weights)
        l_bbox = float(per.sum()) / norm
        dboxes[q_idx] = g / norm

    # focal on similarity probabilities; unmatched queries are no-object
    logits, cache = similarity_logits(e, bank.vectors[class_ids], tau_cls, with_grad=True)
    probs = sigmoid(logits)
    targets = np.zeros_like(probs)
    labels = scene.labels
    for i, j in zip(gt_idx, q_idx):
        c = int(labels[i])
        if c in col_of:
            targets[j, col_of[c]] = 1.0
    per_q, dprobs = focal_loss_batch(probs, targets, alpha, gamma)
    l_cls_raw = float(per_q.sum()) / norm
    dlogits = dprobs * probs * (1.0 - probs) * (weights.lambda_cls / norm)
    de += similarity_logits_backward(dlogits, cache)
    l_cls = weights.lambda_cls * l_cls_raw

    l_con = 0.0
    if phase == 2 and distill != "none" and M:
        r = scene.teacher_features[gt_idx]
        if distill == "contrastive":
            # gt order 0..M-1 is already the Hungarian row order
            pairs = build_pairs(match, M, N)
            raw, g = contrastive_loss(scene.teacher_features, e, pairs, tau_contrast)
            de += g * (weights.lambda_contrast / norm)
        else:
            raw, g = l1_distill(r, e[q_idx])
            de[q_idx] += g * (weights.lambda_contrast / norm)
        l_con = weights.lambda_contrast * raw / norm

    total = l_bbox + l_cls + l_con
    for name, v in (("bbox", l_bbox), ("cls", l_cls), ("contrast", l_con)):
        if not math.isfinite(v):
            raise TrainingError(f"non-finite {name} loss", scene.scene_id)
    return LossBreakdown(total, l_bbox, l_cls, l_con), de, dboxes


def clip_gradients(grads: dict, max_norm: float):
    """Global-norm clipping; returns ``(clipped, norm_before)``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return grads, norm


class AdamW:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p)


def scene_priors(scene, config: TrainConfig, bank, category_space, pool, seed_parts) -> np.ndarray:
    """Query prior rows for training: annotated categories padded from ``pool``."""
    if not config.guidance:
        return np.zeros((config.num_queries, bank.dimension))
    pri = pad_priors(training_priors(scene), config.max_priors, category_space, seed=seed_parts, pool=pool)
    # random slot order, so a query's slot says nothing about whether its prior is real
    pri = [pri[i] for i in _rng(tuple(seed_parts) + (7,)).permutation(len(pri))]
    return assign_priors_to_queries(pri, bank, config.num_queries)


def train(train_split: Sequence[SyntheticScene], teacher_cache, bank, config: TrainConfig,
          category_space: CategorySpace, state: DetectorState | None = None, progress=None):
    """Train a detector; returns ``(state, TrainLog)``.

    ``teacher_cache`` maps ``(scene_id, object_index)`` to the cached teacher
    feature and is what the distillation terms read.
    """
    if not train_split:
        raise ValueError("train split is empty")
    N = config.num_queries
    for s in train_split:
        if len(s.annotated) > N:
            raise ValueError(f"scene {s.scene_id} has more objects than queries")
    D = bank.dimension
    if state is None:
        state = init_state(N, D, config.query_dim, config.hidden_dim, seed=config.seed)
    base_ids = category_space.base_ids
    opt = AdamW(state.params, config.beta1, config.beta2, config.eps, config.weight_decay)
    tlog = TrainLog()
    scenes = [_with_cached_features(s, teacher_cache) for s in train_split]
    step = 0
    for epoch in range(1, config.total_epochs + 1):
        phase = config.phase(epoch)
        lr = config.lr(epoch)
        order = _rng((config.seed, epoch, 11)).permutation(len(scenes))
        for b0 in range(0, len(order), config.batch_size):
            batch = [scenes[i] for i in order[b0:b0 + config.batch_size]]
            grads = {k: np.zeros_like(v) for k, v in state.params.items()}
            sums = np.zeros(4)
            for scene in batch:
                t = scene_priors(scene, config, bank, category_space, base_ids,
                                 (config.seed, epoch, scene.scene_id))
                parts, g = scene_step(state, scene, t, bank, base_ids, config, phase)
                for k in grads:
                    grads[k] += g[k]
                sums += (parts.total, parts.bbox, parts.cls, parts.contrast)
            B = len(batch)
            for k in grads:
                grads[k] /= B
            grads, gnorm = clip_gradients(grads, config.clip_max_norm)
            opt.step(state.params, grads, lr)
            state.bump()
            step += 1
            means = sums / B
            tlog.append(epoch=epoch, step=step, loss_total=float(means[0]), loss_bbox=float(means[1]),
                        loss_cls=float(means[2]), loss_contrast=float(means[3]), grad_norm_pre_clip=gnorm)
        if progress is not None:
            progress(epoch, float(tlog.epoch_means()[-1]))
        if not state.is_finite():
            raise TrainingError(f"parameters became non-finite in epoch {epoch}")
    return state, tlog


def scene_step(state, scene, t, bank, class_ids, config: TrainConfig, phase: int):
    """Forward, match, loss and backward for one scene."""
    try:
        e, boxes, trace = forward(state, scene.context, t)
    except FloatingPointError as exc:
        raise TrainingError(f"scene {scene.scene_id}: {exc}", scene.scene_id) from exc
    M = len(scene.annotated)
    match = None
    try:
        if M:
            C = match_cost(e, boxes, scene.labels, scene.boxes, bank, config.tau_cls, config.weights)
            match = hungarian(C)
        parts, de, dboxes = total_loss(e, boxes, scene, match, bank, class_ids, config.weights,
                                       config.tau_cls, config.tau_contrast, phase, config.distill,
                                       config.focal_alpha, config.focal_gamma)
    except (DomainError, FloatingPointError) as exc:
        raise TrainingError(f"scene {scene.scene_id}: {exc}", scene.scene_id) from exc
    return parts, backward(state, trace, de, dboxes)


def _with_cached_features(scene: SyntheticScene, cache) -> SyntheticScene:
    if cache is None:
        return scene
    objs = []
    for i, o in enumerate(scene.annotated):
        r = cache.get((scene.scene_id, i), o.teacher_feature)
        objs.append(GroundTruthObject(o.bbox, o.category_id, np.asarray(r)))
    return scene.with_annotations(objs)


def pseudo_label_round(state: DetectorState, train_split: Sequence[SyntheticScene], confidence_threshold: float,
                       bank, config: TrainConfig, teacher: TeacherSpace, category_space: CategorySpace,
                       filter_config: FilterConfig | None = None, background_noise: float = 0.5):
    """Add confident self-predictions (any category) as extra annotations.

    Priors come from the inference-time filter over the full vocabulary. A
    prediction becomes a new annotation when its best similarity probability
    reaches the threshold and it overlaps every existing annotation with IoU
    below 0.5. Returns a new split; the input is not modified.
    """
    if not 0 < confidence_threshold < 1:
        raise ValueError("confidence_threshold must be in (0, 1)")
    fc = filter_config or FilterConfig(max_priors=config.max_priors)
    out = []
    for scene in train_split:
        report = select_priors(scene, bank, category_space, fc, background_noise, seed=config.seed)
        pri = pad_priors(list(report.retained), fc.max_priors, category_space, seed=(config.seed, scene.scene_id))
        t = assign_priors_to_queries(pri, bank, state.N) if config.guidance else np.zeros((state.N, bank.dimension))
        e, boxes, _ = forward(state, scene.context, t)
        cand = np.asarray(sorted(set(pri)), dtype=int)
        probs = sigmoid(similarity_logits(e, bank.vectors[cand], config.tau_cls))
        best = probs.argmax(axis=1)
        conf = probs[np.arange(len(best)), best]
        preds = [(float(conf[j]), j, int(cand[best[j]])) for j in range(len(best))]
        out.append(add_pseudo_labels(scene, [(c, boxes[j], k) for c, j, k in preds],
                                     confidence_threshold, teacher))
    return tuple(out)


def add_pseudo_labels(scene: SyntheticScene, predictions, confidence_threshold: float,
                      teacher: TeacherSpace) -> SyntheticScene:
    """``predictions``: iterable of ``(confidence, box, category_id)``."""
    kept = list(scene.annotated)
    for conf, box, cat in sorted(predictions, key=lambda p: -p[0]):
        if conf < confidence_threshold:
            continue
        box = np.asarray(box, dtype=np.float64)
        if kept and iou_matrix(box, np.stack([o.bbox for o in kept])).max() >= 0.5:
            continue
        r = region_embedding(teacher, int(cat), seed=(scene.scene_id, len(kept), 7))
        kept.append(GroundTruthObject(box, int(cat), r))
    return scene.with_annotations(kept)


def training_config_for(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
