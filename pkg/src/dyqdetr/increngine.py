"""Phase-by-phase training: query expansion, pseudo labels, decoupled losses."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import NumericalError
from .data import ImageCache, PhaseDataset, augment
from .geom import cxcywh_to_xyxy, pairwise_iou
from .matchloss import LossCoefs, Target, group_set_loss, total_loss
from .model import DyQDETR, GroupPredictions
from .optim import AdamW

log = logging.getLogger(__name__)


@dataclass
class PhasePlan:
    class_sets: list[tuple[int, ...]]
    protocol: str = "revised"
    epochs: int = 30
    first_epochs: int | None = None         # phase 1 only; None means ``epochs``
    calibration_epochs: int = 10
    score_threshold: float = 0.4
    iou_threshold: float = 0.7
    exemplar_fraction: float = 0.1
    seed: int = 0
    batch_size: int = 16
    lr: float = 1e-3
    calibration_lr_scale: float = 0.1
    weight_decay: float = 1e-4
    strict_freeze: bool = False
    augment: bool = True
    coefs: LossCoefs = field(default_factory=LossCoefs)

    def __post_init__(self):
        self.class_sets = [tuple(int(c) for c in cs) for cs in self.class_sets]
        flat = [c for cs in self.class_sets for c in cs]
        if len(flat) != len(set(flat)):
            raise ValueError("class splits overlap")
        if any(not cs for cs in self.class_sets):
            raise ValueError("empty class split")
        if self.protocol not in ("revised", "traditional"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if not 0 < self.score_threshold < 1 or not 0 < self.iou_threshold < 1:
            raise ValueError("thresholds must lie in (0, 1)")
        if not 0 <= self.exemplar_fraction <= 1:
            raise ValueError("exemplar fraction must lie in [0, 1]")

    @property
    def n_phases(self) -> int:
        return len(self.class_sets)

    def epochs_for(self, t: int) -> int:
        return self.first_epochs if t == 1 and self.first_epochs is not None else self.epochs


# ---------------------------------------------------------------- pseudo labels

@dataclass
class PseudoLabelSet:
    """Old-group pseudo labels for one image: ``targets[tau]`` and matching ``scores[tau]``."""
    targets: dict[int, Target]
    scores: dict[int, np.ndarray]

    def __len__(self):
        return sum(len(t.labels) for t in self.targets.values())


def filter_predictions(prob: np.ndarray, boxes: np.ndarray, class_set: Sequence[int], new_boxes: np.ndarray,
                       score_threshold: float, iou_threshold: float) -> tuple[Target, np.ndarray]:
    """Keep confident predictions of one group that do not sit on a new-class object.

    ``prob`` is ``(N, |C|+1)``, ``boxes`` and ``new_boxes`` normalized cxcywh.
    A prediction survives when its best non-background probability is at
    least ``score_threshold`` and its IoU with every new-class box is below
    ``iou_threshold``; its label is that best class.
    """
    fg = prob[:, :-1]
    best = fg.argmax(axis=1)
    score = fg[np.arange(len(fg)), best]
    keep = score >= score_threshold
    if len(new_boxes) and keep.any():
        ious = pairwise_iou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(new_boxes))
        keep &= ~(ious >= iou_threshold).any(axis=1)
    labels = np.array([class_set[k] for k in best[keep]], dtype=np.int64)
    return Target(labels, boxes[keep].copy()), score[keep]


def generate_pseudo_labels(old_model: DyQDETR | None, images: np.ndarray, new_targets: Sequence[Target],
                           score_threshold: float = 0.4, iou_threshold: float = 0.7) -> list[PseudoLabelSet]:
    """Pseudo labels for every group of ``old_model`` on a batch of images."""
    if old_model is None:
        raise ValueError("pseudo labels need the previous phase's model")
    with dc.no_grad():
        preds = old_model.forward_all(images)
    out = []
    for b, tgt in enumerate(new_targets):
        targets, scores = {}, {}
        for gp in preds:
            t, s = filter_predictions(gp.probabilities()[b], gp.boxes.data[b], gp.class_set,
                                      np.asarray(tgt.boxes).reshape(-1, 4), score_threshold, iou_threshold)
            targets[gp.index], scores[gp.index] = t, s
        out.append(PseudoLabelSet(targets, scores))
    return out


# ---------------------------------------------------------------- steps

def take(gp: GroupPredictions, rows: np.ndarray) -> GroupPredictions:
    return GroupPredictions(gp.index, gp.class_set, gp.class_logits[rows], gp.boxes[rows])


def check_finite(preds: Sequence[GroupPredictions]) -> None:
    for gp in preds:
        if not (np.isfinite(gp.class_logits.data).all() and np.isfinite(gp.boxes.data).all()):
            raise NumericalError(f"non-finite outputs from query group {gp.index}")


def compute_group_losses(model: DyQDETR, images: np.ndarray, targets: Sequence[Sequence[Target] | None],
                         coefs: LossCoefs) -> tuple[list[GroupPredictions], list[dc.Tensor | None]]:
    """Forward once; one set loss per group (``None`` where that group has no supervision)."""
    preds = model.forward_all(images)
    check_finite(preds)
    losses = [group_set_loss(gp, tg, coefs) if tg is not None else None for gp, tg in zip(preds, targets)]
    return preds, losses


def train_step(model: DyQDETR, optimizer: AdamW, images: np.ndarray,
               targets: Sequence[Sequence[Target]], coefs: LossCoefs = LossCoefs()) -> tuple[float, list[float]]:
    """One optimizer step on the weighted sum of per-group set losses.

    ``targets[i]`` holds one :class:`Target` per image for group ``i + 1``.
    Returns the total loss and the per-group losses.
    """
    _, losses = compute_group_losses(model, images, targets, coefs)
    total = total_loss(losses, model.bank.class_sets)
    value = total.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} (groups: {[l.item() for l in losses]})")
    optimizer.zero_grad()
    dc.backward(total)
    optimizer.step()
    return value, [l.item() for l in losses]


class PhaseLogger:
    """Line-delimited JSON records, one per epoch (phase, epoch, group losses, total)."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []

    def write(self, **record) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def batches(ids: Sequence[int], batch_size: int, rng: np.random.Generator | None):
    order = list(ids) if rng is None else [ids[i] for i in rng.permutation(len(ids))]
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def fit(model: DyQDETR, ids: Sequence[int], gt_for: Callable[[int], Target],
        group_targets: Callable[[np.ndarray, list[Target]], list[list[Target]]],
        cache: ImageCache, params, epochs: int, lr: float, plan: PhasePlan, tag: str,
        logger: PhaseLogger | None = None, phase: int = 0) -> None:
    """Minibatch loop shared by every training mode.

    ``gt_for`` gives an image's real labels; ``group_targets`` turns the
    (possibly augmented) batch and its labels into one target list per group.
    """
    opt = AdamW(params, lr=lr, weight_decay=plan.weight_decay)
    for epoch in range(epochs):
        rng = dc.spawn_rng(plan.seed, "shuffle", tag, str(epoch))
        aug_rng = dc.spawn_rng(plan.seed, "augment", tag, str(epoch))
        tot, per, n = 0.0, None, 0
        for batch in batches(list(ids), plan.batch_size, rng):
            images = cache.batch(batch)
            gts = [gt_for(i) for i in batch]
            if plan.augment:
                images, gts = augment(images, gts, aug_rng)
            try:
                value, groups = train_step(model, opt, images, group_targets(images, gts), plan.coefs)
            except NumericalError as exc:
                raise NumericalError(f"{tag}, epoch {epoch}: {exc}") from exc
            k = len(batch)
            tot += value * k
            per = [p * k for p in groups] if per is None else [a + p * k for a, p in zip(per, groups)]
            n += k
        if logger is not None and n:
            logger.write(mode=tag, phase=phase, epoch=epoch, total_loss=tot / n, group_losses=[p / n for p in per])


def run_incremental_step(model: DyQDETR, data: PhaseDataset, plan: PhasePlan, t: int, cache: ImageCache,
                         logger: PhaseLogger | None = None) -> DyQDETR:
    """Train phase ``t``: add and train a new query group, old groups learn from pseudo labels."""
    if len(model.bank) != t - 1:
        raise ValueError(f"phase {t} needs a model with {t - 1} groups, got {len(model.bank)}")
    canvas = model.config.image_size
    old = model.copy() if t > 1 else None
    model.expand_queries(plan.class_sets[t - 1])
    model.phase = t

    def group_targets(images, gts):
        if old is None:
            return [gts]
        pseudo = generate_pseudo_labels(old, images, gts, plan.score_threshold, plan.iou_threshold)
        per_group = [[ps.targets[g.index] for ps in pseudo] for g in model.bank.groups[:-1]]
        return per_group + [gts]

    params = model.trainable_parameters(strict=plan.strict_freeze)
    fit(model, data.image_ids, lambda i: data.target(i, canvas), group_targets, cache, params,
        plan.epochs_for(t), plan.lr, plan, f"dyq-phase{t}", logger, t)
    return model


def run_finetune_step(model: DyQDETR, data: PhaseDataset, plan: PhasePlan, t: int, cache: ImageCache,
                      logger: PhaseLogger | None = None) -> DyQDETR:
    """Naive fine-tuning baseline: one query group whose head grows, trained on current labels only."""
    canvas = model.config.image_size
    if t == 1:
        model.expand_queries(plan.class_sets[0])
    else:
        model.extend_group_classes(1, plan.class_sets[t - 1])
    model.unfreeze_all()
    model.phase = t

    fit(model, data.image_ids, lambda i: data.target(i, canvas), lambda images, gts: [gts], cache,
        model.trainable_parameters(), plan.epochs_for(t), plan.lr, plan, f"finetune-phase{t}", logger, t)
    return model


def train_joint(model: DyQDETR, data: PhaseDataset, plan: PhasePlan, cache: ImageCache, epochs: int,
                logger: PhaseLogger | None = None, tag: str = "joint") -> DyQDETR:
    """Upper bound: a single group trained on complete annotations of ``data.class_set``."""
    canvas = model.config.image_size
    if not len(model.bank):
        model.expand_queries(data.class_set)
    elif set(model.bank.all_classes) != set(data.class_set):
        missing = [c for c in data.class_set if c not in model.bank.all_classes]
        model.extend_group_classes(1, missing)
    model.unfreeze_all()

    fit(model, data.image_ids, lambda i: data.target(i, canvas), lambda images, gts: [gts], cache,
        model.trainable_parameters(), epochs, plan.lr, plan, tag, logger)
    return model
