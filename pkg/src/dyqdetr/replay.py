"""Risk-scored exemplar selection and partial calibration."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import ImageCache, PhaseDataset, augment
from .increngine import NumericalError, PhaseLogger, PhasePlan, batches, check_finite, take
from .geom import xyxy_to_cxcywh
from .matchloss import LossCoefs, Target, group_set_loss, local_labels
from .model import DyQDETR
from .optim import AdamW

STORE_FORMAT = "dyqdetr-exemplars"
STORE_VERSION = 1


@dataclass(frozen=True)
class RiskRecord:
    image_id: int
    phase: int
    risk: float


def risk_score(model: DyQDETR, data: PhaseDataset, t: int, cache: ImageCache,
               coefs: LossCoefs = LossCoefs(), batch_size: int = 32) -> list[RiskRecord]:
    """Set loss of group ``t`` against each image's own labels; other classes count as background."""
    canvas = model.config.image_size
    out = []
    with dc.no_grad():
        for batch in batches(data.image_ids, batch_size, None):
            gp = model.forward_all(cache.batch(batch))[t - 1]
            losses = group_set_loss(gp, [data.target(i, canvas) for i in batch], coefs, reduction="none")
            out += [RiskRecord(int(i), t, float(v)) for i, v in zip(batch, losses.data)]
    return out


def middle_band(n: int, fraction: float) -> tuple[int, int]:
    """Rank interval ``[lo, hi)`` centred on the median, never wider than ``floor(fraction * n)``."""
    f = Fraction(repr(float(fraction)))
    half = Fraction(1, 2)
    lo = math.floor((half - f / 2) * n)
    hi = math.floor((half + f / 2) * n)
    return lo, lo + min(hi - lo, math.floor(f * n))


def select_exemplars(records: Sequence[RiskRecord], fraction: float) -> list[RiskRecord]:
    """Moderate-risk band: sort by (risk, image id) and keep the ranks around the median."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if not records:
        return []
    ranked = sorted(records, key=lambda r: (r.risk, r.image_id))
    lo, hi = middle_band(len(ranked), fraction)
    return ranked[lo:hi]


@dataclass(frozen=True)
class Exemplar:
    image_id: int
    phase: int
    risk: float
    annotations: tuple[tuple[int, tuple[float, float, float, float]], ...]

    def target(self, canvas: int) -> Target:
        if not self.annotations:
            return Target(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
        labels = np.array([a[0] for a in self.annotations], dtype=np.int64)
        boxes = xyxy_to_cxcywh(np.array([a[1] for a in self.annotations], dtype=np.float64) / canvas)
        return Target(labels, boxes)


@dataclass
class ExemplarStore:
    entries: list[Exemplar] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def add_phase(self, selected: Sequence[RiskRecord], data: PhaseDataset) -> None:
        for r in selected:
            anns = tuple((int(c), tuple(float(x) for x in b)) for c, b in data.annotations[r.image_id])
            self.entries.append(Exemplar(r.image_id, r.phase, r.risk, anns))

    def phases(self) -> list[int]:
        return sorted({e.phase for e in self.entries})

    def for_phase(self, t: int) -> list[Exemplar]:
        return [e for e in self.entries if e.phase == t]

    def save(self, path, dataset_manifest: str | None = None) -> None:
        doc = {"format": STORE_FORMAT, "version": STORE_VERSION, "dataset": dataset_manifest,
               "entries": [{"image_id": e.image_id, "phase": e.phase, "risk": e.risk,
                            "annotations": [{"class": c, "box": list(b)} for c, b in e.annotations]}
                           for e in self.entries]}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> ExemplarStore:
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != STORE_FORMAT or doc.get("version") != STORE_VERSION:
            raise ValueError(f"{path}: not a {STORE_FORMAT} v{STORE_VERSION} file")
        return cls([Exemplar(e["image_id"], e["phase"], e["risk"],
                             tuple((a["class"], tuple(a["box"])) for a in e["annotations"]))
                    for e in doc["entries"]])


def calibration_loss(model: DyQDETR, exemplars: Sequence[Exemplar], cache: ImageCache,
                     coefs: LossCoefs = LossCoefs(), rng: np.random.Generator | None = None) -> dc.Tensor:
    """Mean over exemplars of their own group's set loss; no other group is supervised.

    With ``rng`` the batch is augmented the same way as in phase training.
    """
    canvas = model.config.image_size
    images = cache.batch([e.image_id for e in exemplars])
    all_targets = [e.target(canvas) for e in exemplars]
    if rng is not None:
        images, all_targets = augment(images, all_targets, rng)
    preds = model.forward_all(images)
    check_finite(preds)
    total = None
    for k in sorted({e.phase for e in exemplars}):
        rows = np.array([i for i, e in enumerate(exemplars) if e.phase == k])
        gp = preds[k - 1]
        targets = [all_targets[i] for i in rows]
        for tg in targets:
            local_labels(tg.labels, gp.class_set)   # raises on foreign classes
        term = group_set_loss(take(gp, rows), targets, coefs) * (len(rows) / len(exemplars))
        total = term if total is None else total + term
    return total


def partial_calibration(model: DyQDETR, store: ExemplarStore, plan: PhasePlan, cache: ImageCache,
                        logger: PhaseLogger | None = None, tag: str = "calibration") -> DyQDETR:
    """Fine-tune every parameter on the exemplar store with phase-matched supervision."""
    if not len(store):
        return model
    model.unfreeze_all()
    opt = AdamW(model.trainable_parameters(), lr=plan.lr * plan.calibration_lr_scale,
                weight_decay=plan.weight_decay)
    order = list(range(len(store)))
    for epoch in range(plan.calibration_epochs):
        rng = dc.spawn_rng(plan.seed, "shuffle", tag, str(model.phase), str(epoch))
        aug_rng = dc.spawn_rng(plan.seed, "augment", tag, str(model.phase), str(epoch)) if plan.augment else None
        tot, n = 0.0, 0
        for chunk in batches(order, plan.batch_size, rng):
            exs = [store.entries[i] for i in chunk]
            loss = calibration_loss(model, exs, cache, plan.coefs, aug_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite calibration loss {value}")
            opt.zero_grad()
            dc.backward(loss)
            opt.step()
            tot += value * len(chunk)
            n += len(chunk)
        if logger is not None:
            logger.write(mode=tag, phase=model.phase, epoch=epoch, total_loss=tot / n)
    return model
