"""COCO-style box AP over merged per-group detections."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .geom import cxcywh_to_xyxy, pairwise_iou

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


class Detection(NamedTuple):
    image_id: int
    class_id: int
    score: float
    box: tuple[float, float, float, float]   # pixels, x0 y0 x1 y1


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    per_class: dict[int, float]
    per_class_ap50: dict[int, float]
    ap_old: float | None = None
    ap_new: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        d["per_class_ap50"] = {str(k): v for k, v in self.per_class_ap50.items()}
        return d


def predictions_to_detections(image_ids: Sequence[int], group_preds, canvas: int) -> list[Detection]:
    """One detection per query: best non-background class and its probability.

    ``group_preds`` is the list returned by ``forward_all`` for the batch.
    At most ``MAX_DETS`` highest-scoring detections are kept per image.
    """
    per_image: list[list[Detection]] = [[] for _ in image_ids]
    for gp in group_preds:
        prob = gp.probabilities()[..., :-1]
        boxes = cxcywh_to_xyxy(gp.boxes.data) * canvas
        best = prob.argmax(axis=-1)
        score = np.take_along_axis(prob, best[..., None], axis=-1)[..., 0]
        for b, img in enumerate(image_ids):
            for q in range(prob.shape[1]):
                per_image[b].append(Detection(int(img), int(gp.class_set[best[b, q]]), float(score[b, q]),
                                              tuple(float(x) for x in boxes[b, q])))
    out = []
    for dets in per_image:
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        out += [dets[i] for i in order[:MAX_DETS]]
    return out


def _match_image(dt_boxes: np.ndarray, gt_boxes: np.ndarray, thr: float) -> np.ndarray:
    """Greedy COCO matching for score-sorted detections; returns matched flags."""
    matched = np.zeros(len(dt_boxes), dtype=bool)
    if len(dt_boxes) == 0 or len(gt_boxes) == 0:
        return matched
    ious = pairwise_iou(dt_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(len(dt_boxes)):
        best, m = min(thr, 1 - 1e-10), -1
        for g in range(len(gt_boxes)):
            if taken[g] or ious[d, g] < best:
                continue
            best, m = ious[d, g], g
        if m >= 0:
            taken[m] = True
            matched[d] = True
    return matched


def class_ap(dets: Sequence[Detection], gts: Mapping[int, np.ndarray], thr: float) -> float | None:
    """101-point interpolated AP of one class at one IoU threshold; ``None`` without ground truth."""
    n_gt = sum(len(g) for g in gts.values())
    if n_gt == 0:
        return None
    by_img: dict[int, list[Detection]] = {}
    for d in dets:
        by_img.setdefault(d.image_id, []).append(d)
    scores, flags = [], []
    for img in sorted(set(by_img) | set(gts)):
        ds = by_img.get(img, [])
        order = np.argsort([-d.score for d in ds], kind="mergesort")[:MAX_DETS]
        ds = [ds[i] for i in order]
        g = gts.get(img, np.zeros((0, 4)))
        flags.append(_match_image(np.array([d.box for d in ds]).reshape(-1, 4), g, thr))
        scores.append(np.array([d.score for d in ds]))
    scores = np.concatenate(scores) if scores else np.zeros(0)
    flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(flags[order]).astype(np.float64)
    fp = np.cumsum(~flags[order]).astype(np.float64)
    rc = tp / n_gt
    pr = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    pr = np.maximum.accumulate(pr[::-1])[::-1] if len(pr) else pr
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    valid = idx < len(pr)
    q[valid] = pr[idx[valid]]
    return float(np.mean(q))


def evaluate(detections: Iterable[Detection], ground_truth: Mapping[int, Sequence[tuple[int, Sequence[float]]]],
             class_ids: Sequence[int], old_classes: Sequence[int] | None = None,
             new_classes: Sequence[int] | None = None) -> EvalReport:
    """AP / AP50 / AP75 over ``class_ids`` against complete annotations.

    ``ground_truth`` maps image id to ``(class, pixel xyxy box)`` pairs.
    Classes without ground truth are left out of every mean.
    """
    known = set(int(c) for c in class_ids)
    dets_by_class: dict[int, list[Detection]] = {c: [] for c in known}
    for d in detections:
        if d.class_id not in known:
            raise ValueError(f"detection class {d.class_id} outside known classes {sorted(known)}")
        dets_by_class[d.class_id].append(d)
    gts_by_class: dict[int, dict[int, np.ndarray]] = {c: {} for c in known}
    for img, anns in ground_truth.items():
        for c in known:
            boxes = [b for k, b in anns if k == c]
            if boxes:
                gts_by_class[c][img] = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    for img, anns in ground_truth.items():
        for k, _ in anns:
            if k not in known:
                raise ValueError(f"ground-truth class {k} outside known classes")

    table: dict[int, list[float]] = {}
    for c in sorted(known):
        vals = [class_ap(dets_by_class[c], gts_by_class[c], t) for t in IOU_THRESHOLDS]
        if vals[0] is not None:
            table[c] = vals
    if not table:
        return EvalReport(0.0, 0.0, 0.0, {}, {})
    per_class = {c: float(np.mean(v)) for c, v in table.items()}
    per50 = {c: v[0] for c, v in table.items()}
    arr = np.array(list(table.values()))
    rep = EvalReport(float(arr.mean()), float(arr[:, 0].mean()), float(arr[:, 5].mean()), per_class, per50)
    rep.ap_old = _subset_mean(per_class, old_classes)
    rep.ap_new = _subset_mean(per_class, new_classes)
    return rep


def _subset_mean(per_class: Mapping[int, float], subset) -> float | None:
    if subset is None:
        return None
    vals = [per_class[c] for c in subset if c in per_class]
    return float(np.mean(vals)) if vals else None


def subset_ap(report: EvalReport, classes: Sequence[int]) -> float | None:
    return _subset_mean(report.per_class, classes)


# ---------------------------------------------------------------- dumps and tables

def write_detections(path, detections: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for d in detections:
            fh.write(json.dumps({"image_id": d.image_id, "class": d.class_id, "score": d.score,
                                 "box": list(d.box)}) + "\n")


def read_detections(path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.append(Detection(int(r["image_id"]), int(r["class"]), float(r["score"]), tuple(r["box"])))
    return out


REPORT_COLUMNS = ("method", "step", "classes_seen", "AP", "AP50", "AP75", "AP_old", "AP_new")


def forgetting_report(rows: Sequence[Mapping]) -> list[dict]:
    """Flatten per-step evaluations into table rows (one per method and step).

    Each input row needs ``method``, ``step``, ``classes_seen`` and
    ``report`` (an :class:`EvalReport`); per-phase class-set APs go in
    ``class_sets`` when given.
    """
    table = []
    for r in rows:
        rep: EvalReport = r["report"]
        row = {"method": r["method"], "step": int(r["step"]), "classes_seen": int(r["classes_seen"]),
               "AP": rep.ap, "AP50": rep.ap50, "AP75": rep.ap75, "AP_old": rep.ap_old, "AP_new": rep.ap_new}
        for t, cs in enumerate(r.get("class_sets", ()), start=1):
            row[f"AP_C{t}"] = subset_ap(rep, cs)
        table.append(row)
    return table


def write_table_csv(path, table: Sequence[Mapping]) -> None:
    cols = list(REPORT_COLUMNS)
    for row in table:
        cols += [k for k in row if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: _fmt(row.get(k)) for k in cols})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return v
