"""Independent oracles and shared builders for the test suite."""
from __future__ import annotations

import itertools

import numpy as np

from dyqdetr import diffcore as dc
from dyqdetr.geom import cxcywh_to_xyxy
from dyqdetr.matchloss import Target, match_predictions
from dyqdetr.model import GroupPredictions


# ---------------------------------------------------------------- assignment

def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum over all injective row->column maps, summed in row order."""
    R, C = cost.shape
    best = np.inf
    if R <= C:
        for cols in itertools.permutations(range(C), R):
            s = 0.0
            for r, c in enumerate(cols):
                s += float(cost[r, c])
            best = min(best, s)
    else:
        for rows in itertools.permutations(range(R), C):
            pairs = sorted(zip(rows, range(C)))
            s = 0.0
            for r, c in pairs:
                s += float(cost[r, c])
            best = min(best, s)
    return best


# ---------------------------------------------------------------- gradients

def _weighted(f, shape_seed: int):
    """Scalarize a tensor-valued op with fixed random weights."""
    cache = {}

    def g(*args):
        out = f(*args)
        if out.data.size == 1:
            return out.reshape(())
        if "w" not in cache:
            cache["w"] = np.random.default_rng(shape_seed).uniform(-1, 1, size=out.shape)
        return (out * cache["w"]).sum()
    return g


def op_cases(seed: int = 0):
    """(name, scalar function of one tensor, input array) per differentiable argument of every op."""
    rng = np.random.default_rng(seed)
    U = lambda *s: rng.uniform(-2, 2, size=s)
    pos = lambda *s: rng.uniform(0.5, 2, size=s)
    mask = np.where(rng.random((3, 4)) < 0.3, -np.inf, 0.0)
    mask[0] = -np.inf                      # one fully blocked row
    mask[1, 0] = 0.0
    cases = []

    def add(name, f, *inputs):
        for k in range(len(inputs)):
            def one(x, k=k, inputs=inputs):
                args = [dc.Tensor(a) for a in inputs]
                args[k] = x
                return f(*args)
            cases.append((f"{name}[{k}]", _weighted(one, len(cases)), inputs[k].copy()))

    add("add", lambda a, b: a + b, U(3, 4), U(4))
    add("sub", lambda a, b: a - b, U(3, 4), U(3, 1))
    add("mul", lambda a, b: a * b, U(3, 4), U(3, 4))
    add("div", lambda a, b: a / b, U(3, 4), pos(3, 4))
    add("neg", lambda a: -a, U(3, 4))
    add("matmul", lambda a, b: a @ b, U(2, 3, 4), U(4, 5))
    add("matmul-batched", lambda a, b: a @ b, U(2, 3, 4), U(2, 4, 2))
    add("transpose", lambda a: dc.transpose(a, (2, 0, 1)), U(2, 3, 4))
    add("reshape", lambda a: a.reshape((4, 6)), U(2, 3, 4))
    add("getitem", lambda a: a[np.array([0, 2, 0]), 1:], U(3, 4))
    add("concat", lambda a, b: dc.concat([a, b], axis=1), U(2, 3), U(2, 2))
    add("relu", dc.relu, U(3, 4))
    add("sigmoid", dc.sigmoid, U(3, 4))
    add("exp", dc.exp, U(3, 4))
    add("log", dc.log, pos(3, 4))
    add("abs", dc.abs_, U(3, 4))
    add("maximum", dc.maximum, U(3, 4), U(3, 4))
    add("minimum", dc.minimum, U(3, 4), U(3, 4))
    add("masked_softmax", lambda a: dc.masked_softmax(a, mask), U(3, 4))
    add("masked_softmax-nomask", lambda a: dc.masked_softmax(a), U(2, 3, 4))
    add("log_softmax", dc.log_softmax, U(3, 5))
    add("layer_norm", lambda a, g, b: dc.layer_norm(a, g, b), U(3, 6), U(6), U(6))
    add("sum", lambda a: a.sum(axis=1), U(3, 4))
    add("mean", lambda a: a.mean(axis=0, keepdims=True), U(3, 4))
    return cases


def set_loss_case(seed: int = 0):
    """Scalar functions of the logits and of the raw box tensor for a fixed matching."""
    from dyqdetr.matchloss import group_set_loss
    rng = np.random.default_rng(seed)
    B, N, cs = 3, 5, (2, 5, 7)
    logits = rng.uniform(-2, 2, size=(B, N, len(cs) + 1))
    raw = rng.uniform(-2, 2, size=(B, N, 4))
    targets = []
    for b in range(B):
        k = b + 1
        c = rng.uniform(0.25, 0.75, size=(k, 2))
        wh = rng.uniform(0.1, 0.4, size=(k, 2))
        targets.append(Target(np.array([cs[i % 3] for i in range(k)]), np.concatenate([c, wh], axis=1)))
    targets[0] = Target(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
    base = GroupPredictions(1, cs, dc.Tensor(logits), dc.sigmoid(dc.Tensor(raw)))
    matches = match_predictions(base, targets)

    def of_logits(x):
        return group_set_loss(GroupPredictions(1, cs, x, dc.sigmoid(dc.Tensor(raw))), targets, matches=matches)

    def of_boxes(x):
        return group_set_loss(GroupPredictions(1, cs, dc.Tensor(logits), dc.sigmoid(x)), targets, matches=matches)
    return [("set_loss[logits]", of_logits, logits), ("set_loss[boxes]", of_boxes, raw)]


def grad_error(f, x: np.ndarray, step: float = 1e-6) -> float:
    return dc.finite_diff_check(f, dc.Tensor(x.copy()), step)


# ---------------------------------------------------------------- average precision

def brute_force_ap(dets, gts, thr: float) -> float | None:
    """101-point AP from first principles, one class.

    ``dets``: list of (image, score, box); ``gts``: dict image -> list of boxes.
    Matching walks detections by descending score (stable), each taking the
    unmatched ground truth of highest IoU that reaches ``thr``.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None

    def iou(a, b):
        iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        inter = iw * ih
        union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
        return inter / union if union > 0 else 0.0

    # per-image matching in score order, as the COCO evaluator does
    flags = []
    for img in sorted(set(gts) | {d[0] for d in dets}):
        mine = [d for d in dets if d[0] == img]
        mine = sorted(mine, key=lambda d: -d[1])[:100]
        taken = set()
        for _, score, box in mine:
            best, m = min(thr, 1 - 1e-10), None
            for g, gb in enumerate(gts.get(img, [])):
                if g in taken:
                    continue
                v = iou(box, gb)
                if v >= best:
                    best, m = v, g
            if m is not None:
                taken.add(m)
            flags.append((score, m is not None))
    # global ranking: stable by score over the per-image concatenation
    order = sorted(range(len(flags)), key=lambda i: -flags[i][0])
    tp = fp = 0
    prec, rec = [], []
    for i in order:
        if flags[i][1]:
            tp += 1
        else:
            fp += 1
        prec.append(tp / max(tp + fp, np.finfo(np.float64).eps))
        rec.append(tp / n_gt)
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    q = []
    for r in np.linspace(0.0, 1.0, 101):
        hit = [k for k in range(len(rec)) if rec[k] >= r]
        q.append(prec[hit[0]] if hit else 0.0)
    return float(np.mean(q))


def perfect_detections(scenes_gt):
    """Score-1 detections exactly on every ground-truth box."""
    from dyqdetr.evaluation import Detection
    return [Detection(img, c, 1.0, tuple(b)) for img, anns in scenes_gt.items() for c, b in anns]


def random_boxes(rng, n: int, canvas: float = 1.0) -> np.ndarray:
    c = rng.uniform(0.2, 0.8, size=(n, 2))
    wh = rng.uniform(0.05, 0.4, size=(n, 2))
    return cxcywh_to_xyxy(np.concatenate([c, wh], axis=1)) * canvas
