"""Bipartite assignment and the DETR set loss, computed one query group at a time."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import diffcore as dc
from .geom import cxcywh_to_xyxy, cxcywh_to_xyxy_t, giou_t, pairwise_giou


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    @property
    def rows(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    @property
    def cols(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.int64)


def _sap_solve(cost: np.ndarray):
    """Shortest augmenting path assignment for ``n <= m``.

    Returns ``(col_of_row, u, v)`` where ``u``/``v`` are feasible duals:
    ``cost[i, j] - u[i] - v[j] >= 0`` with equality on assigned pairs and
    ``v[j] <= 0`` (zero on columns left unassigned).
    """
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)      # p[j]: 1-based row on column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    a = np.zeros((n + 1, m + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _solve_pairs(cost: np.ndarray):
    """Optimal pairs (any tie) plus duals, in the caller's orientation."""
    r, c = cost.shape
    if r <= c:
        col_of_row, u, v = _sap_solve(cost)
        pairs = [(i, int(col_of_row[i])) for i in range(r)]
        return pairs, u, v
    row_of_col, v, u = _sap_solve(cost.T)
    pairs = sorted((int(row_of_col[j]), j) for j in range(c))
    return pairs, u, v


def _seq_sum(cost: np.ndarray, pairs) -> float:
    total = 0.0
    for i, j in pairs:
        total += float(cost[i, j])
    return total


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of ``min(R, C)`` pairs.

    Among equal-cost optima the lexicographically smallest pair list (pairs
    sorted by row) is returned. ``total_cost`` sums matched entries in row order.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"hungarian: cost must be 2-D, got shape {cost.shape}")
    if cost.size == 0:
        return Assignment((), 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian: cost matrix must be finite")
    pairs, u, v = _solve_pairs(cost)
    best = _seq_sum(cost, pairs)
    scale = max(1.0, float(np.abs(cost).max()))
    tight = np.abs(cost - u[:, None] - v[None, :]) <= 1e-9 * scale
    pairs = _lex_smallest(cost, pairs, best, tight, 1e-12 * scale * len(pairs))
    return Assignment(tuple(pairs), _seq_sum(cost, pairs))


def _lex_smallest(cost, pairs, best, tight, tol):
    """Walk rows in order, taking the smallest column that still admits an optimum."""
    R, C = cost.shape
    k = len(pairs)
    current = dict(pairs)
    chosen: list[tuple[int, int]] = []
    used_cols: set[int] = set()
    prefix = 0.0
    r = 0
    while len(chosen) < k and r < R:
        need_after = k - len(chosen) - 1
        rows_after = [i for i in range(r + 1, R)]
        cur_col = current.get(r)
        limit = cur_col if cur_col is not None else C
        picked = None
        for c in range(limit):
            if c in used_cols or not tight[r, c]:
                continue
            cols_left = [j for j in range(C) if j not in used_cols and j != c]
            sub_pairs = []
            sub_cost = 0.0
            if need_after:
                if len(rows_after) < need_after:
                    continue
                sub = cost[np.ix_(rows_after, cols_left)]
                sp, _, _ = _solve_pairs(sub)
                sub_pairs = [(rows_after[a], cols_left[b]) for a, b in sp]
                sub_cost = _seq_sum(cost, sub_pairs)
            if prefix + float(cost[r, c]) + sub_cost <= best + tol:
                picked = c
                current = dict(chosen + [(r, c)] + sub_pairs)
                break
        if picked is None and cur_col is not None:
            picked = cur_col
        if picked is not None:
            chosen.append((r, picked))
            used_cols.add(picked)
            prefix += float(cost[r, picked])
        r += 1
    return chosen


# ---------------------------------------------------------------- set loss

@dataclass(frozen=True)
class LossCoefs:
    """Matching-cost and loss coefficients; ``no_object`` down-weights the empty class in CE."""
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    no_object: float = 0.1


class Target(NamedTuple):
    labels: np.ndarray   # (k,) global class ids
    boxes: np.ndarray    # (k, 4) normalized cxcywh


def empty_target() -> Target:
    return Target(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))


def local_labels(labels: np.ndarray, class_set: Sequence[int]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(class_set)}
    out = []
    for lab in np.asarray(labels, dtype=np.int64).tolist():
        if lab not in lookup:
            raise ValueError(f"target class {lab} is outside the group's class set {tuple(class_set)}")
        out.append(lookup[lab])
    return np.array(out, dtype=np.int64)


def matching_cost(logits: np.ndarray, boxes: np.ndarray, target: Target, class_set, coefs: LossCoefs) -> np.ndarray:
    """(N, k) cost: ``cls*(1 - p) + l1*|box - box|_1 + giou*(1 - GIoU)``."""
    z = logits - logits.max(axis=-1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=-1, keepdims=True)
    lab = local_labels(target.labels, class_set)
    tb = np.asarray(target.boxes, dtype=np.float64).reshape(-1, 4)
    c_cls = 1.0 - prob[:, lab]
    c_l1 = np.abs(boxes[:, None, :] - tb[None, :, :]).sum(-1)
    c_giou = 1.0 - pairwise_giou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(tb))
    return coefs.cls * c_cls + coefs.l1 * c_l1 + coefs.giou * c_giou


def match_predictions(preds, targets: Sequence[Target], coefs: LossCoefs = LossCoefs()) -> list[Assignment]:
    """Per-image optimal (prediction, target) assignment for one group."""
    logits, boxes = preds.class_logits.data, preds.boxes.data
    out = []
    for b, tgt in enumerate(targets):
        if len(tgt.labels) == 0:
            out.append(Assignment((), 0.0))
            continue
        out.append(hungarian(matching_cost(logits[b], boxes[b], tgt, preds.class_set, coefs)))
    return out


def group_set_loss(preds, targets: Sequence[Target], coefs: LossCoefs = LossCoefs(),
                   reduction: str = "mean", matches: Sequence[Assignment] | None = None) -> dc.Tensor:
    """DETR set loss of one query group against labels from its own class set.

    Per image: weighted cross-entropy over all queries (unmatched ones
    target the no-object column) plus L1 and ``1 - GIoU`` over matched
    pairs, normalized by the number of targets. ``reduction="none"``
    returns the ``(B,)`` per-image losses. ``matches`` overrides the
    Hungarian step, which is otherwise treated as a constant.
    """
    logits, boxes = preds.class_logits, preds.boxes
    B, N, K1 = logits.shape
    if len(targets) != B:
        raise ValueError(f"group_set_loss: {len(targets)} targets for a batch of {B}")
    if matches is None:
        matches = match_predictions(preds, targets, coefs)
    tgt_cls = np.full((B, N), K1 - 1, dtype=np.int64)
    weight = np.full((B, N), coefs.no_object)
    bi, qi, tboxes, seg = [], [], [], []
    for b, (tgt, asg) in enumerate(zip(targets, matches)):
        lab = local_labels(tgt.labels, preds.class_set)
        for q, t in asg.pairs:
            tgt_cls[b, q] = lab[t]
            weight[b, q] = 1.0
            bi.append(b)
            qi.append(q)
            tboxes.append(tgt.boxes[t])
            seg.append(b)
    weight /= weight.sum(axis=1, keepdims=True)

    logp = dc.log_softmax(logits)
    bb, nn = np.meshgrid(np.arange(B), np.arange(N), indexing="ij")
    nll = -logp[bb.ravel(), nn.ravel(), tgt_cls.ravel()]
    ce = (nll.reshape((B, N)) * weight).sum(axis=1)
    per_image = ce * coefs.cls

    if bi:
        pb = boxes[np.array(bi), np.array(qi)]
        tb = np.array(tboxes, dtype=np.float64)
        l1 = dc.abs_(pb - tb).sum(axis=1)
        g = giou_t(cxcywh_to_xyxy_t(pb), dc.Tensor(cxcywh_to_xyxy(tb)))
        pair = l1 * coefs.l1 + (1.0 - g) * coefs.giou
        counts = np.bincount(seg, minlength=B).astype(np.float64)
        S = np.zeros((B, len(seg)))
        S[np.array(seg), np.arange(len(seg))] = 1.0 / counts[np.array(seg)]
        per_image = per_image + (dc.Tensor(S) @ pair.reshape((len(seg), 1))).reshape((B,))

    if reduction == "none":
        return per_image
    if reduction == "mean":
        return per_image.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- phase weighting

def loss_weights(class_sets: Sequence[Sequence[int]]) -> np.ndarray:
    """``w_tau = |C_tau| / |C_1:t|``."""
    sizes = np.array([len(c) for c in class_sets], dtype=np.float64)
    if sizes.size == 0 or sizes.sum() == 0:
        raise ValueError("loss_weights: need at least one non-empty class set")
    return sizes / sizes.sum()


def total_loss(losses: Sequence[dc.Tensor], class_sets: Sequence[Sequence[int]]) -> dc.Tensor:
    if len(losses) != len(class_sets):
        raise ValueError(f"total_loss: {len(losses)} losses for {len(class_sets)} class sets")
    w = loss_weights(class_sets)
    out = losses[0] * float(w[0])
    for loss, wt in zip(losses[1:], w[1:]):
        out = out + loss * float(wt)
    return out
