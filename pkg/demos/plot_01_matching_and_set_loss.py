"""
Bipartite matching and the set loss
===================================

A detector that emits a fixed-size set of predictions needs a one-to-one
assignment between predictions and ground-truth objects before any loss can
be computed. This walk-through builds the matching cost by hand, solves it,
and evaluates the resulting set loss together with its gradient.
"""

import numpy as np

from dyqdetr import diffcore as dc
from dyqdetr.geom import cxcywh_to_xyxy, pairwise_giou, pairwise_iou
from dyqdetr.matchloss import LossCoefs, Target, group_set_loss, hungarian, matching_cost
from dyqdetr.model import GroupPredictions

# %%
# Overlap measures
# ----------------
# Boxes are stored as normalized (cx, cy, w, h). IoU saturates at zero for
# disjoint boxes, while generalized IoU keeps decreasing with distance, which
# is what makes it usable as a regression loss.
pred = np.array([[0.30, 0.30, 0.20, 0.20], [0.70, 0.70, 0.20, 0.20], [0.50, 0.50, 0.60, 0.60]])
truth = np.array([[0.32, 0.30, 0.20, 0.22], [0.72, 0.68, 0.18, 0.20]])
print("IoU\n", np.round(pairwise_iou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(truth)), 3))
print("GIoU\n", np.round(pairwise_giou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(truth)), 3))

# %%
# The assignment problem
# ----------------------
# ``hungarian`` returns the optimum; ties are broken towards the
# lexicographically smallest pairing, so results never depend on float noise.
cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
a = hungarian(cost)
print("pairs", a.pairs, "total", a.total_cost)
print("all-zero matrix ->", hungarian(np.zeros((3, 3))).pairs)

# %%
# Matching cost of a query group
# ------------------------------
# One group predicts three queries over classes (5, 9); the last logit column
# is "no object". The cost mixes class probability, L1 box distance and GIoU.
logits = np.array([[2.0, -1.0, 0.0], [-1.0, 1.5, 0.0], [-2.0, -2.0, 3.0]])
target = Target(np.array([5, 9]), truth)
coefs = LossCoefs()
C = matching_cost(logits, pred, target, (5, 9), coefs)
print("cost matrix (queries x objects)\n", np.round(C, 3))
print("matched", hungarian(C).pairs)

# %%
# Set loss and its gradient
# -------------------------
# The loss is differentiable with respect to logits and boxes once the
# matching is fixed. The third query is pushed towards "no object" with a
# down-weighted term.
x = dc.Tensor(logits[None], requires_grad=True)
gp = GroupPredictions(1, (5, 9), x, dc.Tensor(pred[None]))
loss = group_set_loss(gp, [target], coefs)
grads = dc.backward(loss)
print("loss", float(loss.data))
print("d loss / d logits\n", np.round(grads[x][0], 4))
