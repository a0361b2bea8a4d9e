"""Quality-aware one-to-many label assignment.

Each prediction/ground-truth pair gets a quality score
``iou - gamma * confidence``; each ground truth then receives an adaptive
number of positives, ``max(ceil(sum of its top-k scores), l)``, taken as the
highest-scoring predictions in its column.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import Box, giou_rows, iou_rows, l1_rows, pairwise_iou
from .matching import LossWeights

# ceil() slack so sums like 0.1 + 0.2 + 0.7 do not round up past an integer
_CEIL_SLACK = 1e-9


@dataclass
class QualityScoreTable:
    scores: np.ndarray  # n_pred x n_gt
    gamma: float

    @property
    def n_pred(self) -> int:
        return self.scores.shape[0]

    @property
    def n_gt(self) -> int:
        return self.scores.shape[1]


@dataclass
class AssignmentResult:
    counts: list[int]                 # k_j per ground truth
    positives: list[np.ndarray]       # prediction indices, descending score
    scores: list[np.ndarray]          # matching scores

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (prediction, ground truth) index arrays over all positives."""
        if not self.positives:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        pi = np.concatenate(self.positives).astype(int)
        gj = np.concatenate([np.full(len(p), j) for j, p in enumerate(self.positives)]).astype(int)
        return pi, gj


def quality_table(pred_boxes, confidences, gt_boxes, gamma: float) -> QualityScoreTable:
    confidences = np.asarray(confidences, dtype=np.float64)
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if np.any(confidences < 0) or np.any(confidences > 1):
        raise ValueError("confidences must lie in [0, 1]")
    ious = pairwise_iou(pred_boxes, gt_boxes)
    return QualityScoreTable(ious - gamma * confidences[:, None], float(gamma))


def quality_score(preds: Sequence[tuple[Box, float]], gts: Sequence[Box], gamma: float) -> QualityScoreTable:
    boxes = np.array([b.as_array() for b, _ in preds]).reshape(-1, 4)
    conf = np.array([c for _, c in preds], dtype=np.float64)
    gt = np.array([g.as_array() for g in gts]).reshape(-1, 4)
    return quality_table(boxes, conf, gt, gamma)


def adaptive_k(table: QualityScoreTable | np.ndarray, k: int, l: int) -> list[int]:
    """Positive count per ground truth: ``max(ceil(top-k score sum), l)``.

    Uses ``min(k, n_pred)`` candidates when fewer than ``k`` predictions exist.
    """
    s = table.scores if isinstance(table, QualityScoreTable) else np.asarray(table, dtype=np.float64)
    if k < 1 or l < 1:
        raise ValueError(f"k and l must be positive, got k={k}, l={l}")
    n_pred = s.shape[0]
    top = min(k, n_pred)
    out = []
    for j in range(s.shape[1]):
        col = np.sort(s[:, j])[::-1][:top]
        kj = max(math.ceil(col.sum() - _CEIL_SLACK), l)
        out.append(min(kj, n_pred))
    return out


def _ranked(column: np.ndarray) -> np.ndarray:
    # stable sort on the negated scores keeps lower indices first on ties
    return np.argsort(-column, kind="stable")


def select_positives(table: QualityScoreTable | np.ndarray, counts: Sequence[int]) -> AssignmentResult:
    s = table.scores if isinstance(table, QualityScoreTable) else np.asarray(table, dtype=np.float64)
    if len(counts) != s.shape[1]:
        raise ValueError("need one positive count per ground truth")
    positives, scores = [], []
    for j, kj in enumerate(counts):
        if kj > s.shape[0]:
            raise ValueError(f"k_j={kj} exceeds the number of predictions {s.shape[0]}")
        idx = _ranked(s[:, j])[:kj]
        positives.append(idx)
        scores.append(s[idx, j])
    return AssignmentResult(list(counts), positives, scores)


def assign(pred_boxes, confidences, gt_boxes, gamma: float, k: int, l: int,
           adaptive: bool = True) -> AssignmentResult:
    """Score table, positive counts and selection in one call.

    With ``adaptive=False`` every ground truth gets exactly ``min(k, n_pred)``.
    """
    table = quality_table(pred_boxes, confidences, gt_boxes, gamma)
    if adaptive:
        counts = adaptive_k(table, k, l)
    else:
        counts = [min(k, table.n_pred)] * table.n_gt
    return select_positives(table, counts)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def varifocal_terms(logits: Tensor, pos_pred: np.ndarray, pos_cls: np.ndarray, quality,
                    neg_pred: np.ndarray, alpha: float = 0.75, focal_gamma: float = 2.0) -> tuple[Tensor, Tensor]:
    """IoU-aware classification loss on softmax scores.

    Positives: ``-q * (q log p + (1 - q) log(1 - p))`` with p the probability
    of the target class and q its IoU target (array or Tensor). Negatives:
    ``-alpha * p^focal_gamma * log(1 - p)`` with p the foreground mass
    ``1 - p(background)``. Returns the two sums.
    """
    n_cls = logits.shape[1]
    pos, neg = Tensor(0.0), Tensor(0.0)
    if len(pos_pred):
        rows = logits[pos_pred]
        lse = dc.logsumexp_rows(rows)
        r = np.arange(len(pos_pred))
        log_p = rows[r, pos_cls] - lse
        others = np.ones((len(pos_pred), n_cls), dtype=bool)
        others[r, pos_cls] = False
        log_1mp = dc.logsumexp_rows(rows, mask=others) - lse
        q = quality if isinstance(quality, Tensor) else Tensor(np.asarray(quality, dtype=np.float64))
        pos = dc.sum_all(-(q * q) * log_p - (q * (1.0 - q)) * log_1mp)
    if len(neg_pred):
        rows = logits[neg_pred]
        log_bg = rows[:, n_cls - 1] - dc.logsumexp_rows(rows)
        fg = 1.0 - dc.exp(log_bg)
        neg = dc.scale(dc.sum_all(dc.power(dc.relu(fg), focal_gamma) * log_bg), -alpha)
    return pos, neg


def one_to_many_terms(assignment: AssignmentResult, logits: Tensor, boxes: Tensor, gt_boxes, gt_classes,
                      alpha: float = 0.75, focal_gamma: float = 2.0) -> dict[str, Tensor]:
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=int)
    pi, gj = assignment.pairs()
    negatives = np.setdiff1d(np.arange(logits.shape[0]), pi)
    # the IoU target keeps its gradient so the loss stays one differentiable function of the boxes
    q = iou_rows(boxes[pi], gt_boxes[gj]) if len(pi) else np.zeros(0)
    pos, neg = varifocal_terms(logits, pi, gt_classes[gj], q, negatives, alpha, focal_gamma)
    zero = Tensor(0.0)
    terms = {"cls_pos": pos, "cls_neg": neg, "l1": zero, "giou": zero}
    if len(pi):
        terms["l1"] = dc.sum_all(l1_rows(boxes[pi], gt_boxes[gj]))
        terms["giou"] = dc.sum_all(1.0 - giou_rows(boxes[pi], gt_boxes[gj]))
    return terms


def one_to_many_loss(assignment: AssignmentResult, logits: Tensor, boxes: Tensor, gt_boxes, gt_classes,
                     weights: LossWeights = LossWeights(), alpha: float = 0.75,
                     focal_gamma: float = 2.0) -> Tensor:
    """Sum over every (positive, ground truth) pair plus the negative term.

    A prediction that is positive for several ground truths contributes one
    term per pair.
    """
    t = one_to_many_terms(assignment, logits, boxes, gt_boxes, gt_classes, alpha, focal_gamma)
    w = LossWeights(*weights)
    return (dc.scale(t["cls_pos"] + t["cls_neg"], w.cls) + dc.scale(t["l1"], w.l1)
            + dc.scale(t["giou"], w.giou))
