"""One-to-one bipartite matching between predictions and ground truths.

Costs are arranged with predictions on rows and ground truths on columns.
Among all minimum-cost matchings we return the one whose pair list, sorted by
(prediction, ground truth), is lexicographically smallest, so results are
reproducible regardless of solver internals.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import Box, giou_rows, l1_rows, pairwise_iou, pairwise_l1

MAX_BRUTE_FORCE_GT = 8
MAX_BRUTE_FORCE_INJECTIONS = 5_000_000


class LossWeights(NamedTuple):
    """Weights of the classification, L1 and GIoU terms."""

    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class CostMatrix:
    entries: np.ndarray
    cls: np.ndarray
    l1: np.ndarray
    giou: np.ndarray
    weights: LossWeights = field(default_factory=LossWeights)

    @classmethod
    def from_array(cls, entries) -> "CostMatrix":
        """Wrap a raw cost array; the breakdown puts everything in the cls slot."""
        entries = np.array(entries, dtype=np.float64, ndmin=2)
        zeros = np.zeros_like(entries)
        return cls(entries, entries.copy(), zeros, zeros.copy(), LossWeights(1.0, 0.0, 0.0))

    @property
    def n_pred(self) -> int:
        return self.entries.shape[0]

    @property
    def n_gt(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int], ...]

    def total(self, cost) -> float:
        c = _entries(cost)
        return float(sum(c[i, j] for i, j in self.pairs))

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.pairs], dtype=int)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([j for _, j in self.pairs], dtype=int)

    def gt_to_pred(self) -> dict[int, int]:
        return {j: i for i, j in self.pairs}


def _entries(cost) -> np.ndarray:
    c = cost.entries if isinstance(cost, CostMatrix) else np.array(cost, dtype=np.float64, ndmin=2)
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    return c


# ---------------------------------------------------------------------------
# Cost construction
# ---------------------------------------------------------------------------


def cost_from_arrays(pred_boxes, pred_probs, gt_boxes, gt_classes,
                     weights: LossWeights = LossWeights()) -> CostMatrix:
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    gt_classes = np.asarray(gt_classes, dtype=int)
    if len(pred_probs) == 0:
        raise ValueError("build_cost needs at least one prediction")
    if not np.allclose(pred_probs.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise ValueError("class-probability vectors must sum to 1 within 1e-6")
    if gt_classes.size and (gt_classes.min() < 0 or gt_classes.max() >= pred_probs.shape[1]):
        raise ValueError("ground-truth class id out of range")
    cls_cost = -pred_probs[:, gt_classes]
    l1 = pairwise_l1(pred_boxes, gt_boxes)
    _, g = pairwise_iou(pred_boxes, gt_boxes, with_giou=True)
    giou_cost = 1.0 - g
    w = LossWeights(*weights)
    entries = w.cls * cls_cost + w.l1 * l1 + w.giou * giou_cost
    return CostMatrix(entries, cls_cost, l1, giou_cost, w)


def build_cost(preds: Sequence[tuple[Box, Sequence[float]]], gts: Sequence[tuple[Box, int]],
               weights: LossWeights = LossWeights()) -> CostMatrix:
    """Matching cost: ``cls * (-p[c]) + l1 * L1 + giou * (1 - GIoU)`` per cell."""
    if not preds:
        raise ValueError("build_cost needs at least one prediction")
    boxes = np.array([b.as_array() for b, _ in preds])
    probs = np.array([np.asarray(p, dtype=np.float64) for _, p in preds])
    gt_boxes = np.array([b.as_array() for b, _ in gts]).reshape(-1, 4)
    classes = np.array([c for _, c in gts], dtype=int)
    return cost_from_arrays(boxes, probs, gt_boxes, classes, weights)


# ---------------------------------------------------------------------------
# Hungarian solver
# ---------------------------------------------------------------------------


def _solve_rows(cost: np.ndarray) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method for ``rows <= cols``.

    Returns (column of each row, total, row potentials, column potentials);
    potentials satisfy u[r] + v[c] <= cost[r, c] with equality on the matching.
    """
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[c] = 1-based row assigned to column c
    way = np.zeros(m + 1, dtype=int)
    for row in range(1, n + 1):
        owner[0] = row
        c0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[c0] = True
            r0 = owner[c0]
            reduced = cost[r0 - 1] - u[r0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = c0
            cand = np.where(free, minv[1:], inf)
            c1 = int(np.argmin(cand)) + 1
            delta = cand[c1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            c0 = c1
            if owner[c0] == 0:
                break
        while c0:
            c1 = way[c0]
            owner[c0] = owner[c1]
            c0 = c1
    col_of_row = np.zeros(n, dtype=int)
    for c in range(1, m + 1):
        if owner[c]:
            col_of_row[owner[c] - 1] = c - 1
    total = float(cost[np.arange(n), col_of_row].sum())
    return col_of_row, total, u[1:], v[1:]


def _optimum(c: np.ndarray) -> float:
    """Minimum total of an injection covering every column of ``c`` (preds x gts)."""
    if c.shape[1] == 0:
        return 0.0
    return _solve_rows(c.T)[1]


def hungarian(cost) -> Matching:
    """Minimum-cost injective assignment covering every ground truth."""
    c = _entries(cost)
    n_pred, n_gt = c.shape
    if n_pred < n_gt:
        raise ValueError(f"need at least as many predictions ({n_pred}) as ground truths ({n_gt})")
    if n_gt == 0:
        return Matching(())
    col_of_row, best, u, v = _solve_rows(c.T)
    fallback = tuple(sorted((int(col_of_row[j]), j) for j in range(n_gt)))

    # Optimal matchings use only tight edges; walk them greedily in lexicographic
    # order and keep a pair iff the rest can still complete an optimum.
    tol = 1e-9 * max(1.0, float(np.abs(c).max())) * n_gt
    tight = (c - u[None, :] - v[:, None]) <= tol
    chosen: list[tuple[int, int]] = []
    left = list(range(n_gt))
    acc = 0.0
    start = 0
    while left:
        pick = None
        for i in range(start, n_pred):
            for j in left:
                if not tight[i, j]:
                    continue
                rest = [g for g in left if g != j]
                later = np.arange(i + 1, n_pred)
                if len(later) < len(rest):
                    continue
                sub = _optimum(c[np.ix_(later, rest)]) if rest else 0.0
                if acc + c[i, j] + sub <= best + tol:
                    pick = (i, j)
                    break
            if pick:
                break
        if pick is None:
            return Matching(fallback)
        chosen.append(pick)
        acc += c[pick]
        left.remove(pick[1])
        start = pick[0] + 1
    return Matching(tuple(chosen))


# ---------------------------------------------------------------------------
# Exhaustive oracle
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _injections(n_pred: int, n_gt: int) -> np.ndarray:
    """Every injection gt -> pred, stored column-wise: entry ``[j, r]`` is gt j's prediction in injection r."""
    perms = np.array(list(itertools.permutations(range(n_pred), n_gt)), dtype=np.intp).reshape(-1, n_gt)
    return np.ascontiguousarray(perms.T)


def brute_force_match(cost) -> Matching:
    """Enumerate all injections; same optimum and tie-break as :func:`hungarian`."""
    c = _entries(cost)
    n_pred, n_gt = c.shape
    if n_gt > MAX_BRUTE_FORCE_GT:
        raise ValueError(f"brute force limited to {MAX_BRUTE_FORCE_GT} ground truths, got {n_gt}")
    if n_pred < n_gt:
        raise ValueError(f"need at least as many predictions ({n_pred}) as ground truths ({n_gt})")
    if math.perm(n_pred, n_gt) > MAX_BRUTE_FORCE_INJECTIONS:
        raise ValueError(f"{math.perm(n_pred, n_gt)} injections exceed the brute-force budget")
    if n_gt == 0:
        return Matching(())
    perms = _injections(n_pred, n_gt)
    totals = c[:, 0].take(perms[0])
    for j in range(1, n_gt):
        totals += c[:, j].take(perms[j])
    best = totals.min()
    tol = 1e-9 * max(1.0, float(np.abs(c).max())) * n_gt
    candidates = [tuple(sorted((int(p), j) for j, p in enumerate(perms[:, k])))
                  for k in np.flatnonzero(totals <= best + tol)]
    return Matching(min(candidates))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row ``-log softmax(logits)[target]``."""
    rows = np.arange(len(targets))
    return dc.logsumexp_rows(logits) - logits[rows, targets]


def one_to_one_terms(matching: Matching, logits: Tensor, boxes: Tensor, gt_boxes,
                     gt_classes) -> dict[str, Tensor]:
    """Unweighted sums: matched cross-entropy, L1, 1 - GIoU, background CE."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=int)
    n, n_cls = logits.shape
    background = n_cls - 1
    pi, gj = matching.pred_indices, matching.gt_indices
    unmatched = np.setdiff1d(np.arange(n), pi)
    zero = Tensor(0.0)
    terms = {"cls": zero, "l1": zero, "giou": zero, "background": zero}
    if len(pi):
        terms["cls"] = dc.sum_all(cross_entropy_rows(logits[pi], gt_classes[gj]))
        terms["l1"] = dc.sum_all(l1_rows(boxes[pi], gt_boxes[gj]))
        terms["giou"] = dc.sum_all(1.0 - giou_rows(boxes[pi], gt_boxes[gj]))
    if len(unmatched):
        terms["background"] = dc.sum_all(
            cross_entropy_rows(logits[unmatched], np.full(len(unmatched), background)))
    return terms


def one_to_one_loss(matching: Matching, logits: Tensor, boxes: Tensor, gt_boxes, gt_classes,
                    weights: LossWeights = LossWeights(), background_weight: float = 0.1) -> Tensor:
    """Set-prediction loss for a one-to-one matching.

    Matched pairs pay ``cls*CE + l1*L1 + giou*(1 - GIoU)``; unmatched
    predictions pay ``cls * background_weight * CE(background)``. The last
    logit column is the background class.
    """
    t = one_to_one_terms(matching, logits, boxes, gt_boxes, gt_classes)
    w = LossWeights(*weights)
    return (dc.scale(t["cls"], w.cls) + dc.scale(t["l1"], w.l1) + dc.scale(t["giou"], w.giou)
            + dc.scale(t["background"], w.cls * background_weight))
