"""Query-utilization inequality, activation statistics and average precision."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import pairwise_iou

COCO_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))

# pattern-mass accounting only counts confident, well-localized detections
ACTIVATION_CONFIDENCE = 0.5
ACTIVATION_IOU = 0.7


def gini(counts) -> float:
    """Gini coefficient of non-negative values (0 = perfectly equal)."""
    x = np.sort(np.asarray(counts, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("gini of an empty sequence is undefined")
    if np.any(x < 0):
        raise ValueError("gini is only defined for non-negative values")
    total = x.sum()
    if total <= 0:
        raise ValueError("gini is undefined when every value is zero")
    n = x.size
    ranks = 2.0 * np.arange(1, n + 1) - n - 1
    return float(np.dot(ranks, x) / (n * total))


def _match_detections(detections, gts, iou_threshold: float) -> tuple[np.ndarray, int]:
    """Greedy score-ordered matching; returns TP flags in ranked order and #gt."""
    gt_arrays = [np.asarray(g, dtype=np.float64).reshape(-1, 4) for g in gts]
    n_gt = sum(len(g) for g in gt_arrays)
    if n_gt == 0:
        raise ValueError("average precision needs at least one ground truth")
    scores, scene_ids, ious = [], [], []
    for scene, (boxes, s) in enumerate(detections):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        s = np.asarray(s, dtype=np.float64).ravel()
        scores.append(s)
        scene_ids.append(np.full(len(s), scene))
        g = gt_arrays[scene]
        ious.extend(pairwise_iou(boxes, g) if len(g) and len(boxes) else np.zeros((len(boxes), 0)))
    if not scores or sum(len(s) for s in scores) == 0:
        return np.zeros(0, dtype=bool), n_gt
    scores = np.concatenate(scores)
    scene_ids = np.concatenate(scene_ids)
    # descending score; ties keep scene/detection order
    ranked = np.argsort(-scores, kind="stable")
    taken = [np.zeros(len(g), dtype=bool) for g in gt_arrays]
    tp = np.zeros(len(ranked), dtype=bool)
    for r, k in enumerate(ranked):
        row = ious[k]
        if row.size == 0:
            continue
        used = taken[scene_ids[k]]
        cand = np.where(used, -1.0, row)
        best = int(np.argmax(cand))
        if cand[best] >= iou_threshold:
            used[best] = True
            tp[r] = True
    return tp, n_gt


def precision_recall(detections, gts, iou_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    tp, n_gt = _match_detections(detections, gts, iou_threshold)
    tps = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    return tps / np.maximum(ranks, 1), tps / n_gt


def average_precision(detections: Sequence[tuple], gts: Sequence, iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP for one class.

    Args:
        detections: per scene, ``(boxes k x 4, scores k)``.
        gts: per scene, ground-truth boxes ``g x 4``.
        iou_threshold: minimum IoU for a true positive, in (0, 1).
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1), got {iou_threshold}")
    precision, recall = precision_recall(detections, gts, iou_threshold)
    if precision.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_average_precision(detections: Sequence[tuple], gts: Sequence[tuple],
                           thresholds: Sequence[float] = COCO_THRESHOLDS) -> float:
    """AP averaged over classes with ground truth and over IoU thresholds.

    Args:
        detections: per scene, ``(boxes, scores, classes)``.
        gts: per scene, ``(boxes, classes)``.
    """
    gt_classes = [np.asarray(c, dtype=int).ravel() for _, c in gts]
    present = sorted(set(np.concatenate(gt_classes).tolist())) if gt_classes else []
    if not present:
        raise ValueError("mean average precision needs at least one ground truth")
    aps = []
    for cls in present:
        det_c = []
        for boxes, scores, classes in detections:
            keep = np.asarray(classes, dtype=int).ravel() == cls
            det_c.append((np.asarray(boxes).reshape(-1, 4)[keep], np.asarray(scores).ravel()[keep]))
        gt_c = [np.asarray(b).reshape(-1, 4)[c == cls] for (b, _), c in zip(gts, gt_classes)]
        aps.extend(average_precision(det_c, gt_c, t) for t in thresholds)
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# Activation statistics
# ---------------------------------------------------------------------------


@dataclass
class ActivationCounts:
    match_counts: np.ndarray                     # per query, final-layer match events
    pattern_mass: np.ndarray                     # per pattern, summed mixing weight
    total_matches: int = 0
    confident_detections: int = 0
    per_detection_mass: list[float] = field(default_factory=list)

    @classmethod
    def empty(cls, n_queries: int, n_patterns: int) -> "ActivationCounts":
        return cls(np.zeros(n_queries, dtype=int), np.zeros(n_patterns))

    def add_scene(self, matched_queries: np.ndarray, weights: np.ndarray | None,
                  confident: np.ndarray) -> None:
        """Record one scene's matched queries and confident-detection weight rows."""
        matched_queries = np.asarray(matched_queries, dtype=int)
        np.add.at(self.match_counts, matched_queries, 1)
        self.total_matches += len(matched_queries)
        confident = np.asarray(confident, dtype=int)
        self.confident_detections += len(confident)
        if weights is not None and len(confident):
            rows = weights[confident]
            self.pattern_mass += rows.sum(axis=0)
            self.per_detection_mass.extend(rows.sum(axis=1).tolist())

    @property
    def gini(self) -> float:
        return gini(self.match_counts)


def sorted_histogram(counts) -> np.ndarray:
    """Counts sorted in non-increasing order."""
    return np.sort(np.asarray(counts).ravel())[::-1]


def write_histogram_csv(path: str | Path, counts, label: str = "count") -> Path:
    path = Path(path)
    order = np.argsort(-np.asarray(counts), kind="stable")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "index", label])
        for rank, idx in enumerate(order):
            w.writerow([rank, int(idx), counts[idx]])
    return path


def activation_report(model, scenes, weights=None) -> ActivationCounts:
    """Final-layer match counts and pattern mass of ``model`` over ``scenes``."""
    from .toymodel import evaluate  # local import: toymodel depends on this module

    return evaluate(model, scenes, weights).activations


# ---------------------------------------------------------------------------
# SVG charts
# ---------------------------------------------------------------------------


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "querymix"
    return plt


def bar_chart_svg(path: str | Path, values, title: str = "", xlabel: str = "", ylabel: str = "") -> Path:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(np.arange(len(values)), values, color="#4c72b0")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def line_chart_svg(path: str | Path, series: dict[str, Sequence[float]], title: str = "",
                   xlabel: str = "epoch", ylabel: str = "") -> Path:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, ys in series.items():
        ax.plot(np.arange(1, len(ys) + 1), ys, label=name)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if series:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
