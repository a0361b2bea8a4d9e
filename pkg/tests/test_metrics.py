import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from querymix.geometry import Box, iou
from querymix.metrics import (COCO_THRESHOLDS, ActivationCounts, activation_report, average_precision, bar_chart_svg,
                              gini, line_chart_svg, mean_average_precision, sorted_histogram, write_histogram_csv)
from querymix.toymodel import DetectorModel, TrainConfig, make_scenes, render_scene

counts = st.lists(st.integers(0, 50), min_size=2, max_size=30).filter(lambda c: sum(c) > 0)


def test_gini_examples():
    assert gini([3, 3, 3, 3]) == 0.0
    assert gini([0, 0, 0, 8]) == pytest.approx(0.75, abs=1e-15)
    assert gini([5]) == 0.0


@pytest.mark.parametrize("bad", [[], [0, 0, 0], [1, -1, 2]])
def test_gini_rejects_undefined_inputs(bad):
    with pytest.raises(ValueError):
        gini(bad)


@settings(max_examples=200, deadline=None)
@given(counts, st.randoms(use_true_random=False), st.floats(0.1, 10))
def test_gini_invariances(c, rnd, scale):
    g = gini(c)
    assert 0.0 <= g < 1.0
    shuffled = list(c)
    rnd.shuffle(shuffled)
    assert gini(shuffled) == pytest.approx(g, abs=1e-12)
    assert gini(np.array(c) * scale) == pytest.approx(g, abs=1e-12)
    if len(set(c)) > 1:
        assert gini(np.array(c) + 1) < g


def test_gini_of_a_single_winner_approaches_one():
    assert gini([0] * 99 + [1]) == pytest.approx(0.99)


# -- average precision ------------------------------------------------------------

A = [0.3, 0.3, 0.2, 0.2]
B = [0.7, 0.7, 0.2, 0.2]


def test_perfect_detections_score_one():
    dets = [(np.array([A, B]), np.array([1.0, 1.0]))]
    assert average_precision(dets, [np.array([A, B])], 0.5) == 1.0
    assert mean_average_precision([(np.array([A, B]), np.ones(2), np.array([0, 1]))],
                                  [(np.array([A, B]), np.array([0, 1]))]) == 1.0


def test_no_detections_score_zero():
    assert average_precision([(np.zeros((0, 4)), np.zeros(0))], [np.array([A])], 0.5) == 0.0


def test_three_detections_two_gts_hand_case():
    # ranks: TP on A, a false positive, TP on B -> precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
    far = [0.5, 0.9, 0.1, 0.1]
    dets = [(np.array([B, far, A]), np.array([0.9, 0.8, 0.7]))]
    assert average_precision(dets, [np.array([A, B])], 0.5) == pytest.approx(5 / 6, abs=1e-12)


def test_duplicate_detection_is_a_false_positive():
    dets = [(np.array([A, A]), np.array([0.9, 0.8]))]
    assert average_precision(dets, [np.array([A])], 0.5) == 1.0
    dets = [(np.array([A, A]), np.array([0.8, 0.9]))]  # same boxes, swapped scores
    assert average_precision(dets, [np.array([A, B])], 0.5) == pytest.approx(0.5)


def test_ap_rejects_bad_inputs():
    with pytest.raises(ValueError):
        average_precision([(np.array([A]), np.ones(1))], [np.array([A])], 1.0)
    with pytest.raises(ValueError):
        average_precision([(np.array([A]), np.ones(1))], [np.zeros((0, 4))], 0.5)
    with pytest.raises(ValueError):
        mean_average_precision([], [])


def _oracle_ap(dets, gts, thr):
    """Plain-loop AP: greedy matching, then the area under the precision envelope."""
    flat = [(s, scene, Box.from_array(b)) for scene, (bs, ss) in enumerate(dets) for b, s in zip(bs, ss)]
    flat.sort(key=lambda t: -t[0])  # stable: ties keep input order
    used = [[False] * len(g) for g in gts]
    n_gt = sum(len(g) for g in gts)
    hits, precision, recall = 0, [], []
    for rank, (_, scene, box) in enumerate(flat, 1):
        best, best_iou = None, -1.0
        for j, g in enumerate(gts[scene]):
            v = iou(box, Box.from_array(g))
            if not used[scene][j] and v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= thr:
            used[scene][best] = True
            hits += 1
        precision.append(hits / rank)
        recall.append(hits / n_gt)
    area, prev = 0.0, 0.0
    for i, r in enumerate(recall):
        area += (r - prev) * max(precision[i:])
        prev = r
    return area


def test_ap_matches_plain_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gts, dets = [], []
        for _ in range(int(rng.integers(1, 4))):
            n = int(rng.integers(1, 4))
            g = np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.1, 0.3, (n, 2))])
            gts.append(g)
            picks = g[rng.integers(0, n, size=int(rng.integers(0, 5)))]
            jitter = picks + rng.normal(0, 0.05, picks.shape)
            jitter[:, 2:] = np.abs(jitter[:, 2:]) + 0.01
            dets.append((jitter, rng.uniform(size=len(jitter))))
        for thr in (0.3, 0.5, 0.75):
            assert average_precision(dets, gts, thr) == pytest.approx(_oracle_ap(dets, gts, thr), abs=1e-12)


def test_ap_non_increasing_in_threshold():
    rng = np.random.default_rng(1)
    gts = [np.column_stack([rng.uniform(0.2, 0.8, (3, 2)), rng.uniform(0.1, 0.3, (3, 2))]) for _ in range(5)]
    dets = []
    for g in gts:
        boxes = g + rng.normal(0, 0.03, g.shape)
        dets.append((boxes, rng.uniform(size=3)))
    aps = [average_precision(dets, gts, t) for t in COCO_THRESHOLDS]
    assert all(a >= b for a, b in zip(aps, aps[1:]))


def test_map_averages_over_present_classes_only():
    dets = [(np.array([A, B]), np.ones(2), np.array([0, 5]))]  # class 5 has no ground truth
    gts = [(np.array([A]), np.array([0]))]
    assert mean_average_precision(dets, gts) == 1.0


# -- activation statistics ----------------------------------------------------------


def test_activation_counts_accumulate():
    acts = ActivationCounts.empty(4, 2)
    w = np.array([[0.5, 0.5], [1.0, 0.0], [0.2, 0.8], [0.0, 1.0]])
    acts.add_scene(np.array([1, 3]), w, np.array([1]))
    acts.add_scene(np.array([1]), w, np.array([2, 3]))
    assert acts.match_counts.tolist() == [0, 2, 0, 1]
    assert acts.total_matches == 3 == acts.match_counts.sum()
    assert acts.pattern_mass == pytest.approx([1.2, 1.8])
    assert acts.per_detection_mass == pytest.approx([1.0, 1.0, 1.0])


def test_report_on_single_object_scene_activates_one_query():
    cfg = TrainConfig(n_queries=6, n_patterns=3, d=8)
    scene = render_scene(3, cfg.d, n_objects=1)
    acts = activation_report(DetectorModel(cfg), [scene])
    assert acts.match_counts.sum() == 1 and acts.match_counts.max() == 1


def test_report_reconciles_with_ground_truth_count():
    cfg = TrainConfig(n_queries=8, n_patterns=3, d=8, val_scenes=6)
    scenes = make_scenes(cfg, "val")
    acts = activation_report(DetectorModel(cfg), scenes)
    assert acts.total_matches == sum(s.n_objects for s in scenes) == acts.match_counts.sum()
    assert all(m == pytest.approx(1.0) for m in acts.per_detection_mass)


def test_histogram_export_is_non_increasing(tmp_path):
    values = [3, 0, 7, 7, 1]
    assert sorted_histogram(values).tolist() == [7, 7, 3, 1, 0]
    path = write_histogram_csv(tmp_path / "h.csv", values)
    rows = list(csv.DictReader(path.open()))
    assert [int(r["count"]) for r in rows] == [7, 7, 3, 1, 0]
    assert [int(r["index"]) for r in rows] == [2, 3, 0, 4, 1]


def test_svg_charts_are_reproducible(tmp_path):
    a = bar_chart_svg(tmp_path / "a.svg", [3, 1, 2], title="t").read_bytes()
    b = bar_chart_svg(tmp_path / "b.svg", [3, 1, 2], title="t").read_bytes()
    assert a == b and a.lstrip().startswith(b"<?xml")
    line = line_chart_svg(tmp_path / "l.svg", {"x": [1, 2, 3]}).read_text()
    assert "<svg" in line
