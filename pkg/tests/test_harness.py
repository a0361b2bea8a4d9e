import json
import shutil

import pytest

from querymix import harness
from querymix.harness import PRESETS, ExperimentSpec, compare, expand_run_dirs, preset, run
from querymix.records import RunRecord
from querymix.toymodel import TrainConfig, train

TINY = TrainConfig(n_queries=6, n_patterns=3, d=8, max_objects=2, k=2, epochs=2, train_scenes=4, val_scenes=3)


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    records = run(preset("ablation", TINY, seeds=[0, 1]), root)
    return root / "ablation", records


# -- specs -------------------------------------------------------------------------------


def test_empty_axes_give_one_point():
    spec = ExperimentSpec("one", TINY)
    assert spec.size == 1 and [p.name for p in spec.points()] == ["seed=0"]


def test_point_count_is_product_of_axes_and_seeds():
    spec = ExperimentSpec("grid", TINY, {"beta": [0.0, 0.2], "k": [1, 2, 2]}, seeds=[0, 1, 2])
    points = spec.points()
    assert spec.size == len(points) == 18
    assert points[0].name == "beta=0.0__k=1__seed=0"
    assert points[0].config.beta == 0.0 and points[0].config.seed == 0


@pytest.mark.parametrize("axes,seeds", [({"nope": [1]}, None), ({"seed": [1, 2]}, None), ({"beta": []}, None),
                                        ({}, [1, 1])])
def test_spec_validation(axes, seeds):
    with pytest.raises(ValueError):
        ExperimentSpec("bad", TINY, axes, seeds)


def test_spec_round_trips_through_json(tmp_path):
    spec = ExperimentSpec("rt", TINY.replace(beta=0.3), {"k": [1, 2]}, [4, 5])
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert ExperimentSpec.load(path) == spec
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({**spec.to_dict(), "extra": 1})


def test_presets():
    assert preset("ablation").size == 20
    for name in PRESETS[1:]:
        spec = preset(name, TrainConfig(mode="static", assignment="one-to-one"))
        assert spec.size == 5
        assert spec.config.mode == "dynamic" and spec.config.assignment == "quality-aware"
    assert preset("gamma").axes == {"gamma": [0.0, 0.2, 0.4, 0.6, 0.8]}
    with pytest.raises(ValueError):
        preset("everything")


# -- execution --------------------------------------------------------------------------


def test_two_value_axis_and_three_seeds_give_six_directories(tmp_path):
    spec = ExperimentSpec("six", TINY.replace(epochs=1), {"beta": [0.0, 0.2]}, [0, 1, 2])
    records = run(spec, tmp_path)
    dirs = [d for d in (tmp_path / "six").iterdir() if d.is_dir()]
    assert len(dirs) == len(records) == 6
    assert all((d / "config.json").exists() and (d / "epochs.csv").exists() for d in dirs)
    assert json.loads((tmp_path / "six" / "experiment.json").read_text())["seeds"] == [0, 1, 2]


def test_resume_skips_finished_points(tmp_path):
    spec = ExperimentSpec("resume", TINY.replace(epochs=1), {"beta": [0.0, 0.2]})
    first = run(spec, tmp_path)
    csv_path = tmp_path / "resume" / "beta=0.0__seed=0" / "epochs.csv"
    stamp = csv_path.stat().st_mtime_ns
    shutil.rmtree(tmp_path / "resume" / "beta=0.2__seed=0")
    trained = []
    second = run(spec, tmp_path, resume=True, on_point=lambda p, r: trained.append(p.name))
    assert trained == ["beta=0.2__seed=0"]
    assert csv_path.stat().st_mtime_ns == stamp
    assert [r.rows for r in second.values()] == [r.rows for r in first.values()]


def test_failed_point_is_recorded(tmp_path, monkeypatch):
    def boom(config):
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(harness, "train", boom)
    records = run(ExperimentSpec("fail", TINY), tmp_path)
    rec = records["seed=0"]
    assert rec.status == "failed" and "synthetic failure" in rec.diagnostic
    assert RunRecord.load(tmp_path / "fail" / "seed=0").status == "failed"


def test_parallel_matches_sequential(tmp_path):
    spec = ExperimentSpec("par", TINY.replace(epochs=1), {"mode": ["static", "dynamic"]})
    seq = run(spec, tmp_path / "a")
    par = run(spec, tmp_path / "b", workers=2)
    assert list(seq) == list(par)
    for name in seq:
        assert seq[name].rows == par[name].rows
        assert (tmp_path / "a" / "par" / name / "epochs.csv").read_bytes() == \
            (tmp_path / "b" / "par" / name / "epochs.csv").read_bytes()


def test_run_directory_reproduces_from_its_config(ablation, tmp_path):
    root, _ = ablation
    run_dir = root / "mode=dynamic__assignment=quality-aware__seed=1"
    cfg = TrainConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    train(cfg).save(tmp_path / "again")
    assert (tmp_path / "again" / "epochs.csv").read_bytes() == (run_dir / "epochs.csv").read_bytes()


def test_record_summary_derives_from_rows(ablation):
    root, records = ablation
    for name, rec in records.items():
        loaded = RunRecord.load(root / name)
        assert loaded.rows == rec.rows
        summary = loaded.summary()
        assert summary["epochs_completed"] == len(rec.rows) == 2
        assert summary["final_map"] == rec.rows[-1]["map"]
        assert summary["best_map"] == max(r["map"] for r in rec.rows)


# -- comparison -------------------------------------------------------------------------


def test_ablation_table_has_four_rows(ablation, tmp_path):
    root, records = ablation
    report = compare([root], baseline_dir=root / "mode=static__assignment=one-to-one__seed=0")
    assert len(report.rows) == 4
    assert [(r.dynamic, r.quality_aware) for r in report.rows][0] == (False, False)
    base = report.rows[0]
    assert base.delta_map == 0.0 and base.delta_gini == 0.0 and base.n_runs == 2
    maps = [records[f"mode=static__assignment=one-to-one__seed={s}"].rows[-1]["map"] for s in (0, 1)]
    assert base.map_mean == pytest.approx(sum(maps) / 2, abs=1e-15)
    full = report.row("assignment=quality-aware, mode=dynamic")
    assert full.seeds == [0, 1]
    paths = report.write(tmp_path)
    assert [p.name for p in paths] == ["comparison.csv", "comparison_map.svg", "comparison_gini.svg"]
    assert len((tmp_path / "comparison.csv").read_text().splitlines()) == 5


def test_comparing_a_run_to_itself_gives_zero_deltas(ablation, tmp_path):
    root, _ = ablation
    src = root / "mode=static__assignment=one-to-one__seed=0"
    shutil.copytree(src, tmp_path / "copy")
    report = compare([src, tmp_path / "copy"])
    assert len(report.rows) == 1
    assert report.rows[0].delta_map == 0.0 and report.rows[0].delta_gini == 0.0


def test_mean_over_identical_seeds_equals_single_value(ablation, tmp_path):
    root, records = ablation
    src = root / "mode=dynamic__assignment=one-to-one__seed=0"
    for seed in (7, 8, 9):
        dst = shutil.copytree(src, tmp_path / f"s{seed}")
        cfg = json.loads((dst / "config.json").read_text())
        (dst / "config.json").write_text(json.dumps({**cfg, "seed": seed}))
    row = compare([tmp_path]).rows[0]
    assert row.n_runs == 3 and row.seeds == [7, 8, 9]
    single = records["mode=dynamic__assignment=one-to-one__seed=0"].rows[-1]
    assert row.map_mean == pytest.approx(single["map"], abs=1e-15)
    assert row.gini_mean == pytest.approx(single["gini"], abs=1e-15)
    assert row.map_std == pytest.approx(0.0, abs=1e-15)


def test_compare_rejections(ablation, tmp_path):
    root, _ = ablation
    src = root / "mode=static__assignment=one-to-one__seed=0"
    with pytest.raises(ValueError, match="two"):
        compare([src])
    odd = shutil.copytree(src, tmp_path / "odd")
    lines = (odd / "epochs.csv").read_text().splitlines()
    (odd / "epochs.csv").write_text("\n".join(l.rsplit(",", 2)[0] for l in lines) + "\n")  # drop map, gini
    with pytest.raises(ValueError, match="metric columns"):
        compare([src, odd])
    with pytest.raises(ValueError):
        expand_run_dirs([tmp_path / "missing"])
