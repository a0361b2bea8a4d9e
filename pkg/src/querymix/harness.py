"""Experiment specs, sweep execution and cross-run comparison.

Every sweep point is trained in its own run directory (``config.json``,
``epochs.csv``, ``summary.json``), so a finished directory is enough to
reproduce or compare a run later.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .metrics import bar_chart_svg
from .records import RunRecord
from .toymodel import TrainConfig, train

log = logging.getLogger(__name__)

SPEC_FILE = "experiment.json"


@dataclass(frozen=True)
class SweepPoint:
    name: str
    config: TrainConfig


@dataclass
class ExperimentSpec:
    name: str
    config: TrainConfig = field(default_factory=TrainConfig)
    axes: dict[str, list] = field(default_factory=dict)
    seeds: list[int] | None = None

    def __post_init__(self):
        known = set(self.config.to_dict())
        for axis, values in self.axes.items():
            if axis not in known:
                raise ValueError(f"unknown sweep axis {axis!r}")
            if axis == "seed":
                raise ValueError("sweep seeds through the replicate list, not an axis")
            if not values:
                raise ValueError(f"sweep axis {axis!r} has no values")
        if self.seeds is not None and len(set(self.seeds)) != len(self.seeds):
            raise ValueError("replicate seeds must be distinct")

    @property
    def replicate_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds else [self.config.seed]

    @property
    def size(self) -> int:
        n = len(self.replicate_seeds)
        for values in self.axes.values():
            n *= len(values)
        return n

    def points(self) -> list[SweepPoint]:
        names = list(self.axes)
        out = []
        for combo in itertools.product(*(self.axes[a] for a in names)):
            changes = dict(zip(names, combo))
            for seed in self.replicate_seeds:
                cfg = self.config.replace(**changes, seed=seed)
                label = "__".join(f"{k}={_token(v)}" for k, v in changes.items())
                label = f"{label}__seed={seed}" if label else f"seed={seed}"
                out.append(SweepPoint(label, cfg))
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "config": self.config.to_dict(), "axes": self.axes, "seeds": self.seeds}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        unknown = set(data) - {"name", "config", "axes", "seeds"}
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(data["name"], TrainConfig.from_dict(data.get("config", {})),
                   dict(data.get("axes", {})), data.get("seeds"))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _token(value) -> str:
    return str(value).replace("/", "-").replace(" ", "")


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

ABLATION_SEEDS = [0, 1, 2, 3, 4]

# sweeps over one hyperparameter of the full configuration, others at their defaults
SWEEP_AXES = {
    "patterns": ("n_patterns", [5, 10, 15, 20, 25]),
    "beta": ("beta", [0.0, 0.1, 0.2, 0.3, 0.4]),
    "k": ("k", [1, 2, 4, 6, 8]),
    "gamma": ("gamma", [0.0, 0.2, 0.4, 0.6, 0.8]),
}


def preset(name: str, base: TrainConfig | None = None, seeds: Sequence[int] | None = None) -> ExperimentSpec:
    """Named experiment: ``ablation`` or one of the hyperparameter sweeps."""
    base = base or TrainConfig()
    if name == "ablation":
        axes = {"mode": ["static", "dynamic"], "assignment": ["one-to-one", "quality-aware"]}
        return ExperimentSpec("ablation", base, axes, list(seeds or ABLATION_SEEDS))
    if name in SWEEP_AXES:
        axis, values = SWEEP_AXES[name]
        full = base.replace(mode="dynamic", assignment="quality-aware")
        return ExperimentSpec(f"sweep-{name}", full, {axis: list(values)}, list(seeds or [base.seed]))
    raise ValueError(f"unknown preset {name!r}; choose from {['ablation', *SWEEP_AXES]}")


PRESETS = ("ablation", *SWEEP_AXES)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _execute(config: TrainConfig) -> RunRecord:
    try:
        return train(config)
    except Exception as exc:  # recorded, never dropped
        detail = traceback.format_exception_only(type(exc), exc)[-1].strip()
        return RunRecord(config=config.to_dict(), status="failed", diagnostic=detail)


def run(spec: ExperimentSpec, out_dir: str | Path, workers: int = 1, resume: bool = False,
        on_point: Callable[[SweepPoint, RunRecord], None] | None = None) -> dict[str, RunRecord]:
    """Train every sweep point of ``spec`` under ``out_dir/spec.name``.

    With ``resume`` a point whose directory already holds a summary is loaded
    instead of retrained. Returns records keyed by point name, in sweep order.
    """
    root = Path(out_dir) / spec.name
    root.mkdir(parents=True, exist_ok=True)
    (root / SPEC_FILE).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    points = spec.points()
    log.info("experiment %s: %d sweep points", spec.name, len(points))
    records: dict[str, RunRecord] = {}
    todo = []
    for p in points:
        if resume and (root / p.name / "summary.json").exists():
            records[p.name] = RunRecord.load(root / p.name)
            log.info("skipping finished point %s", p.name)
        else:
            todo.append(p)

    def finish(p: SweepPoint, rec: RunRecord) -> None:
        rec.save(root / p.name)
        records[p.name] = rec
        if rec.status != "complete":
            log.warning("point %s %s: %s", p.name, rec.status, rec.diagnostic)
        if on_point is not None:
            on_point(p, rec)

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(p, pool.submit(_execute, p.config)) for p in todo]
            for p, fut in futures:
                finish(p, fut.result())
    else:
        for p in todo:
            finish(p, _execute(p.config))
    return {p.name: records[p.name] for p in points}


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonRow:
    label: str
    dynamic: bool
    quality_aware: bool
    n_runs: int
    map_mean: float
    map_std: float
    gini_mean: float
    gini_std: float
    delta_map: float
    delta_gini: float
    seeds: list[int]


@dataclass
class ComparisonReport:
    baseline: str
    rows: list[ComparisonRow]

    COLUMNS = ("label", "dynamic", "quality_aware", "n_runs", "map_mean", "map_std", "gini_mean",
               "gini_std", "delta_map", "delta_gini", "seeds")

    def row(self, label: str) -> ComparisonRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r.label, int(r.dynamic), int(r.quality_aware), r.n_runs, repr(r.map_mean),
                            repr(r.map_std), repr(r.gini_mean), repr(r.gini_std), repr(r.delta_map),
                            repr(r.delta_gini), " ".join(map(str, r.seeds))])
        return path

    def write(self, out_dir: str | Path, stem: str = "comparison") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        labels = [r.label for r in self.rows]
        paths = [self.write_csv(out_dir / f"{stem}.csv")]
        paths.append(bar_chart_svg(out_dir / f"{stem}_map.svg", [r.delta_map for r in self.rows],
                                   title="final mAP minus baseline", ylabel="delta mAP",
                                   xlabel=" | ".join(labels)))
        paths.append(bar_chart_svg(out_dir / f"{stem}_gini.svg", [r.delta_gini for r in self.rows],
                                   title="final Gini minus baseline", ylabel="delta Gini",
                                   xlabel=" | ".join(labels)))
        return paths


def expand_run_dirs(paths: Iterable[str | Path]) -> list[Path]:
    """Run directories as given, with experiment directories replaced by their runs."""
    out: list[Path] = []
    for p in map(Path, paths):
        if (p / "summary.json").exists():
            out.append(p)
        elif p.is_dir():
            children = sorted(c for c in p.iterdir() if (c / "summary.json").exists())
            if not children:
                raise ValueError(f"{p} holds no finished runs")
            out.extend(children)
        else:
            raise ValueError(f"{p} is not a run directory")
    return out


def _group_key(config: dict) -> str:
    return json.dumps({k: v for k, v in config.items() if k != "seed"}, sort_keys=True)


def _label(config: dict, varying: list[str]) -> str:
    if not varying:
        return "all"
    return ", ".join(f"{k}={config[k]}" for k in varying)


def _csv_columns(run_dir: Path) -> set[str]:
    path = run_dir / "epochs.csv"
    if not path.exists():
        return set()
    with path.open() as fh:
        return set(next(csv.reader(fh), []))


def compare(run_dirs: Sequence[str | Path], baseline_dir: str | Path | None = None) -> ComparisonReport:
    """Final mAP / Gini per configuration (mean and spread over seeds) relative to a baseline.

    Runs that differ only in their seed are pooled. The baseline is the
    configuration of ``baseline_dir`` (default: the first run).
    """
    dirs = expand_run_dirs(run_dirs)
    if baseline_dir is not None:
        base_dirs = expand_run_dirs([baseline_dir])
        dirs = base_dirs + [d for d in dirs if d not in base_dirs]
    if len(dirs) < 2:
        raise ValueError("compare needs at least two runs")
    columns = [_csv_columns(d) for d in dirs]
    common = set.intersection(*columns)
    if not {"map", "gini"} <= common:
        raise ValueError("runs do not share the map and gini metric columns")
    records = [RunRecord.load(d) for d in dirs]
    groups: dict[str, list[RunRecord]] = {}
    for rec in records:
        groups.setdefault(_group_key(rec.config), []).append(rec)
    configs = [recs[0].config for recs in groups.values()]
    varying = sorted(k for k in configs[0] if k != "seed" and len({json.dumps(c.get(k)) for c in configs}) > 1)
    base_key = _group_key(records[0].config)

    def stats(recs: list[RunRecord]) -> tuple[float, float, float, float]:
        finished = [r for r in recs if r.rows]
        if not finished:
            return (float("nan"),) * 4
        maps = np.array([r.rows[-1]["map"] for r in finished])
        ginis = np.array([r.rows[-1]["gini"] for r in finished])
        return float(maps.mean()), float(maps.std()), float(ginis.mean()), float(ginis.std())

    base_map, _, base_gini, _ = stats(groups[base_key])
    rows = []
    for key, recs in groups.items():
        cfg = recs[0].config
        m_mean, m_std, g_mean, g_std = stats(recs)
        rows.append(ComparisonRow(
            label=_label(cfg, varying), dynamic=cfg.get("mode") == "dynamic",
            quality_aware=cfg.get("assignment") == "quality-aware", n_runs=len(recs),
            map_mean=m_mean, map_std=m_std, gini_mean=g_mean, gini_std=g_std,
            delta_map=m_mean - base_map, delta_gini=g_mean - base_gini,
            seeds=sorted(int(r.config.get("seed", 0)) for r in recs)))
    return ComparisonReport(_label(groups[base_key][0].config, varying), rows)

