"""Command-line entry point.

Every subcommand exits 0 on success. Failures print a single JSON line
``{"error": <kind>, "message": <text>}`` on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("querymix")


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind, self.code = kind, code


def _load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError("missing-file", f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError("bad-json", f"{path}: {exc}") from None


def _parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep:
        raise CliError("bad-override", f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _config(args):
    from .toymodel import TrainConfig

    data = _load_json(args.config) if args.config else {}
    if "config" in data and "name" in data:  # an experiment spec: use its base config
        data = data["config"]
    data.update(dict(_parse_override(o) for o in getattr(args, "set", None) or []))
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise CliError("bad-config", str(exc)) from None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .toymodel import train

    cfg = _config(args)
    run_dir = Path(args.out_dir) / (args.name or f"train-{cfg.mode}-{cfg.assignment}-seed{cfg.seed}")

    def show(row):
        print(f"epoch {row['epoch']:3d}  loss {row['loss_total']:.4f}  mAP {row['map']:.4f}  gini {row['gini']:.4f}",
              flush=True)

    record = train(cfg, on_epoch=None if args.quiet else show)
    record.save(run_dir)
    print(f"run directory: {run_dir}")
    if record.status != "complete":
        raise CliError(record.status, record.diagnostic, code=3)
    return 0


def cmd_sweep(args) -> int:
    from .harness import ExperimentSpec, preset, run

    if args.spec:
        try:
            spec = ExperimentSpec.from_dict(_load_json(args.spec))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError("bad-spec", str(exc)) from None
        if args.seeds:
            spec.seeds = args.seeds
    else:
        base = _config(args) if (args.config or args.set or args.seed is not None) else None
        spec = preset(args.preset, base, args.seeds)
    print(f"experiment {spec.name}: {spec.size} sweep points", flush=True)

    def show(point, record):
        tail = f"final mAP {record.rows[-1]['map']:.4f}  gini {record.rows[-1]['gini']:.4f}" if record.rows else ""
        print(f"{point.name:48s} {record.status:9s} {tail}", flush=True)

    records = run(spec, args.out_dir, workers=args.threads, resume=args.resume, on_point=show)
    bad = [name for name, r in records.items() if r.status != "complete"]
    if bad:
        raise CliError("incomplete-sweep", f"{len(bad)} of {len(records)} points did not complete: {bad}", code=3)
    return 0


def cmd_compare(args) -> int:
    from .harness import compare

    try:
        report = compare(args.runs, args.baseline)
    except ValueError as exc:
        raise CliError("bad-comparison", str(exc)) from None
    paths = report.write(args.out_dir, args.stem)
    print(f"baseline: {report.baseline}")
    print(f"{'configuration':44s} {'runs':>4s} {'mAP':>8s} {'±':>7s} {'dmAP':>8s} {'Gini':>7s} {'±':>7s} {'dGini':>8s}")
    for r in report.rows:
        print(f"{r.label:44s} {r.n_runs:4d} {r.map_mean:8.4f} {r.map_std:7.4f} {r.delta_map:+8.4f} "
              f"{r.gini_mean:7.4f} {r.gini_std:7.4f} {r.delta_gini:+8.4f}")
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_assign_demo(args) -> int:
    from .assignment import adaptive_k, quality_table, select_positives

    data = _load_json(args.scene)
    try:
        preds = data["predictions"]
        boxes = np.array([p["box"] for p in preds], dtype=np.float64).reshape(-1, 4)
        conf = np.array([p["confidence"] for p in preds], dtype=np.float64)
        gts = np.array(data["ground_truths"], dtype=np.float64).reshape(-1, 4)
        gamma = float(data.get("gamma", 0.4))
        k, l = int(data.get("k", 4)), int(data.get("l", 1))
        table = quality_table(boxes, conf, gts, gamma)
        counts = adaptive_k(table, k, l)
        result = select_positives(table, counts)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError("bad-scene", str(exc)) from None
    print(f"quality scores (gamma={gamma}), rows = predictions, columns = ground truths:")
    for i, row in enumerate(table.scores):
        print(f"  pred {i:2d}: " + " ".join(f"{v:+.4f}" for v in row))
    for j, (kj, pos) in enumerate(zip(counts, result.positives)):
        print(f"gt {j}: k_j = {kj}, positives = {pos.tolist()}")
    return 0


def _read_counts(path: str, column: str | None) -> np.ndarray:
    try:
        rows = list(csv.reader(Path(path).open()))
    except FileNotFoundError:
        raise CliError("missing-file", f"no such file: {path}") from None
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise CliError("bad-counts", f"{path} is empty")
    header = None
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        header, rows = rows[0], rows[1:]
    if column is not None:
        if header is None or column not in header:
            raise CliError("bad-counts", f"column {column!r} not found")
        idx = header.index(column)
        cells = [r[idx] for r in rows]
    else:
        cells = [c for r in rows for c in (r[-1:] if header else r)]
    try:
        return np.array([float(c) for c in cells])
    except ValueError as exc:
        raise CliError("bad-counts", str(exc)) from None


def cmd_gini(args) -> int:
    from .metrics import bar_chart_svg, gini, sorted_histogram, write_histogram_csv

    counts = _read_counts(args.counts, args.column)
    try:
        value = gini(counts)
    except ValueError as exc:
        raise CliError("bad-counts", str(exc)) from None
    print(f"gini {value:.6f} over {counts.size} values")
    if args.histogram:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_histogram_csv(out / "histogram.csv", counts)
        bar_chart_svg(out / "histogram.svg", sorted_histogram(counts), title=f"Gini {value:.3f}",
                      xlabel="rank", ylabel="count")
        print(f"wrote {out / 'histogram.csv'} and {out / 'histogram.svg'}")
    return 0


def cmd_dump_weights(args) -> int:
    from . import diffcore as dc
    from .toymodel import decode, evaluate, fit, make_scenes

    cfg = _config(args)
    if cfg.mode != "dynamic":
        raise CliError("bad-config", "dump-weights needs mode=dynamic")
    model, record = fit(cfg)
    if record.status != "complete":
        raise CliError(record.status, record.diagnostic, code=3)
    scenes = make_scenes(cfg, "val")[: args.scenes]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "weights.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene", "query"] + [f"pattern_{p}" for p in range(cfg.n_patterns)])
        with dc.no_grad():
            for scene in scenes:
                W = decode(model, scene).weights.matrix
                for qi, row in enumerate(W):
                    w.writerow([scene.seed, qi] + [repr(float(v)) for v in row])
    acts = evaluate(model, scenes).activations
    with (out / "pattern_activation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pattern", "mass", "share"])
        total = acts.pattern_mass.sum()
        for p, mass in enumerate(acts.pattern_mass):
            w.writerow([p, repr(float(mass)), repr(float(mass / total)) if total > 0 else "nan"])
    print(f"{len(scenes)} scenes, {acts.confident_detections} confident detections")
    print(f"wrote {out / 'weights.csv'} and {out / 'pattern_activation.csv'}")
    return 0


def cmd_oracle_check(args) -> int:
    from .matching import brute_force_match, hungarian

    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(args.trials):
        n_gt = int(rng.integers(1, args.max_gt + 1))
        n_pred = int(rng.integers(n_gt, args.max_pred + 1))
        cost = rng.uniform(0.0, 10.0, size=(n_pred, n_gt))
        if abs(hungarian(cost).total(cost) - brute_force_match(cost).total(cost)) > 1e-9:
            mismatches += 1
    elapsed = time.perf_counter() - start
    print(f"oracle-check: {args.trials - mismatches} passed, {mismatches} failed in {elapsed:.2f}s")
    if mismatches:
        raise CliError("oracle-mismatch", f"{mismatches} of {args.trials} instances disagree", code=1)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors use the same JSON error line as every other failure."""

    def error(self, message: str):
        sys.exit(_fail(CliError("usage", message)))


def build_parser() -> argparse.ArgumentParser:
    from .harness import PRESETS

    parser = _Parser(prog="querymix", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out-dir", default="runs", help="where run directories and reports go")
    parser.add_argument("--config", default=None, help="JSON file of TrainConfig fields")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")

    p = sub.add_parser("train", help="train one configuration")
    overrides(p)
    p.add_argument("--name", default=None, help="run directory name")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a preset or JSON experiment spec")
    overrides(p)
    p.add_argument("--preset", choices=PRESETS, default="ablation")
    p.add_argument("--spec", default=None, help="JSON experiment spec (overrides --preset)")
    p.add_argument("--seeds", type=int, nargs="+", default=None, help="replicate seeds")
    p.add_argument("--resume", action="store_true", help="skip points that already finished")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="final mAP / Gini deltas against a baseline")
    p.add_argument("runs", nargs="+", help="run or experiment directories")
    p.add_argument("--baseline", default=None, help="baseline run or experiment directory")
    p.add_argument("--stem", default="comparison")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("assign-demo", help="quality scores, k_j and positives for a JSON scene")
    p.add_argument("scene")
    p.set_defaults(func=cmd_assign_demo)

    p = sub.add_parser("gini", help="Gini coefficient of a CSV of counts")
    p.add_argument("counts")
    p.add_argument("--column", default=None)
    p.add_argument("--histogram", action="store_true", help="also write a sorted histogram CSV and SVG")
    p.set_defaults(func=cmd_gini)

    p = sub.add_parser("dump-weights", help="train, then export mixing weights and pattern activation")
    overrides(p)
    p.add_argument("--scenes", type=int, default=50, help="validation scenes to export")
    p.set_defaults(func=cmd_dump_weights)

    p = sub.add_parser("oracle-check", help="hungarian against brute force on random instances")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--max-pred", type=int, default=10)
    p.add_argument("--max-gt", type=int, default=7)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        return _fail(CliError("bad-argument", "--threads must be at least 1"))
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc)
    except Exception as exc:  # keep failures machine-readable
        return _fail(CliError(type(exc).__name__, str(exc), code=1))


def _fail(exc: CliError) -> int:
    print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
    return exc.code


if __name__ == "__main__":
    sys.exit(main())
