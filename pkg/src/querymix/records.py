"""Per-run metric record shared by training and the experiment harness."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

EPOCH_COLUMNS = ("epoch", "lr", "loss_total", "loss_one_to_many", "loss_aux", "loss_div", "map", "gini")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunRecord:
    config: dict
    rows: list[dict] = field(default_factory=list)
    status: str = "complete"          # complete | diverged | failed
    diagnostic: str = ""
    duration_s: float = 0.0
    pattern_activation: list[float] = field(default_factory=list)
    match_counts: list[int] = field(default_factory=list)
    parameter_count: int = 0

    @property
    def epochs_completed(self) -> int:
        return len(self.rows)

    def summary(self) -> dict:
        maps = [r["map"] for r in self.rows]
        return {
            "status": self.status,
            "diagnostic": self.diagnostic,
            "epochs_completed": self.epochs_completed,
            "best_map": max(maps) if maps else None,
            "final_map": maps[-1] if maps else None,
            "final_gini": self.rows[-1]["gini"] if self.rows else None,
            "pattern_activation": self.pattern_activation,
            "match_counts": self.match_counts,
            "parameter_count": self.parameter_count,
            "duration_s": self.duration_s,
        }

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    # -- persistence -------------------------------------------------------

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EPOCH_COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in EPOCH_COLUMNS])
        return path

    def save(self, run_dir: str | Path) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True) + "\n")
        self.write_csv(run_dir / "epochs.csv")
        (run_dir / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return run_dir

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunRecord":
        run_dir = Path(run_dir)
        config = json.loads((run_dir / "config.json").read_text())
        summary = json.loads((run_dir / "summary.json").read_text())
        rows = []
        csv_path = run_dir / "epochs.csv"
        if csv_path.exists():
            with csv_path.open() as fh:
                for raw in csv.DictReader(fh):
                    rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in raw.items()})
        return cls(config=config, rows=rows, status=summary.get("status", "complete"),
                   diagnostic=summary.get("diagnostic", ""), duration_s=summary.get("duration_s", 0.0),
                   pattern_activation=summary.get("pattern_activation", []),
                   match_counts=summary.get("match_counts", []),
                   parameter_count=summary.get("parameter_count", 0))
