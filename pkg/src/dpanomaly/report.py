"""Result persistence: summary CSV tables, JSONL logs, curve files and run manifests.

Everything written to a CSV is a deterministic function of (config, seed);
wall-clock timings only go to the JSONL logs and the manifest.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import dpanomaly

SUMMARY_COLUMNS = (
    "config_id",
    "cell",
    "param",
    "seed",
    "task",
    "status",
    "FP",
    "FN",
    "precision",
    "recall",
    "F",
    "AUPR",
    "AUROC",
    "epsilon",
)


def fmt(v) -> str:
    """Stable text form for CSV cells: integers as-is, reals to 6 decimals."""
    if v is None or v == "":
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6f}"
    return str(v)


@dataclass
class Row:
    """One line of a summary table; ``extra`` holds experiment-specific columns."""

    cell: str
    param: str
    seed: int | str
    task: str
    status: str = "ok"
    values: dict = field(default_factory=dict)


def to_csv(rows: list[Row], config_id: str, extra_columns: tuple[str, ...] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = SUMMARY_COLUMNS + tuple(extra_columns)
    w.writerow(cols)
    for r in rows:
        base = {"config_id": config_id, "cell": r.cell, "param": r.param, "seed": r.seed, "task": r.task, "status": r.status}
        w.writerow([fmt(base[c]) if c in base else fmt(r.values.get(c)) for c in cols])
    return buf.getvalue()


def aggregate_rows(rows: list[Row], numeric: tuple[str, ...]) -> list[Row]:
    """Per (cell, param, task): mean, min and max over seeds that finished.

    Cells where any seed failed keep the failure visible in ``status``.
    """
    groups: dict[tuple, list[Row]] = defaultdict(list)
    order: list[tuple] = []
    for r in rows:
        key = (r.cell, r.param, r.task)
        if key not in groups:
            order.append(key)
        groups[key].append(r)
    out: list[Row] = []
    for key in order:
        members = groups[key]
        ok = [r for r in members if r.status == "ok"]
        failed = len(members) - len(ok)
        status = "ok" if not failed else f"{failed}/{len(members)} failed"
        for stat, fn in (("mean", np.mean), ("min", np.min), ("max", np.max)):
            vals = {}
            for c in numeric:
                xs = [float(r.values[c]) for r in ok if r.values.get(c) not in (None, "")]
                xs = [x for x in xs if not math.isnan(x)]
                vals[c] = float(fn(xs)) if xs else math.nan
            out.append(Row(key[0], key[1], stat, key[2], status, vals))
    return out


def curve_csv(x_name: str, y_name: str, x, y) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([x_name, y_name])
    for a, b in zip(x, y):
        w.writerow([fmt(float(a)), fmt(float(b))])
    return buf.getvalue()


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_array(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a)
    h = hashlib.sha256(str(a.dtype).encode() + str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


def versions() -> dict[str, str]:
    import scipy

    return {
        "dpanomaly": dpanomaly.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


class RunWriter:
    """Serializes all output of one experiment into ``out_dir``."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.outputs: dict[str, str] = {}
        # start JSONL logs fresh so a rerun does not append to stale content
        for name in ("epochs.jsonl", "runs.jsonl"):
            (self.dir / name).write_text("")

    def write_text(self, rel: str, text: str) -> Path:
        path = self.dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        if rel.endswith(".csv"):
            self.outputs[rel] = hashlib.sha256(text.encode()).hexdigest()
        return path

    def append_jsonl(self, name: str, record: dict) -> None:
        with open(self.dir / name, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True, default=_json_default) + "\n")

    def manifest(self, config: dict, config_id: str, seeds: list[int], extra: dict) -> Path:
        doc = {
            "manifest_version": 1,
            "config_id": config_id,
            "config": config,
            "seeds": list(seeds),
            "versions": versions(),
            "outputs": dict(sorted(self.outputs.items())),
        }
        doc.update(extra)
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
        return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_summary(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_table(rows: list[dict[str, str]], columns: list[str]) -> str:
    """Fixed-width text table for terminal display."""
    widths = [max(len(c), *(len(r.get(c, "")) for r in rows)) if rows else len(c) for c in columns]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(r.get(c, "").ljust(w) for c, w in zip(columns, widths)))
    return "\n".join(lines)
