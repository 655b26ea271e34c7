"""Run traces: one meta record, one record per cycle, one final record.

Traces are newline-delimited JSON with a CSV mirror of the cycle table next
to them, so runs can be grepped and plotted without custom tooling.  Parsing
a written trace reproduces it exactly (floats round-trip through repr).
"""

from __future__ import annotations

import csv
import hashlib
import json
import subprocess
from pathlib import Path

import numpy as np

__all__ = ["Trace", "config_hash", "git_revision", "jsonify"]

_CSV_FIELDS = ["cycle", "kind", "d_norm", "xi", "f", "cost", "wall"]


def jsonify(obj):
    """Recursively convert numpy scalars/arrays for JSON serialization."""
    if isinstance(obj, dict):
        return {str(k): jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonify(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def config_hash(config):
    """Short stable hash of a configuration mapping (canonical JSON)."""
    payload = json.dumps(jsonify(config), sort_keys=True,
                         separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def git_revision(cwd=None):
    """Current git revision, or None outside a repository."""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=cwd,
        )
    except (OSError, subprocess.TimeoutExpired):
        return None
    rev = out.stdout.strip()
    return rev if out.returncode == 0 and rev else None


class Trace:
    """Cycle-by-cycle record of one solver run."""

    def __init__(self, meta=None, cycles=None, final=None):
        self.meta = dict(meta or {})
        self.cycles = list(cycles or [])
        self.final = dict(final or {})

    def add_cycle(self, cycle, kind, d_norm, xi, cost, wall, f=None, **extra):
        row = {
            "cycle": int(cycle),
            "kind": str(kind),
            "d_norm": float(d_norm),
            "xi": float(xi),
            "f": None if f is None else float(f),
            "cost": float(cost),
            "wall": float(wall),
        }
        if extra:
            row.update(jsonify(extra))
        self.cycles.append(row)
        return row

    @property
    def converged(self):
        return bool(self.final.get("converged", False))

    @property
    def cost(self):
        return float(self.final.get("cost", self.cycles[-1]["cost"]
                                     if self.cycles else 0.0))

    def series(self, key):
        """Column of the cycle table as an array (None entries become nan)."""
        vals = [row.get(key) for row in self.cycles]
        return np.array([np.nan if v is None else v for v in vals],
                        dtype=float)

    # -- persistence -------------------------------------------------------

    def write(self, path):
        """Write NDJSON to ``path`` and a CSV mirror of the cycle table."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps({"record": "meta", **jsonify(self.meta)}) + "\n")
            for row in self.cycles:
                fh.write(json.dumps({"record": "cycle", **jsonify(row)}) + "\n")
            fh.write(json.dumps({"record": "final", **jsonify(self.final)}) + "\n")
        csv_path = path.with_suffix(".csv")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS,
                                    extrasaction="ignore")
            writer.writeheader()
            for row in self.cycles:
                writer.writerow(row)
        return path

    @classmethod
    def read(cls, path):
        trace = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                tag = rec.pop("record", None)
                if tag == "meta":
                    trace.meta = rec
                elif tag == "cycle":
                    trace.cycles.append(rec)
                elif tag == "final":
                    trace.final = rec
                else:
                    raise ValueError(f"unknown trace record {tag!r} in {path}")
        return trace

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (jsonify(self.meta) == jsonify(other.meta)
                and jsonify(self.cycles) == jsonify(other.cycles)
                and jsonify(self.final) == jsonify(other.final))

    def __repr__(self):
        return (f"Trace(solver={self.meta.get('solver')!r}, "
                f"cycles={len(self.cycles)}, converged={self.converged})")
