"""Deterministic on-disk formats for traces, regions, and metric tables.

Traces and metric tables are columnar text (CSV with a versioned comment
header); region matrices and summaries are JSON documents with sorted
keys.  All floats are written with repr (shortest round-trip), so a given
record always serializes to identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .run import RunRecord
from .sweep import SafetyRegion

__all__ = [
    "write_trace",
    "read_trace",
    "write_region",
    "read_region",
    "write_metrics_table",
    "write_json",
]

TRACE_FORMAT = "platoonsafe-trace v1"


def _fmt(x) -> str:
    return repr(float(x))


def write_trace(record: RunRecord, path) -> Path:
    path = Path(path)
    n = record.n
    cavs = record.cav_indices
    prot = record.protected_hdvs
    header = (
        ["t", "head_v"]
        + [f"s{i}" for i in range(1, n + 1)]
        + [f"v{i}" for i in range(1, n + 1)]
        + [f"h{i}" for i in range(1, n + 1)]
        + [f"hsuf{i}" for i in prot]
        + [f"url{j}" for j in cavs]
        + [f"usafe{j}" for j in cavs]
        + [f"qp{j}" for j in cavs]
    )
    meta = (
        f"# {TRACE_FORMAT} scenario={record.scenario} benchmark={record.benchmark}"
        f" dt={_fmt(record.dt)} cavs={','.join(map(str, cavs))}"
        f" protected={','.join(map(str, prot))} seed={record.seed}"
    )
    lines = [meta, ",".join(header)]
    for k in range(record.t.shape[0]):
        row = (
            [_fmt(record.t[k]), _fmt(record.head_v[k])]
            + [_fmt(x) for x in record.spacing[k]]
            + [_fmt(x) for x in record.velocity[k]]
            + [_fmt(x) for x in record.h[k]]
            + [_fmt(x) for x in record.h_suf[k]]
            + [_fmt(x) for x in record.u_rl[k]]
            + [_fmt(x) for x in record.u_safe[k]]
            + [str(int(x)) for x in record.qp_status[k]]
        )
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_trace(path) -> RunRecord:
    path = Path(path)
    with open(path) as f:
        meta_line = f.readline().strip()
    if not meta_line.startswith(f"# {TRACE_FORMAT}"):
        raise ValueError(f"{path} is not a {TRACE_FORMAT} file")
    meta = dict(part.split("=", 1) for part in meta_line.split()[3:])
    cavs = tuple(int(x) for x in meta["cavs"].split(","))
    prot = tuple(int(x) for x in meta["protected"].split(",")) if meta["protected"] else ()
    data = np.genfromtxt(path, delimiter=",", names=True, comments="#")
    names = data.dtype.names
    n = sum(1 for c in names if c.startswith("s") and c[1:].isdigit())

    def block(prefix, ids):
        return np.column_stack([data[f"{prefix}{i}"] for i in ids]) if ids else np.zeros((len(data), 0))

    return RunRecord(
        scenario=meta["scenario"],
        benchmark=meta["benchmark"],
        dt=float(meta["dt"]),
        cav_indices=cavs,
        protected_hdvs=prot,
        t=np.atleast_1d(data["t"]),
        head_v=np.atleast_1d(data["head_v"]),
        spacing=block("s", range(1, n + 1)),
        velocity=block("v", range(1, n + 1)),
        h=block("h", range(1, n + 1)),
        h_suf=block("hsuf", prot),
        u_rl=block("url", cavs),
        u_safe=block("usafe", cavs),
        qp_status=block("qp", cavs).astype(int),
        seed=int(meta["seed"]),
    )


def write_json(doc: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def write_region(region: SafetyRegion, path) -> Path:
    return write_json(region.to_dict(), path)


def read_region(path) -> SafetyRegion:
    return SafetyRegion.from_dict(json.loads(Path(path).read_text()))


def write_metrics_table(rows: list[dict], path) -> Path:
    """Metric table as columnar text; column order fixed by first row."""
    path = Path(path)
    if not rows:
        raise ValueError("no metric rows to write")
    cols = list(rows[0].keys())
    lines = ["# platoonsafe-metrics v1", ",".join(cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(_fmt(v) if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    return path
