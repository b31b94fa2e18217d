"""Trace, impact, metric and config files."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .experiment import TRACE_COLUMNS, LineTrace

IMPACT_COLUMNS = ("t", "i_x", "v_i")


class IoError(OSError):
    pass


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _json_safe(obj):
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return repr(obj)
        return obj
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def write_outputs(traces, metrics, out_dir, config: dict | None = None) -> list[Path]:
    """Write ``line_<k>.csv``, ``impacts_<k>.csv``, ``metrics.json`` and ``config.json``."""
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for tr in traces:
            p = out / f"line_{tr.index}.csv"
            cols = np.column_stack([tr[c] for c in TRACE_COLUMNS]) if len(tr["t"]) else np.empty((0, 9))
            _write_csv(p, TRACE_COLUMNS, cols.tolist())
            written.append(p)
            p = out / f"impacts_{tr.index}.csv"
            _write_csv(p, IMPACT_COLUMNS, np.asarray(tr.impacts).reshape(-1, 3).tolist())
            written.append(p)
            p = out / f"line_{tr.index}.meta.json"
            meta = dict(index=tr.index, i_y=tr.i_y, t_scan_start=tr.t_scan_start, t_scan_end=tr.t_scan_end, gains=list(tr.gains))
            p.write_text(json.dumps(_json_safe(meta), indent=2) + "\n")
            written.append(p)
        p = out / "metrics.json"
        data = metrics.to_dict() if metrics is not None else {"n_lines": 0, "lines": []}
        p.write_text(json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n")
        written.append(p)
        if config is not None:
            p = out / "config.json"
            p.write_text(json.dumps(_json_safe(config), indent=2) + "\n")
            written.append(p)
    except OSError as exc:
        raise IoError(f"cannot write outputs to {out}: {exc}") from exc
    return written


def _read_csv(path: Path, expected) -> np.ndarray:
    text = path.read_text().splitlines()
    header = tuple(text[0].split(","))
    if header != tuple(expected):
        raise IoError(f"{path}: unexpected columns {header}")
    rows = [[float(v) for v in ln.split(",")] for ln in text[1:] if ln.strip()]
    return np.array(rows, dtype=float).reshape(-1, len(expected))


def read_traces(trace_dir) -> list[LineTrace]:
    """Load every ``line_<k>.csv`` (with its impacts and metadata) from a directory."""
    d = Path(trace_dir)
    paths = sorted(d.glob("line_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    traces = []
    for p in paths:
        k = int(p.stem.split("_")[1])
        data = _read_csv(p, TRACE_COLUMNS)
        cols = {c: data[:, i].copy() for i, c in enumerate(TRACE_COLUMNS)}
        ip = d / f"impacts_{k}.csv"
        imp = _read_csv(ip, IMPACT_COLUMNS) if ip.exists() else np.empty((0, 3))
        mp = d / f"line_{k}.meta.json"
        meta = json.loads(mp.read_text()) if mp.exists() else {}
        t = cols["t"]
        traces.append(LineTrace(
            index=k,
            i_y=float(meta.get("i_y", 0.0)),
            columns=cols,
            impacts=imp,
            t_scan_start=float(meta.get("t_scan_start", t[0] if len(t) else 0.0)),
            t_scan_end=float(meta.get("t_scan_end", t[-1] if len(t) else 0.0)),
            gains=list(meta.get("gains", [])),
        ))
    return traces
