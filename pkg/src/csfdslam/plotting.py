"""Optimization traces: CSV reading and SVG curves."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .icp import TRACE_COLUMNS

# legend order; anything else follows alphabetically
METHOD_ORDER = ("gd", "ncg", "newton", "linearized")
LABELS = {"gd": "GD", "ncg": "NCG", "newton": "Newton", "linearized": "Linearized"}
PANELS = (("loss", "loss"), ("rotation_error", "rotation error (deg)"),
          ("translation_error", "translation error (m)"))


class TraceError(ValueError):
    pass


def read_trace(path) -> dict:
    """Columns of a trace CSV as float arrays.

    An optional ``method`` column splits one file into several traces; see
    :func:`read_traces`.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TraceError(f"{path}:1: empty trace file")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in ("iteration", "loss") if c not in header]
    if missing:
        raise TraceError(f"{path}:1: header lacks {', '.join(missing)}")
    body = rows[1:]
    if not body:
        raise TraceError(f"{path}:2: trace has no rows")
    cols = {h: [] for h in header}
    for lineno, row in enumerate(body, 2):
        if len(row) != len(header):
            raise TraceError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        for h, val in zip(header, row):
            if h == "method":
                cols[h].append(val.strip())
                continue
            try:
                cols[h].append(float(val))
            except ValueError:
                raise TraceError(f"{path}:{lineno}: {h} is not a number: {val!r}") from None
    return {h: (np.array(v) if h != "method" else v) for h, v in cols.items()}


def read_traces(paths) -> dict:
    """``{method: columns}``; the method is the file's ``method`` column or its stem."""
    out = {}
    for p in paths:
        cols = read_trace(p)
        if "method" in cols:
            methods = cols.pop("method")
            for m in dict.fromkeys(methods):
                sel = np.array([x == m for x in methods])
                out[m.lower()] = {h: v[sel] for h, v in cols.items()}
        else:
            out[Path(p).stem.lower()] = cols
    return out


def legend_order(methods) -> list:
    known = [m for m in METHOD_ORDER if m in methods]
    return known + sorted(m for m in methods if m not in METHOD_ORDER)


def write_trace_table(path, traces: dict) -> None:
    """All methods in one CSV with a leading ``method`` column."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("method",) + TRACE_COLUMNS)
        for m in legend_order(traces):
            for row in traces[m]:
                w.writerow([m, int(row[0])] + [repr(float(v)) for v in row[1:]])


def plot_traces(traces: dict, out_path, title: str | None = None, log_loss: bool = True) -> list:
    """One panel per quantity present, one curve per method; returns legend labels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not traces:
        raise TraceError("no traces to plot")
    order = legend_order(traces)
    panels = [(c, lab) for c, lab in PANELS
              if any(c in traces[m] and np.any(np.isfinite(traces[m][c])) for m in order)]
    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 3.4), squeeze=False)
    labels = [LABELS.get(m, m) for m in order]
    for ax, (col, lab) in zip(axes[0], panels):
        for m, name in zip(order, labels):
            tr = traces[m]
            if col not in tr:
                continue
            ax.plot(tr["iteration"], tr[col], label=name, marker=".", markersize=3)
        ax.set_xlabel("iteration")
        ax.set_ylabel(lab)
        if col == "loss" and log_loss:
            pos = [traces[m][col] for m in order]
            if all(np.nanmin(p) > 0 for p in pos if p.size):
                ax.set_yscale("log")
    axes[0][0].legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return labels
