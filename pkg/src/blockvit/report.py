"""Deterministic report emission: JSON, CSV, SVG heatmap and SVG scatter.

Every emitter produces byte-identical output for identical inputs: keys
are sorted, floats are written with a fixed format, and nothing depends on
time or the environment.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import DataError
from .metrics import METRIC_NAMES, LdaResult, MetricsReport

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class ReportFormat(str, enum.Enum):
    JSON = "json"
    CSV = "csv"
    SVG_HEATMAP = "svg-heatmap"
    SVG_SCATTER = "svg-scatter"


def _plain(obj):
    """Recursively turn numpy scalars/arrays and enums into JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, MetricsReport):
        return _plain(obj.to_dict())
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def config_hash(cfg) -> str:
    """Short sha256 of the canonical JSON form of a config document."""
    blob = json.dumps(_plain(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def report_row(name: str, report: MetricsReport, cfg_hash: str, **extra) -> dict:
    row = {"name": name}
    row.update(extra)
    for m in METRIC_NAMES:
        row[m] = report.metric(m)
    row["n_samples"] = report.n_samples
    row["config_hash"] = cfg_hash
    return row


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(_plain(v))


def csv_text(rows, columns=None) -> str:
    if not rows:
        raise DataError("cannot emit an empty report")
    if columns is None:
        columns = list(rows[0])
        for r in rows[1:]:
            columns += [k for k in r if k not in columns]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def best_per_column(matrix) -> list:
    """Row index of the maximum of each column (None entries skipped, earliest on ties)."""
    cols = len(matrix[0]) if len(matrix) else 0
    out = []
    for j in range(cols):
        best, best_v = None, -math.inf
        for i, row in enumerate(matrix):
            v = row[j]
            if v is None or (isinstance(v, float) and math.isnan(v)):
                continue
            if v > best_v:
                best, best_v = i, v
        out.append(best)
    return out


def _color(v, lo, hi) -> str:
    if v is None:
        return "#dddddd"
    t = 0.5 if hi <= lo else (v - lo) / (hi - lo)
    t = min(max(t, 0.0), 1.0)
    # white -> dark blue
    r = round(255 + t * (8 - 255))
    g = round(255 + t * (48 - 255))
    b = round(255 + t * (107 - 255))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(row_labels, col_labels, matrix, title: str = "") -> str:
    """Rows x metrics grid; each column is coloured on its own min-max scale.

    The per-column best cell is drawn bold and tagged ``data-best="1"``;
    the legend ``<desc>`` carries the best row index of every column.
    """
    if not row_labels or not col_labels:
        raise DataError("heatmap needs at least one row and one column")
    best = best_per_column(matrix)
    cw, ch, left, top = 90, 24, 160, 50
    width = left + cw * len(col_labels) + 10
    height = top + ch * len(row_labels) + 30
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<desc>{escape(json.dumps({"best_per_column": dict(zip(col_labels, best))}, sort_keys=True))}</desc>',
        f'<text x="{left}" y="18" font-size="13">{escape(title)}</text>',
    ]
    for j, c in enumerate(col_labels):
        out.append(f'<text x="{left + j * cw + cw / 2:.1f}" y="{top - 8}" text-anchor="middle">{escape(str(c))}</text>')
    for j in range(len(col_labels)):
        vals = [row[j] for row in matrix if row[j] is not None]
        lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
        for i, row in enumerate(matrix):
            v = row[j]
            x, y = left + j * cw, top + i * ch
            is_best = best[j] == i
            flag = ' data-best="1"' if is_best else ""
            out.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{_color(v, lo, hi)}" stroke="#ffffff"{flag}/>')
            if v is not None:
                t = 0.5 if hi <= lo else (v - lo) / (hi - lo)
                fill = "#ffffff" if t > 0.6 else "#000000"
                weight = ' font-weight="bold"' if is_best else ""
                out.append(f'<text x="{x + cw / 2:.1f}" y="{y + 16}" text-anchor="middle" fill="{fill}"{weight}>{v:.3f}</text>')
    for i, r in enumerate(row_labels):
        out.append(f'<text x="{left - 6}" y="{top + i * ch + 16}" text-anchor="end">{escape(str(r))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter_svg(panels, title: str = "", class_names=None) -> str:
    """Side-by-side LDA scatters with 2-SD ellipses, one panel per encoder.

    ``panels`` is a list of ``(panel_title, LdaResult, labels)``.
    """
    if not panels:
        raise DataError("scatter needs at least one panel")
    pw, ph, pad = 260, 260, 30
    width = pad + len(panels) * (pw + pad)
    height = ph + 2 * pad + 40
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{pad}" y="18" font-size="13">{escape(title)}</text>',
    ]
    for k, (ptitle, lda, labels) in enumerate(panels):
        if not isinstance(lda, LdaResult):
            raise DataError("scatter panels need LdaResult projections")
        pts = np.asarray(lda.projected, dtype=np.float64)
        if pts.shape[1] < 2:
            pts = np.column_stack([pts[:, 0], np.zeros(len(pts))])
        labels = np.asarray(labels)
        ext = [(cx - max(rx, ry), cx + max(rx, ry), cy - max(rx, ry), cy + max(rx, ry)) for cx, cy, rx, ry, _ in lda.ellipses]
        xs = np.concatenate([pts[:, 0], [e[0] for e in ext], [e[1] for e in ext]])
        ys = np.concatenate([pts[:, 1], [e[2] for e in ext], [e[3] for e in ext]])
        x0, x1 = float(xs.min()), float(xs.max())
        y0, y1 = float(ys.min()), float(ys.max())
        sx = pw / (x1 - x0) if x1 > x0 else 1.0
        sy = ph / (y1 - y0) if y1 > y0 else 1.0
        s = min(sx, sy)
        ox = pad + k * (pw + pad)
        oy = pad + 20

        def tx(x):
            return ox + (x - x0) * s

        def ty(y):
            return oy + ph - (y - y0) * s

        out.append(f'<g data-panel="{escape(str(ptitle))}">')
        out.append(f'<rect x="{ox}" y="{oy}" width="{pw}" height="{ph}" fill="none" stroke="#999999"/>')
        out.append(f'<text x="{ox + pw / 2:.1f}" y="{oy - 6}" text-anchor="middle">{escape(str(ptitle))}</text>')
        for (x, y), c in zip(pts[:, :2], labels):
            ci = int(np.searchsorted(lda.classes, c))
            out.append(f'<circle cx="{tx(x):.2f}" cy="{ty(y):.2f}" r="2" fill="{_PALETTE[ci % len(_PALETTE)]}" fill-opacity="0.6"/>')
        for ci, (cx, cy, rx, ry, ang) in enumerate(lda.ellipses):
            col = _PALETTE[ci % len(_PALETTE)]
            out.append(
                f'<ellipse cx="{tx(cx):.2f}" cy="{ty(cy):.2f}" rx="{rx * s:.2f}" ry="{ry * s:.2f}" '
                f'transform="rotate({-ang:.2f} {tx(cx):.2f} {ty(cy):.2f})" fill="none" stroke="{col}" stroke-width="1.5"/>'
            )
        out.append("</g>")
    names = class_names or [str(c) for c in panels[0][1].classes]
    for ci, name in enumerate(names):
        y = height - 12
        x = pad + ci * 70
        out.append(f'<circle cx="{x}" cy="{y - 4}" r="4" fill="{_PALETTE[ci % len(_PALETTE)]}"/>')
        out.append(f'<text x="{x + 8}" y="{y}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def emit_report(reports, fmt, path, **kw) -> Path:
    """Write ``reports`` in one format.

    JSON and CSV take a list of row dicts (or any JSON-able object for
    JSON). SVG-heatmap takes ``{"rows": [...], "columns": [...],
    "matrix": [[...]]}``; SVG-scatter takes a list of scatter panels.
    """
    fmt = ReportFormat(fmt)
    if reports is None or (hasattr(reports, "__len__") and len(reports) == 0):
        raise DataError("cannot emit an empty report")
    if fmt is ReportFormat.JSON:
        return _write(path, canonical_json(reports))
    if fmt is ReportFormat.CSV:
        return _write(path, csv_text(reports, kw.get("columns")))
    if fmt is ReportFormat.SVG_HEATMAP:
        return _write(path, heatmap_svg(reports["rows"], reports["columns"], reports["matrix"], kw.get("title", "")))
    return _write(path, scatter_svg(reports, kw.get("title", ""), kw.get("class_names")))


def metric_matrix(rows, metrics=METRIC_NAMES) -> dict:
    """Heatmap input from report rows: one row per report, one column per metric."""
    cols = [m for m in metrics if any(r.get(m) is not None for r in rows)]
    return {
        "rows": [r["name"] for r in rows],
        "columns": cols,
        "matrix": [[r.get(m) for m in cols] for r in rows],
    }


__all__ = [
    "ReportFormat", "canonical_json", "config_hash", "report_row", "csv_text", "best_per_column",
    "heatmap_svg", "scatter_svg", "emit_report", "metric_matrix",
]
