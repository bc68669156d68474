"""Artifact rendering (CSV tables, SVG plot) and atomic publication."""
from __future__ import annotations

import csv
import io
import math
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .curves import MTECurve


def fmt(value) -> str:
    """Shortest round-trip text for numbers; empty for missing."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return ""
        if v.is_integer() and abs(v) < 1e15:
            return str(int(v))
        return repr(v)
    return str(value)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        if isinstance(row, dict):
            row = [row.get(h) for h in header]
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def curve_csv(curve: MTECurve) -> str:
    lo = curve.lo if curve.lo is not None else [None] * len(curve.grid)
    hi = curve.hi if curve.hi is not None else [None] * len(curve.grid)
    return csv_text(["F", "mte", "lo95", "hi95"], zip(curve.grid, curve.mte, lo, hi))


def curve_svg(curve: MTECurve, title: str = "Marginal hours response", width: int = 640, height: int = 400) -> str:
    """Line plot of the curve with its band as a shaded polygon."""
    ml, mr, mt, mb = 60, 20, 30, 45
    x = curve.grid
    ys = [curve.mte] + ([curve.lo, curve.hi] if curve.has_band else [])
    ymin = min(float(np.min(y)) for y in ys)
    ymax = max(float(np.max(y)) for y in ys)
    ymin, ymax = min(ymin, 0.0), max(ymax, 0.0)
    if ymax - ymin < 1e-12:
        ymin, ymax = ymin - 1, ymax + 1
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad
    x0, x1 = float(x[0]), float(x[-1])

    def px(v):
        return ml + (float(v) - x0) / (x1 - x0) * (width - ml - mr)

    def py(v):
        return mt + (ymax - float(v)) / (ymax - ymin) * (height - mt - mb)

    def pts(xs, yv):
        return " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, yv))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
    ]
    if curve.has_band:
        poly = pts(x, curve.hi) + " " + pts(x[::-1], curve.lo[::-1])
        out.append(f'<polygon points="{poly}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>')
    out.append(f'<line x1="{ml}" y1="{py(0):.2f}" x2="{width - mr}" y2="{py(0):.2f}" stroke="#888" stroke-dasharray="4,3"/>')
    out.append(f'<polyline points="{pts(x, curve.mte)}" fill="none" stroke="#08519c" stroke-width="2"/>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{width - ml - mr}" height="{height - mt - mb}" fill="none" stroke="black"/>')
    for v in np.linspace(x0, x1, 5):
        out.append(f'<text x="{px(v):.2f}" y="{height - mb + 16}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.2f}</text>')
    for v in np.linspace(ymin + pad, ymax - pad, 5):
        out.append(f'<text x="{ml - 6}" y="{py(v) + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.1f}</text>')
    out.append(f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" font-size="12">participation probability F</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def publish(artifacts: dict, out_dir) -> list[Path]:
    """Write ``{filename: text}`` into ``out_dir`` all-or-nothing.

    Files are staged in a temporary directory next to ``out_dir`` and moved
    into place with ``os.replace`` only after every file was written.
    """
    out_dir = Path(out_dir)
    parent = out_dir.parent if out_dir.parent != Path("") else Path(".")
    parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".welfare-mte-", dir=parent))
    try:
        for name, text in artifacts.items():
            with open(stage / name, "w", newline="") as fh:
                fh.write(text)
                fh.flush()
                os.fsync(fh.fileno())
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name in artifacts:
            os.replace(stage / name, out_dir / name)
            written.append(out_dir / name)
        return written
    finally:
        shutil.rmtree(stage, ignore_errors=True)
