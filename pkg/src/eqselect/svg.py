"""Minimal SVG 1.1 line plots: axes, polylines, dashed reference lines."""

from __future__ import annotations

import datetime as _dt
import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    dashed: bool = False
    color: str | None = None


def _ticks(lo, hi, log):
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        return [float(k) for k in range(a, b + 1)]
    span = hi - lo
    if span <= 0:
        return [lo]
    step = 10 ** math.floor(math.log10(span / 4))
    for m in (1, 2, 5, 10):
        if span / (m * step) <= 6:
            step *= m
            break
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step) + 1)]


def _fmt(v, log):
    if log:
        return f"1e{int(v)}"
    return f"{v:.4g}"


def line_plot(path, series: list[Series], title: str = "", xlabel: str = "", ylabel: str = "",
              logx: bool = False, logy: bool = False, deterministic: bool = False,
              width: int = 640, height: int = 420) -> None:
    ml, mr, mt, mb = 70, 160, 40, 50
    pw, ph = width - ml - mr, height - mt - mb

    def tx(v):
        v = np.asarray(v, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log10(v) if logx else v

    def ty(v):
        v = np.asarray(v, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log10(v) if logy else v

    xs = [tx(s.x) for s in series]
    ys = [ty(s.y) for s in series]
    fin = [np.isfinite(a) & np.isfinite(b) for a, b in zip(xs, ys)]
    allx = np.concatenate([a[f] for a, f in zip(xs, fin)] or [np.array([0.0, 1.0])])
    ally = np.concatenate([a[f] for a, f in zip(ys, fin)] or [np.array([0.0, 1.0])])
    if allx.size == 0:
        allx = np.array([0.0, 1.0])
    if ally.size == 0:
        ally = np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = ['<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">']
    if not deterministic:
        stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        out.append(f"<metadata>created {stamp}</metadata>")
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for t in _ticks(x0, x1, logx):
        if x0 <= t <= x1:
            X = px(t)
            out.append(f'<line x1="{X:.2f}" y1="{mt + ph}" x2="{X:.2f}" y2="{mt + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{X:.2f}" y="{mt + ph + 18}" font-size="11" text-anchor="middle">'
                       f'{_fmt(t, logx)}</text>')
    for t in _ticks(y0, y1, logy):
        if y0 <= t <= y1:
            Y = py(t)
            out.append(f'<line x1="{ml - 5}" y1="{Y:.2f}" x2="{ml}" y2="{Y:.2f}" stroke="black"/>')
            out.append(f'<text x="{ml - 8}" y="{Y + 4:.2f}" font-size="11" text-anchor="end">'
                       f'{_fmt(t, logy)}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 10}" font-size="12" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{mt + ph / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 15 {mt + ph / 2})">{escape(ylabel)}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{mt - 15}" font-size="14" text-anchor="middle">'
               f'{escape(title)}</text>')
    for i, (s, a, b, f) in enumerate(zip(series, xs, ys, fin)):
        col = s.color or PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(u):.2f},{py(v):.2f}" for u, v in zip(a[f], b[f]))
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        if pts:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.5"{dash}/>')
        ly = mt + 15 + 18 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 35}" y2="{ly}" stroke="{col}" '
                   f'stroke-width="1.5"{dash}/>')
        out.append(f'<text x="{ml + pw + 40}" y="{ly + 4}" font-size="11">{escape(s.label)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
