"""Minimal hand-emitted SVG charts.

Line and scatter plots for sweep curves, trajectory summaries, and latent
projections. Output is a plain SVG string with a fixed palette and
deterministic float formatting, so identical inputs give identical bytes.
"""

from __future__ import annotations

import math

from .errors import ConfigError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#17becf", "#7f7f7f")

MARGIN_LEFT = 64
MARGIN_RIGHT = 18
MARGIN_TOP = 34
MARGIN_BOTTOM = 52


def _fmt(v: float) -> str:
    s = f"{float(v):.6g}"
    return "0" if s == "-0" else s


def _axis_range(values) -> tuple:
    vmin = min(values)
    vmax = max(values)
    if not (math.isfinite(vmin) and math.isfinite(vmax)):
        raise ConfigError("chart values must be finite")
    if vmin == vmax:
        pad = max(abs(vmin) * 0.5, 0.5)
        return vmin - pad, vmax + pad
    return vmin, vmax


class _Frame:
    """Maps data coordinates onto the pixel plot area."""

    def __init__(self, xs, ys, width, height):
        self.width, self.height = width, height
        self.x0, self.x1 = _axis_range(xs)
        self.y0, self.y1 = _axis_range(ys)
        self.px0 = MARGIN_LEFT
        self.px1 = width - MARGIN_RIGHT
        self.py0 = height - MARGIN_BOTTOM
        self.py1 = MARGIN_TOP

    def x(self, v) -> float:
        t = (v - self.x0) / (self.x1 - self.x0)
        return self.px0 + t * (self.px1 - self.px0)

    def y(self, v) -> float:
        t = (v - self.y0) / (self.y1 - self.y0)
        return self.py0 + t * (self.py1 - self.py0)


def _axes(frame: _Frame, title, x_label, y_label, ticks=5) -> list:
    parts = [
        f'<rect width="{frame.width}" height="{frame.height}" fill="#ffffff"/>',
        f'<line x1="{frame.px0}" y1="{frame.py0}" x2="{frame.px1}" '
        f'y2="{frame.py0}" stroke="#333333" stroke-width="1"/>',
        f'<line x1="{frame.px0}" y1="{frame.py0}" x2="{frame.px0}" '
        f'y2="{frame.py1}" stroke="#333333" stroke-width="1"/>',
    ]
    if title:
        parts.append(f'<text x="{(frame.px0 + frame.px1) / 2:.1f}" y="20" '
                     f'text-anchor="middle" font-size="13" '
                     f'font-family="sans-serif">{title}</text>')
    for i in range(ticks):
        f = i / (ticks - 1)
        xv = frame.x0 + f * (frame.x1 - frame.x0)
        yv = frame.y0 + f * (frame.y1 - frame.y0)
        xp, yp = frame.x(xv), frame.y(yv)
        parts.append(f'<line x1="{xp:.1f}" y1="{frame.py0}" x2="{xp:.1f}" '
                     f'y2="{frame.py0 + 4}" stroke="#333333"/>')
        parts.append(f'<text x="{xp:.1f}" y="{frame.py0 + 18}" '
                     f'text-anchor="middle" font-size="10" '
                     f'font-family="sans-serif">{_fmt(xv)}</text>')
        parts.append(f'<line x1="{frame.px0 - 4}" y1="{yp:.1f}" '
                     f'x2="{frame.px0}" y2="{yp:.1f}" stroke="#333333"/>')
        parts.append(f'<text x="{frame.px0 - 7}" y="{yp + 3.5:.1f}" '
                     f'text-anchor="end" font-size="10" '
                     f'font-family="sans-serif">{_fmt(yv)}</text>')
        parts.append(f'<line x1="{frame.px0}" y1="{yp:.1f}" x2="{frame.px1}" '
                     f'y2="{yp:.1f}" stroke="#eeeeee" stroke-width="0.5"/>')
    if x_label:
        parts.append(f'<text x="{(frame.px0 + frame.px1) / 2:.1f}" '
                     f'y="{frame.py0 + 38}" text-anchor="middle" '
                     f'font-size="11" font-family="sans-serif">{x_label}</text>')
    if y_label:
        cy = (frame.py0 + frame.py1) / 2
        parts.append(f'<text x="16" y="{cy:.1f}" text-anchor="middle" '
                     f'font-size="11" font-family="sans-serif" '
                     f'transform="rotate(-90 16 {cy:.1f})">{y_label}</text>')
    return parts


def _legend(frame: _Frame, entries) -> list:
    parts = []
    for i, (label, color) in enumerate(entries):
        y = frame.py1 + 8 + i * 16
        x = frame.px1 - 150
        parts.append(f'<rect x="{x}" y="{y - 8}" width="10" height="10" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{x + 15}" y="{y + 1}" font-size="10" '
                     f'font-family="sans-serif">{label}</text>')
    return parts


def _check_series(series):
    if not series:
        raise ConfigError("chart needs at least one series")
    for s in series:
        if len(s["x"]) != len(s["y"]):
            raise ConfigError(f"series {s.get('label', '?')!r}: x and y lengths differ")
        if len(s["x"]) == 0:
            raise ConfigError(f"series {s.get('label', '?')!r} is empty")


def line_chart(series, title="", x_label="", y_label="",
               width=640, height=420) -> str:
    """Polyline per series with circle markers. Each series is a dict with
    ``label``, ``x``, ``y`` and an optional ``color``."""
    _check_series(series)
    xs = [float(v) for s in series for v in s["x"]]
    ys = [float(v) for s in series for v in s["y"]]
    frame = _Frame(xs, ys, width, height)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">']
    parts += _axes(frame, title, x_label, y_label)
    legend = []
    for i, s in enumerate(series):
        color = s.get("color") or PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{frame.x(float(x)):.2f},{frame.y(float(y)):.2f}"
                       for x, y in zip(s["x"], s["y"]))
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{pts}"/>')
        for x, y in zip(s["x"], s["y"]):
            parts.append(f'<circle cx="{frame.x(float(x)):.2f}" '
                         f'cy="{frame.y(float(y)):.2f}" r="2.5" fill="{color}"/>')
        legend.append((s.get("label", f"series {i}"), color))
    parts += _legend(frame, legend)
    parts.append("</svg>")
    return "\n".join(parts)


def scatter_chart(groups, title="", x_label="", y_label="",
                  width=640, height=420) -> str:
    """One circle per point, one color per group; used for latent-plane
    projections colored by rollout correctness."""
    _check_series(groups)
    xs = [float(v) for g in groups for v in g["x"]]
    ys = [float(v) for g in groups for v in g["y"]]
    frame = _Frame(xs, ys, width, height)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">']
    parts += _axes(frame, title, x_label, y_label)
    legend = []
    for i, g in enumerate(groups):
        color = g.get("color") or PALETTE[i % len(PALETTE)]
        for x, y in zip(g["x"], g["y"]):
            parts.append(f'<circle cx="{frame.x(float(x)):.2f}" '
                         f'cy="{frame.y(float(y)):.2f}" r="3" fill="{color}" '
                         f'fill-opacity="0.75"/>')
        legend.append((g.get("label", f"group {i}"), color))
    parts += _legend(frame, legend)
    parts.append("</svg>")
    return "\n".join(parts)


def write_svg(path, svg: str):
    with open(path, "w") as f:
        f.write(svg)
        if not svg.endswith("\n"):
            f.write("\n")
