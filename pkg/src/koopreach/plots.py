"""Per-dimension tube plots written as plain SVG 1.1.

The markup is generated by hand so the output is byte-for-byte deterministic
(no renderer versions or timestamps leak into it).
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .boundprop import ReachTube
from .dynamics import DimensionError

WIDTH, HEIGHT = 640, 360
MARGIN = {"left": 64, "right": 16, "top": 28, "bottom": 40}
BAND_STYLE = {
    "CKRS": 'fill="#f4a582" fill-opacity="0.45" stroke="#d6604d" stroke-width="0.8"',
    "KRS": 'fill="#4393c3" fill-opacity="0.55" stroke="#2166ac" stroke-width="0.8"',
}
ROLLOUT_STYLE = 'fill="none" stroke="#404040" stroke-width="0.6" stroke-opacity="0.7"'
REFERENCE_STYLE = 'fill="none" stroke="#000000" stroke-width="1.4" stroke-dasharray="6,4"'


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Axes:
    def __init__(self, T: int, ylo: float, yhi: float):
        if yhi <= ylo:
            pad = max(abs(ylo), 1.0) * 0.05
            ylo, yhi = ylo - pad, yhi + pad
        self.T, self.ylo, self.yhi = max(T, 1), ylo, yhi
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def px(self, t):
        return self.x0 + (self.x1 - self.x0) * np.asarray(t, dtype=float) / self.T

    def py(self, y):
        y = np.clip(np.asarray(y, dtype=float), self.ylo, self.yhi)
        return self.y0 + (self.y1 - self.y0) * (y - self.ylo) / (self.yhi - self.ylo)

    def points(self, t, y) -> str:
        return " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(self.px(t), self.py(y)))


def _y_range(tubes, reference, rollouts, j: int):
    vals = [np.asarray(tb.lower[:, j]) for tb in tubes] + [np.asarray(tb.upper[:, j]) for tb in tubes]
    if reference is not None:
        vals.append(reference[:, j])
    if len(rollouts):
        vals.append(rollouts[..., j].ravel())
    v = np.concatenate(vals)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return -1.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _band(ax: _Axes, tube: ReachTube, j: int) -> str:
    t = np.arange(tube.T + 1)
    upper = ax.points(t, tube.upper[:, j])
    lower = ax.points(t[::-1], tube.lower[::-1, j])
    return f'<polygon points="{upper} {lower}" {BAND_STYLE[tube.kind]}/>'


def _axes_markup(ax: _Axes, title: str, dt: float | None) -> list[str]:
    out = [
        f'<rect x="{ax.x0}" y="{ax.y1}" width="{ax.x1 - ax.x0}" height="{ax.y0 - ax.y1}" '
        'fill="none" stroke="#808080" stroke-width="0.8"/>',
        f'<text x="{WIDTH / 2:.0f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">{title}</text>',
    ]
    for k in range(5):
        t = ax.T * k / 4
        label = f"{t * dt:.2f}" if dt else f"{t:.0f}"
        out.append(f'<text x="{_fmt(float(ax.px(t)))}" y="{ax.y0 + 16}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{label}</text>')
        y = ax.ylo + (ax.yhi - ax.ylo) * k / 4
        out.append(f'<text x="{ax.x0 - 6}" y="{_fmt(float(ax.py(y)) + 3)}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{y:.3g}</text>')
    xlabel = "time [s]" if dt else "step"
    out.append(f'<text x="{(ax.x0 + ax.x1) / 2:.0f}" y="{HEIGHT - 6}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="11">{xlabel}</text>')
    return out


def render_dimension(tubes: Sequence[ReachTube], reference, rollouts, j: int, dt: float | None = None,
                     title: str | None = None) -> str:
    T = tubes[0].T if tubes else len(reference) - 1
    ax = _Axes(T, *_y_range(tubes, reference, rollouts, j))
    body = _axes_markup(ax, title or f"x[{j}]", dt)
    # wide bands first so the tighter one stays visible on top
    for tube in sorted(tubes, key=lambda tb: tb.kind != "CKRS"):
        body.append(_band(ax, tube, j))
    t = np.arange(T + 1)
    for r in rollouts:
        body.append(f'<polyline points="{ax.points(t, r[:, j])}" {ROLLOUT_STYLE}/>')
    if reference is not None:
        body.append(f'<polyline points="{ax.points(t, reference[:, j])}" {REFERENCE_STYLE}/>')
    head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def emit_plots(tubes: Sequence[ReachTube] | ReachTube, reference, rollouts, path, dt: float | None = None,
               prefix: str = "tube") -> list[Path]:
    """Write ``{prefix}_x{j}.svg`` for each state dimension j and return the paths.

    ``reference`` is a (T+1, n) array or None. ``rollouts`` is a (k, T+1, n)
    array, or an empty sequence for a bands-only plot.
    """
    if isinstance(tubes, ReachTube):
        tubes = [tubes]
    tubes = list(tubes)
    if not tubes and reference is None:
        raise ValueError("nothing to plot")
    shape = tubes[0].lower.shape if tubes else np.shape(reference)
    for tb in tubes[1:]:
        if tb.lower.shape != shape:
            raise DimensionError("tubes disagree in shape")
    if reference is not None:
        reference = np.asarray(reference, dtype=float)
        if reference.shape != shape:
            raise DimensionError(f"reference shape {reference.shape} does not match tube shape {shape}")
    rollouts = np.asarray(rollouts, dtype=float).reshape((-1,) + tuple(shape))
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for j in range(shape[1]):
        p = out / f"{prefix}_x{j}.svg"
        p.write_text(render_dimension(tubes, reference, rollouts, j, dt))
        written.append(p)
    return written
