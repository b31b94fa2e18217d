"""Ground-truth sample surfaces and raster-scan geometry."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np


class SampleError(ValueError):
    pass


class ParseError(SampleError):
    pass


class NonRectangular(SampleError):
    pass


class NonFiniteHeight(SampleError):
    pass


class OutOfBounds(SampleError):
    pass


def ideal_calibration_grid(step_height: float, period: float) -> Callable[[float], float]:
    """Square-wave profile: high on the first half of each period, low on the second.

    Every period therefore holds one downward step (mid-period) and one
    upward step (period boundary). Steps are vertical.
    """
    if not period > 0:
        raise SampleError("period must be positive")

    def sigma(i_x: float) -> float:
        frac = (i_x / period) % 1.0
        return step_height if frac < 0.5 else 0.0

    return sigma


def quasi_sinusoid(A_sin: float, P_sin: float) -> Callable[[float], float]:
    """Sine plus a triangle wave with a tenth of the sine's amplitude and period.

    The triangle starts at zero and rises, like the sine.
    """
    if not P_sin > 0:
        raise SampleError("P_sin must be positive")
    a_tri = A_sin / 10.0
    p_tri = P_sin / 10.0

    def sigma(i_x: float) -> float:
        u = (i_x / p_tri) % 1.0
        if u < 0.25:
            tri = 4.0 * u
        elif u < 0.75:
            tri = 2.0 - 4.0 * u
        else:
            tri = 4.0 * u - 4.0
        return A_sin * math.sin(2.0 * math.pi * i_x / P_sin) + a_tri * tri

    return sigma


@dataclass(frozen=True)
class RasterPlan:
    line_ys: tuple[float, ...]
    line_length: float

    def __post_init__(self):
        ys = self.line_ys
        if any(b <= a for a, b in zip(ys, ys[1:])):
            raise SampleError("line_ys must be strictly increasing")
        if not self.line_length > 0:
            raise SampleError("line_length must be positive")

    def __len__(self) -> int:
        return len(self.line_ys)


class SampleSurface:
    """A height field sigma(i_x, i_y), closed-form or gridded."""

    kind: str
    I_x: float
    I_y: float

    def height_at(self, i_x: float, i_y: float) -> float:
        raise NotImplementedError

    def line(self, i_y: float) -> Callable[[float], float]:
        """Fast evaluator of the profile along one scan line."""
        raise NotImplementedError


class GeneratorSurface(SampleSurface):
    """Surface invariant along i_y, given by a profile function of i_x."""

    kind = "generator"

    def __init__(self, profile: Callable[[float], float], I_x: float, I_y: float = math.inf, name: str = "", params=None):
        self.profile = profile
        self.I_x = I_x
        self.I_y = I_y
        self.name = name
        self.params = dict(params or {})

    def height_at(self, i_x: float, i_y: float) -> float:
        if not 0.0 <= i_x <= self.I_x or not 0.0 <= i_y <= self.I_y:
            raise OutOfBounds(f"({i_x}, {i_y}) outside surface")
        return self.profile(i_x)

    def line(self, i_y: float) -> Callable[[float], float]:
        return self.profile


class GridSurface(SampleSurface):
    kind = "grid"

    def __init__(self, heights, dx: float, dy: float, scale: float = 1.0):
        h = np.asarray(heights, dtype=float)
        if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 2:
            raise NonRectangular("height grid must be 2-D with at least two columns")
        if not np.all(np.isfinite(h)):
            raise NonFiniteHeight("height grid contains non-finite values")
        if not (dx > 0 and dy > 0):
            raise SampleError("dx and dy must be positive")
        self.heights = h
        self.dx = float(dx)
        self.dy = float(dy)
        self.scale = float(scale)
        self.I_x = (h.shape[1] - 1) * self.dx
        self.I_y = (h.shape[0] - 1) * self.dy

    def _row(self, i_y: float) -> int:
        if not 0.0 <= i_y <= self.I_y:
            raise OutOfBounds(f"i_y={i_y} outside [0, {self.I_y}]")
        return min(int(round(i_y / self.dy)), self.heights.shape[0] - 1)

    def height_at(self, i_x: float, i_y: float) -> float:
        if not 0.0 <= i_x <= self.I_x:
            raise OutOfBounds(f"i_x={i_x} outside [0, {self.I_x}]")
        return self.line(i_y)(i_x)

    def line(self, i_y: float) -> Callable[[float], float]:
        row = self.heights[self._row(i_y)].tolist()
        dx = self.dx
        last = len(row) - 1

        def sigma(i_x: float) -> float:
            u = i_x / dx
            j = int(u)
            if j >= last:
                return row[last]
            if j < 0:
                return row[0]
            f = u - j
            return row[j] + f * (row[j + 1] - row[j])

        return sigma


def sample_to_grid(surface: SampleSurface, nx: int, ys) -> GridSurface:
    """Sample a surface on an ``nx``-column grid at the given row positions."""
    ys = list(ys)
    xs = np.linspace(0.0, surface.I_x, nx)
    dy = ys[1] - ys[0] if len(ys) > 1 else 1.0
    h = np.array([[surface.height_at(x, y) for x in xs] for y in ys])
    return GridSurface(h, xs[1] - xs[0], dy)


_HEADER = re.compile(r"^#\s*dx=(\S+)\s+dy=(\S+)(?:\s+scale=(\S+))?\s*$")


def load_heightmap(path) -> GridSurface:
    """Read a height-map CSV (``# dx=.. dy=.. scale=..`` header, one row per i_y)."""
    text = Path(path).read_text().splitlines()
    lines = [ln for ln in text if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty file")
    m = _HEADER.match(lines[0].strip())
    if not m:
        raise ParseError(f"{path}: bad header {lines[0]!r}")
    try:
        dx, dy = float(m.group(1)), float(m.group(2))
        scale = float(m.group(3)) if m.group(3) is not None else 1.0
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    rows = []
    for n, ln in enumerate(lines[1:], start=2):
        try:
            rows.append([float(v) for v in ln.split(",")])
        except ValueError:
            raise ParseError(f"{path}:{n}: cannot parse {ln!r}") from None
    if not rows:
        raise ParseError(f"{path}: no height rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise NonRectangular(f"{path}: rows have differing lengths")
    h = np.array(rows) * scale
    if not np.all(np.isfinite(h)):
        raise NonFiniteHeight(f"{path}: non-finite height")
    return GridSurface(h, dx, dy, scale)


def write_heightmap(surface: GridSurface, path) -> None:
    """Write heights in meters with scale 1; 17 significant digits round-trip exactly."""
    out = [f"# dx={surface.dx!r} dy={surface.dy!r} scale=1"]
    for row in surface.heights:
        out.append(",".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(out) + "\n")
