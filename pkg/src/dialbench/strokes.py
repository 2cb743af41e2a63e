"""Deterministic rasterization of correction strokes.

Two stroke kinds arrive from the annotation client, both in full-resolution
(20x) pixel coordinates:

* ``brush``: a polyline stamped with a disk of the given radius.  Disk
  centers snap to the grid by round-half-away-from-zero; the polyline is
  resampled at <= 0.5 px spacing so consecutive stamps overlap.
* ``polygon``: even-odd (crossing parity) fill evaluated at pixel centers,
  which sit at integer coordinates.

Out-of-bounds vertices are clamped to the slide rectangle.  Replaying
strokes in submission order with later strokes winning is the mask's
source of truth; the service keeps strokes in an append-only log and calls
:func:`rasterize_strokes` when a round is submitted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .classes import N_CLASSES, UNLABELED

BRUSH = "brush"
POLYGON = "polygon"
_MAX_SPACING = 0.5


class StrokeError(ValueError):
    """Malformed stroke payload (maps to HTTP 422 in the service)."""


@dataclass(frozen=True)
class Stroke:
    class_id: int
    kind: str
    points: tuple[tuple[float, float], ...]
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in (BRUSH, POLYGON):
            raise StrokeError(f"unknown stroke kind {self.kind!r}")
        if not (0 <= self.class_id < N_CLASSES):
            raise StrokeError(f"class_id {self.class_id} outside 0..{N_CLASSES - 1}")
        if len(self.points) == 0:
            raise StrokeError("empty stroke")
        if self.kind == POLYGON and len(self.points) < 3:
            raise StrokeError("polygon needs at least 3 vertices")
        if self.radius < 0:
            raise StrokeError("negative brush radius")
        for pt in self.points:
            if len(pt) != 2 or not all(math.isfinite(v) for v in pt):
                raise StrokeError(f"bad vertex {pt!r}")

    def as_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "kind": self.kind,
            "points": [list(p) for p in self.points],
            "radius": self.radius,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Stroke":
        try:
            return cls(
                class_id=int(payload["class_id"]),
                kind=str(payload["kind"]),
                points=tuple((float(x), float(y)) for x, y in payload["points"]),
                radius=float(payload.get("radius", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, StrokeError):
                raise
            raise StrokeError(f"malformed stroke payload: {exc}") from exc


def _round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def _clamp(points: Iterable[tuple[float, float]], shape: tuple[int, int]):
    h, w = shape
    return [(min(max(x, 0.0), w - 1.0), min(max(y, 0.0), h - 1.0)) for x, y in points]


def _stamp_disk(canvas: np.ndarray, x: float, y: float, radius: float, value: int):
    h, w = canvas.shape
    cx, cy = _round_half_away(x), _round_half_away(y)
    r = int(math.floor(radius))
    r2 = radius * radius
    for dy in range(-r, r + 1):
        py = cy + dy
        if not 0 <= py < h:
            continue
        span = int(math.floor(math.sqrt(max(r2 - dy * dy, 0.0))))
        x0 = max(cx - span, 0)
        x1 = min(cx + span, w - 1)
        if x0 <= x1:
            canvas[py, x0 : x1 + 1] = value


def _brush_raster(canvas: np.ndarray, stroke: Stroke) -> None:
    pts = _clamp(stroke.points, canvas.shape)
    if len(pts) == 1:
        _stamp_disk(canvas, pts[0][0], pts[0][1], stroke.radius, stroke.class_id)
        return
    for (x1, y1), (x2, y2) in zip(pts, pts[1:]):
        dist = math.hypot(x2 - x1, y2 - y1)
        n = max(1, math.ceil(dist / _MAX_SPACING))
        for i in range(n + 1):
            t = i / n
            _stamp_disk(
                canvas, x1 + t * (x2 - x1), y1 + t * (y2 - y1),
                stroke.radius, stroke.class_id,
            )


def polygon_fill(
    vertices: list[tuple[float, float]], shape: tuple[int, int]
) -> np.ndarray:
    """Even-odd interior test at pixel centers; returns a bool raster."""
    h, w = shape
    vs = _clamp(vertices, shape)
    xs = np.array([v[0] for v in vs])
    ys = np.array([v[1] for v in vs])
    y0 = max(0, math.ceil(ys.min()) - 1)
    y1 = min(h - 1, math.floor(ys.max()) + 1)
    x0 = max(0, math.ceil(xs.min()) - 1)
    x1 = min(w - 1, math.floor(xs.max()) + 1)
    out = np.zeros(shape, dtype=bool)
    if y1 < y0 or x1 < x0:
        return out
    py = np.arange(y0, y1 + 1, dtype=np.float64)
    px = np.arange(x0, x1 + 1, dtype=np.float64)
    inside = np.zeros((py.size, px.size), dtype=bool)
    n = len(vs)
    for i in range(n):
        ax, ay = vs[i]
        bx, by = vs[(i + 1) % n]
        crosses = (ay > py) != (by > py)  # horizontal edges never cross
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            x_int = ax + (py - ay) * (bx - ax) / (by - ay)
        hit = crosses[:, None] & (px[None, :] < x_int[:, None])
        inside ^= hit
    out[y0 : y1 + 1, x0 : x1 + 1] = inside
    return out


def apply_stroke(canvas: np.ndarray, stroke: Stroke) -> None:
    """Paint one stroke onto a uint8 class raster (in place)."""
    if stroke.kind == BRUSH:
        _brush_raster(canvas, stroke)
    else:
        canvas[polygon_fill(list(stroke.points), canvas.shape)] = stroke.class_id


def rasterize_strokes(
    strokes: list[Stroke], shape: tuple[int, int]
) -> np.ndarray:
    """Replay strokes in order (later wins) into a fresh uint8 raster whose
    untouched pixels stay unlabeled."""
    canvas = np.full(shape, UNLABELED, dtype=np.uint8)
    for stroke in strokes:
        apply_stroke(canvas, stroke)
    return canvas
