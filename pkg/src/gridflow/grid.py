"""Grid data types, coordinate conventions and SE(2) reprojection.

Conventions used throughout the package:

* arrays are indexed ``(row, col)``; ``row`` grows along the world/grid ``y``
  axis (downward in images) and ``col`` along ``x`` (rightward);
* two-channel vector planes (velocities, flows) are stored in ``(x, y)``
  order, i.e. channel 0 is the column component;
* a frame's grid is centred on the ego pose of that frame and rotated by its
  heading, so cell ``(r, c)`` sits at local offset
  ``((c - cx) * cell_size, (r - cy) * cell_size)`` from the ego.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "GridGeometry",
    "Pose2D",
    "OccupancyStateGrid",
    "VelocityGrid",
    "SemanticGrid",
    "FlowGrid",
    "VehicleInstance",
    "Frame",
    "FrameSequence",
    "wrap_angle",
    "world_to_cell",
    "cell_to_world",
    "identity_coords",
    "resample_bilinear",
    "resample",
    "to_allocentric",
]

UNKNOWN_STATE = (0.0, 0.0, 1.0)
# samples this close outside the grid edge are snapped onto it
EDGE_TOL = 1e-9


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    w = math.fmod(theta + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GridGeometry:
    width_cells: int = 240
    height_cells: int = 240
    cell_size_m: float = 0.25
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if int(self.width_cells) <= 0 or int(self.height_cells) <= 0:
            raise ValueError("grid dimensions must be positive")
        if not self.cell_size_m > 0:
            raise ValueError("cell_size_m must be > 0")
        object.__setattr__(self, "width_cells", int(self.width_cells))
        object.__setattr__(self, "height_cells", int(self.height_cells))
        object.__setattr__(self, "cell_size_m", float(self.cell_size_m))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)

    @property
    def extent_m(self) -> tuple[float, float]:
        """Covered extent ``(x, y)`` in meters."""
        return (self.width_cells * self.cell_size_m, self.height_cells * self.cell_size_m)

    @property
    def center_cell(self) -> tuple[float, float]:
        return ((self.height_cells - 1) / 2.0, (self.width_cells - 1) / 2.0)

    @property
    def cell_area_m2(self) -> float:
        return self.cell_size_m ** 2

    def to_dict(self) -> dict:
        return {"width_cells": self.width_cells, "height_cells": self.height_cells,
                "cell_size_m": self.cell_size_m, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridGeometry":
        return cls(d.get("width_cells", 240), d.get("height_cells", 240),
                   d.get("cell_size_m", 0.25), tuple(d.get("origin", (0.0, 0.0))))


@dataclass(frozen=True)
class Pose2D:
    x_m: float = 0.0
    y_m: float = 0.0
    heading_rad: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x_m", float(self.x_m))
        object.__setattr__(self, "y_m", float(self.y_m))
        object.__setattr__(self, "heading_rad", wrap_angle(float(self.heading_rad)))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.heading_rad), math.sin(self.heading_rad)
        return np.array([[c, -s], [s, c]])

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x_m, self.y_m, self.heading_rad)


class _Plane:
    """Immutable wrapper around a stack of grid planes."""

    n_channels: int = 1

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if self.n_channels == 1 and arr.ndim == 3 and arr.shape[0] == 1:
            arr = arr[0]
        expected = 2 if self.n_channels == 1 else 3
        if arr.ndim != expected or (self.n_channels > 1 and arr.shape[0] != self.n_channels):
            raise ValueError(f"{type(self).__name__} expects {self.n_channels} plane(s), got shape {arr.shape}")
        self._data = _frozen(arr)
        self._check()

    def _check(self):
        if not np.all(np.isfinite(self._data)):
            raise ValueError(f"{type(self).__name__} contains non-finite values")

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape[-2:]

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __eq__(self, other):
        return type(self) is type(other) and np.array_equal(self._data, other._data)

    def __repr__(self):
        return f"{type(self).__name__}(shape={self._data.shape})"


class OccupancyStateGrid(_Plane):
    """Per-cell probabilities ``(p_static, p_dynamic, p_unknown)``; free is the residual."""

    n_channels = 3

    def _check(self):
        super()._check()
        d = self._data
        if d.min() < -1e-9 or d.max() > 1 + 1e-9 or d.sum(axis=0).max() > 1 + 1e-9:
            raise ValueError("occupancy state probabilities must lie on the simplex")

    @property
    def p_static(self):
        return self._data[0]

    @property
    def p_dynamic(self):
        return self._data[1]

    @property
    def p_unknown(self):
        return self._data[2]

    @property
    def p_free(self):
        return 1.0 - self._data.sum(axis=0)


class VelocityGrid(_Plane):
    """Per-cell velocity ``(vx, vy)`` in m/s."""

    n_channels = 2


class SemanticGrid(_Plane):
    """Per-cell vehicle occupancy probability."""

    n_channels = 1

    def _check(self):
        super()._check()
        if self._data.min() < -1e-9 or self._data.max() > 1 + 1e-9:
            raise ValueError("semantic probabilities must lie in [0, 1]")


class FlowGrid(_Plane):
    """Backward displacement ``(fx, fy)`` normalized by the grid side in cells."""

    n_channels = 2

    @classmethod
    def from_cells(cls, disp_cells, geometry: GridGeometry) -> "FlowGrid":
        d = np.asarray(disp_cells, dtype=np.float64)
        return cls(np.stack([d[0] / geometry.width_cells, d[1] / geometry.height_cells]))

    def to_cells(self, geometry: GridGeometry) -> np.ndarray:
        return np.stack([self._data[0] * geometry.width_cells, self._data[1] * geometry.height_cells])


@dataclass(frozen=True)
class VehicleInstance:
    id: int
    centroid: tuple[float, float]
    corners: tuple[tuple[float, float], ...]
    dynamic: bool

    def to_dict(self) -> dict:
        return {"id": int(self.id), "centroid": [float(v) for v in self.centroid],
                "corners": [[float(r), float(c)] for r, c in self.corners], "dynamic": bool(self.dynamic)}

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleInstance":
        return cls(int(d["id"]), tuple(d["centroid"]), tuple(tuple(c) for c in d["corners"]), bool(d["dynamic"]))

    def footprint(self, shape: tuple[int, int]) -> np.ndarray:
        """Boolean mask of cells whose centres fall inside the oriented box."""
        return polygon_mask(np.asarray(self.corners), shape)


def polygon_mask(corners: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Cells whose centres lie inside a convex polygon given as ``(row, col)`` corners."""
    h, w = shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    corners = np.asarray(corners, dtype=np.float64)
    n = len(corners)
    signs = []
    for i in range(n):
        r0, c0 = corners[i]
        r1, c1 = corners[(i + 1) % n]
        signs.append((c1 - c0) * (rr - r0) - (r1 - r0) * (cc - c0))
    signs = np.stack(signs)
    eps = 1e-9
    return np.all(signs >= -eps, axis=0) | np.all(signs <= eps, axis=0)


@dataclass(frozen=True)
class Frame:
    timestamp_s: float
    state: OccupancyStateGrid
    velocity: VelocityGrid
    semantic: SemanticGrid
    flow: Optional[FlowGrid]
    pose: Pose2D

    def input_channels(self, v_scale: float = 20.0) -> np.ndarray:
        """The six network input planes; velocities divided by ``v_scale``."""
        return np.concatenate([self.state.data, self.velocity.data / v_scale, self.semantic.data[None]])


@dataclass(frozen=True)
class FrameSequence:
    geometry: GridGeometry
    frames: tuple[Frame, ...]
    instances: tuple[tuple[VehicleInstance, ...], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        inst = tuple(tuple(i) for i in self.instances) if self.instances else tuple(() for _ in self.frames)
        if len(inst) != len(self.frames):
            raise ValueError("instances must have one entry per frame")
        object.__setattr__(self, "instances", inst)
        ts = [f.timestamp_s for f in self.frames]
        if len(ts) > 1:
            steps = np.diff(ts)
            if np.any(steps <= 0):
                raise ValueError("timestamps must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
                raise ValueError("timestamps must have a constant step")
        for f in self.frames:
            for g in (f.state, f.velocity, f.semantic, f.flow):
                if g is not None and g.shape != self.geometry.shape:
                    raise ValueError("all grids in a sequence must share the geometry")

    def __len__(self):
        return len(self.frames)

    @property
    def dt_s(self) -> float:
        if len(self.frames) < 2:
            return 0.5
        return self.frames[1].timestamp_s - self.frames[0].timestamp_s

    def replace_frames(self, frames: Sequence[Frame], instances=None) -> "FrameSequence":
        return replace(self, frames=tuple(frames), instances=self.instances if instances is None else instances)


def world_to_cell(p, g: GridGeometry) -> np.ndarray:
    """Continuous ``(row, col)`` of world point(s) ``(x, y)``; not clamped."""
    p = np.asarray(p, dtype=np.float64)
    cy, cx = g.center_cell
    col = cx + (p[..., 0] - g.origin[0]) / g.cell_size_m
    row = cy + (p[..., 1] - g.origin[1]) / g.cell_size_m
    return np.stack([row, col], axis=-1)


def cell_to_world(rc, g: GridGeometry) -> np.ndarray:
    rc = np.asarray(rc, dtype=np.float64)
    cy, cx = g.center_cell
    x = g.origin[0] + (rc[..., 1] - cx) * g.cell_size_m
    y = g.origin[1] + (rc[..., 0] - cy) * g.cell_size_m
    return np.stack([x, y], axis=-1)


def identity_coords(shape: tuple[int, int]) -> np.ndarray:
    """Coordinate field ``(2, H, W)`` holding each cell's own ``(row, col)``."""
    h, w = shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([rr, cc])


def resample_bilinear(plane, coords, fill: float = 0.0) -> np.ndarray:
    """Sample ``plane`` at continuous ``coords`` (``(2, H', W')`` rows/cols).

    Samples outside ``[0, H-1] x [0, W-1]`` take ``fill``.
    """
    return resample(plane, coords, fill, "bilinear")


def resample(plane, coords, fill: float = 0.0, mode: str = "bilinear") -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    h, w = plane.shape
    r, c = coords[0], coords[1]
    inside = (r >= -EDGE_TOL) & (r <= h - 1 + EDGE_TOL) & (c >= -EDGE_TOL) & (c <= w - 1 + EDGE_TOL)
    r = np.clip(r, 0, h - 1)
    c = np.clip(c, 0, w - 1)
    if mode == "nearest":
        ri = np.clip(np.floor(r + 0.5), 0, h - 1).astype(np.intp)
        ci = np.clip(np.floor(c + 0.5), 0, w - 1).astype(np.intp)
        return np.where(inside, plane[ri, ci], fill)
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    r_safe = np.where(inside, r, 0.0)
    c_safe = np.where(inside, c, 0.0)
    r0 = np.floor(r_safe)
    c0 = np.floor(c_safe)
    ar = r_safe - r0
    ac = c_safe - c0
    r0 = r0.astype(np.intp)
    c0 = c0.astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = plane[r0, c0] * (1.0 - ac) + plane[r0, c1] * ac
    bot = plane[r1, c0] * (1.0 - ac) + plane[r1, c1] * ac
    out = top * (1.0 - ar) + bot * ar
    return np.where(inside, out, fill)


def _frame_to_anchor_coords(geometry: GridGeometry, src: Pose2D, anchor: Pose2D) -> np.ndarray:
    """For each anchor-frame cell, the continuous cell coordinate in the source frame."""
    cs = geometry.cell_size_m
    cy, cx = geometry.center_cell
    base = identity_coords(geometry.shape)
    local = np.stack([(base[1] - cx) * cs, (base[0] - cy) * cs])  # (x, y)
    world = np.einsum("ij,jhw->ihw", anchor.rotation(), local)
    world[0] += anchor.x_m
    world[1] += anchor.y_m
    world[0] -= src.x_m
    world[1] -= src.y_m
    src_local = np.einsum("ij,jhw->ihw", src.rotation().T, world)
    return np.stack([src_local[1] / cs + cy, src_local[0] / cs + cx])


def _points_to_anchor(rc: np.ndarray, geometry: GridGeometry, src: Pose2D, anchor: Pose2D) -> np.ndarray:
    cs = geometry.cell_size_m
    cy, cx = geometry.center_cell
    rc = np.asarray(rc, dtype=np.float64)
    local = np.stack([(rc[..., 1] - cx) * cs, (rc[..., 0] - cy) * cs], axis=-1)
    world = local @ src.rotation().T + np.array([src.x_m, src.y_m])
    a_local = (world - np.array([anchor.x_m, anchor.y_m])) @ anchor.rotation()
    return np.stack([a_local[..., 1] / cs + cy, a_local[..., 0] / cs + cx], axis=-1)


def _rotate_vectors(v: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.stack([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def to_allocentric(seq: FrameSequence, anchor: Pose2D, mode: str = "bilinear") -> FrameSequence:
    """Reproject every frame of ``seq`` into the frame of ``anchor``.

    Unobserved area is filled with the unknown state; semantic, velocity and
    flow planes are filled with zero. Vector planes are rotated by the
    relative heading and instance annotations are moved along.
    """
    g = seq.geometry
    frames, instances = [], []
    for frame, inst in zip(seq.frames, seq.instances):
        coords = _frame_to_anchor_coords(g, frame.pose, anchor)
        dtheta = frame.pose.heading_rad - anchor.heading_rad
        state = np.stack([resample(frame.state.data[k], coords, UNKNOWN_STATE[k], mode) for k in range(3)])
        state = np.clip(state, 0.0, 1.0)
        total = state.sum(axis=0)
        state = np.where(total > 1.0, state / np.maximum(total, 1e-12), state)
        vel = np.stack([resample(frame.velocity.data[k], coords, 0.0, mode) for k in range(2)])
        vel = _rotate_vectors(vel, dtheta)
        sem = np.clip(resample(frame.semantic.data, coords, 0.0, mode), 0.0, 1.0)
        flow = None
        if frame.flow is not None:
            cells = frame.flow.to_cells(g)
            cells = np.stack([resample(cells[k], coords, 0.0, mode) for k in range(2)])
            flow = FlowGrid.from_cells(_rotate_vectors(cells, dtheta), g)
        frames.append(Frame(frame.timestamp_s, OccupancyStateGrid(state), VelocityGrid(vel),
                            SemanticGrid(sem), flow, anchor))
        moved = []
        for vi in inst:
            centroid = _points_to_anchor(np.array(vi.centroid), g, frame.pose, anchor)
            corners = _points_to_anchor(np.array(vi.corners), g, frame.pose, anchor)
            moved.append(VehicleInstance(vi.id, tuple(centroid.tolist()),
                                         tuple(tuple(c) for c in corners.tolist()), vi.dynamic))
        instances.append(tuple(moved))
    return FrameSequence(g, tuple(frames), tuple(instances))
