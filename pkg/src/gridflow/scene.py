"""Synthetic dynamic-occupancy-grid scenes with ground-truth backward flow."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import (
    FlowGrid,
    Frame,
    FrameSequence,
    GridGeometry,
    OccupancyStateGrid,
    Pose2D,
    SemanticGrid,
    VehicleInstance,
    VelocityGrid,
    polygon_mask,
)

MOTIONS = ("constant_velocity", "constant_turn", "parked")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleSpec:
    id: int
    length_m: float = 4.0
    width_m: float = 2.0
    x_m: float = 0.0
    y_m: float = 0.0
    heading_rad: float = 0.0
    motion: str = "parked"
    speed: float = 0.0
    yaw_rate: float = 0.0

    def __post_init__(self):
        if self.motion not in MOTIONS:
            raise ScenarioError(f"unknown motion {self.motion!r}")
        if self.length_m <= 0 or self.width_m <= 0:
            raise ScenarioError("vehicle dimensions must be positive")
        if self.speed < 0:
            raise ScenarioError("speed must be non-negative")
        if self.motion == "parked" and self.speed != 0:
            raise ScenarioError("parked vehicles must have zero speed")

    @property
    def dynamic(self) -> bool:
        return self.motion != "parked" and self.speed > 0

    def pose_at(self, t: float) -> Pose2D:
        x, y, h = self.x_m, self.y_m, self.heading_rad
        v, w = self.speed, self.yaw_rate
        if self.motion == "parked":
            return Pose2D(x, y, h)
        if self.motion == "constant_turn" and abs(w) > 1e-12:
            h1 = h + w * t
            return Pose2D(x + v / w * (math.sin(h1) - math.sin(h)),
                          y - v / w * (math.cos(h1) - math.cos(h)), h1)
        return Pose2D(x + v * t * math.cos(h), y + v * t * math.sin(h), h)

    def velocity_at(self, t: float) -> tuple[float, float]:
        h = self.pose_at(t).heading_rad
        return (self.speed * math.cos(h), self.speed * math.sin(h))

    def corners_at(self, t: float) -> np.ndarray:
        """World ``(x, y)`` corners of the footprint, counter-clockwise."""
        p = self.pose_at(t)
        hl, hw = self.length_m / 2.0, self.width_m / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return local @ p.rotation().T + np.array([p.x_m, p.y_m])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("id", "length_m", "width_m", "x_m", "y_m",
                                             "heading_rad", "motion", "speed", "yaw_rate")}

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleSpec":
        return cls(**d)


@dataclass(frozen=True)
class ObstacleSpec:
    x_m: float
    y_m: float
    length_m: float = 1.0
    width_m: float = 1.0
    heading_rad: float = 0.0

    def corners(self) -> np.ndarray:
        spec = VehicleSpec(-1, self.length_m, self.width_m, self.x_m, self.y_m, self.heading_rad)
        return spec.corners_at(0.0)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("x_m", "y_m", "length_m", "width_m", "heading_rad")}


@dataclass(frozen=True)
class SensorNoise:
    flip_prob: float = 0.0
    velocity_sigma: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    n_frames: int = 7
    geometry: GridGeometry = field(default_factory=GridGeometry)
    vehicles: tuple[VehicleSpec, ...] = ()
    static_obstacles: tuple[ObstacleSpec, ...] = ()
    ego: VehicleSpec = field(default_factory=lambda: VehicleSpec(-1))
    sensor_noise: SensorNoise = field(default_factory=SensorNoise)
    dt_s: float = 0.5
    v_max: float = 20.0
    confidence: float = 0.95
    occlusion: bool = True

    def validate(self, n_input: int = 3, horizon: int = 4) -> None:
        need = n_input + horizon
        if self.n_frames < need:
            raise ScenarioError(f"n_frames={self.n_frames} is too short: need at least {need} "
                                f"({n_input} input + {horizon} future frames)")
        if self.dt_s <= 0:
            raise ScenarioError("dt_s must be positive")
        ids = [v.id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ScenarioError("vehicle ids must be unique")
        h, w = self.geometry.shape
        ego0 = self.ego.pose_at(0.0)
        for v in self.vehicles:
            if v.speed > self.v_max:
                raise ScenarioError(f"vehicle {v.id}: speed {v.speed} exceeds v_max {self.v_max}")
            r, c = world_to_frame_cells(np.array([v.x_m, v.y_m]), self.geometry, ego0)
            if not (-0.5 <= r <= h - 0.5 and -0.5 <= c <= w - 0.5):
                raise ScenarioError(f"vehicle {v.id} starts outside the grid")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "n_frames": self.n_frames, "geometry": self.geometry.to_dict(),
            "vehicles": [v.to_dict() for v in self.vehicles],
            "static_obstacles": [o.to_dict() for o in self.static_obstacles],
            "ego": self.ego.to_dict(),
            "sensor_noise": {"flip_prob": self.sensor_noise.flip_prob,
                             "velocity_sigma": self.sensor_noise.velocity_sigma},
            "dt_s": self.dt_s, "v_max": self.v_max, "confidence": self.confidence,
            "occlusion": self.occlusion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        kw = {}
        for key in ("seed", "n_frames", "dt_s", "v_max", "confidence", "occlusion"):
            if key in d:
                kw[key] = d[key]
        if "geometry" in d:
            kw["geometry"] = GridGeometry.from_dict(d["geometry"])
        kw["vehicles"] = tuple(VehicleSpec.from_dict(v) for v in d.get("vehicles", ()))
        kw["static_obstacles"] = tuple(ObstacleSpec(**o) for o in d.get("static_obstacles", ()))
        if "ego" in d:
            kw["ego"] = VehicleSpec.from_dict({"id": -1, **d["ego"]})
        if "sensor_noise" in d:
            kw["sensor_noise"] = SensorNoise(**d["sensor_noise"])
        return cls(**kw)


def world_to_frame_cells(points, geometry: GridGeometry, pose: Pose2D) -> np.ndarray:
    """World ``(x, y)`` points to continuous ``(row, col)`` in a frame centred on ``pose``."""
    pts = np.asarray(points, dtype=np.float64)
    local = (pts - np.array([pose.x_m, pose.y_m])) @ pose.rotation()
    cy, cx = geometry.center_cell
    cs = geometry.cell_size_m
    return np.stack([local[..., 1] / cs + cy, local[..., 0] / cs + cx], axis=-1)


def shadow_mask(occupied: np.ndarray, origin_rc: tuple[float, float]) -> np.ndarray:
    """Cells hidden from ``origin_rc`` behind occupied cells (2D ray cast)."""
    h, w = occupied.shape
    if not occupied.any():
        return np.zeros_like(occupied, dtype=bool)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    r0, c0 = origin_rc
    dist = np.hypot(rr - r0, cc - c0)
    n_steps = int(np.ceil(dist.max() * 2)) + 1
    hidden = np.zeros((h, w), dtype=bool)
    ti = np.arange(1, n_steps) / n_steps
    target_r = np.rint(rr).astype(np.intp)
    target_c = np.rint(cc).astype(np.intp)
    for t in ti:
        sr = r0 + t * (rr - r0)
        sc = c0 + t * (cc - c0)
        ir = np.clip(np.floor(sr + 0.5).astype(np.intp), 0, h - 1)
        ic = np.clip(np.floor(sc + 0.5).astype(np.intp), 0, w - 1)
        own = (ir == target_r) & (ic == target_c)
        hidden |= occupied[ir, ic] & ~own
    return hidden


def _frame_rngs(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def render_frame(cfg: ScenarioConfig, k: int, rng: np.random.Generator):
    g = cfg.geometry
    shape = g.shape
    t = k * cfg.dt_s
    ego = cfg.ego.pose_at(t)
    static = np.zeros(shape, dtype=bool)
    dynamic = np.zeros(shape, dtype=bool)
    semantic = np.zeros(shape)
    vel = np.zeros((2,) + shape)
    instances = []
    rot = -ego.heading_rad
    c, s = math.cos(rot), math.sin(rot)
    for obs in cfg.static_obstacles:
        static |= polygon_mask(world_to_frame_cells(obs.corners(), g, ego), shape)
    for v in cfg.vehicles:
        corners = world_to_frame_cells(v.corners_at(t), g, ego)
        centroid = world_to_frame_cells(np.array(v.pose_at(t).as_tuple()[:2]), g, ego)
        mask = polygon_mask(corners, shape)
        semantic[mask] = 1.0
        if v.dynamic:
            dynamic |= mask
            vx, vy = v.velocity_at(t)
            vel[0][mask] = c * vx - s * vy
            vel[1][mask] = s * vx + c * vy
        else:
            static |= mask
        h, w = shape
        if -0.5 <= centroid[0] <= h - 0.5 and -0.5 <= centroid[1] <= w - 0.5:
            instances.append(VehicleInstance(v.id, tuple(centroid.tolist()),
                                             tuple(tuple(p) for p in corners.tolist()), v.dynamic))
    static &= ~dynamic
    occupied = static | dynamic
    unknown = shadow_mask(occupied, g.center_cell) & ~occupied if cfg.occlusion else np.zeros(shape, bool)

    # 0 free, 1 static, 2 dynamic, 3 unknown
    label = np.zeros(shape, dtype=np.int8)
    label[static] = 1
    label[dynamic] = 2
    label[unknown] = 3
    noise = cfg.sensor_noise
    if noise.flip_prob > 0:
        flips = rng.random(shape) < noise.flip_prob
        offset = rng.integers(1, 4, size=shape, dtype=np.int8)
        label = np.where(flips, (label + offset) % 4, label).astype(np.int8)
    conf = cfg.confidence
    state = np.zeros((3,) + shape)
    state[0][label == 1] = conf
    state[1][label == 2] = conf
    state[2][label == 3] = conf
    vel[:, label != 2] = 0.0
    if noise.velocity_sigma > 0:
        jitter = rng.normal(0.0, noise.velocity_sigma, size=(2,) + shape)
        vel = vel + np.where(label == 2, jitter, 0.0)
    speed = np.hypot(vel[0], vel[1])
    scale = np.where(speed > cfg.v_max, cfg.v_max / np.maximum(speed, 1e-12), 1.0)
    vel = vel * scale
    frame = Frame(t, OccupancyStateGrid(state), VelocityGrid(vel), SemanticGrid(semantic), None, ego)
    return frame, tuple(instances)


def simulate(cfg: ScenarioConfig, n_input: int = 3, horizon: int = 4) -> FrameSequence:
    """Render every frame of a scenario; deterministic for a fixed config."""
    cfg.validate(n_input, horizon)
    rngs = _frame_rngs(cfg.seed, cfg.n_frames)
    rendered = [render_frame(cfg, k, rngs[k]) for k in range(cfg.n_frames)]
    return FrameSequence(cfg.geometry, tuple(f for f, _ in rendered), tuple(i for _, i in rendered))


def ground_truth_flow(seq: FrameSequence, fill_vacated: bool = True) -> FrameSequence:
    """Fill backward flow for frames ``1..end`` from instance centroid displacements.

    Every footprint cell of a vehicle at ``t+1`` gets ``centroid_t - centroid_{t+1}``
    in cells, normalized by the grid side. With ``fill_vacated`` the cells the
    vehicle left behind also carry its displacement, so warping pulls free
    space into them instead of duplicating the vehicle.
    """
    g = seq.geometry
    shape = g.shape
    frames = [seq.frames[0]]
    for k in range(1, len(seq.frames)):
        prev = {vi.id: vi for vi in seq.instances[k - 1]}
        disp = np.zeros((2,) + shape)
        covered = np.zeros(shape, dtype=bool)
        wake = []
        for vi in seq.instances[k]:
            mask = vi.footprint(shape)
            before = prev.get(vi.id)
            if before is None:
                covered |= mask
                continue
            d_row = before.centroid[0] - vi.centroid[0]
            d_col = before.centroid[1] - vi.centroid[1]
            disp[0][mask] = d_col
            disp[1][mask] = d_row
            covered |= mask
            if fill_vacated and (d_row or d_col):
                wake.append((before.footprint(shape), d_col, d_row))
        for old, d_col, d_row in wake:
            vacated = old & ~covered
            disp[0][vacated] = d_col
            disp[1][vacated] = d_row
        frames.append(replace(seq.frames[k], flow=FlowGrid.from_cells(disp, g)))
    return seq.replace_frames(frames)


def random_scenario(seed: int, geometry: GridGeometry | None = None, n_frames: int = 7,
                    n_vehicles: tuple[int, int] = (1, 4), speed_range: tuple[float, float] = (1.0, 3.0),
                    yaw_rate_range: tuple[float, float] = (0.2, 0.5), p_parked: float = 0.3,
                    p_turn: float = 0.3, length_range: tuple[float, float] = (3.5, 4.5),
                    width_range: tuple[float, float] = (1.6, 2.0), sensor_noise: SensorNoise | None = None,
                    dt_s: float = 0.5, occlusion: bool = True) -> ScenarioConfig:
    """Draw a scenario with non-overlapping vehicles near the grid centre."""
    geometry = geometry or GridGeometry(24, 24, 0.5)
    rng = np.random.default_rng(seed)
    ex, ey = geometry.extent_m
    n = int(rng.integers(n_vehicles[0], n_vehicles[1] + 1))
    vehicles: list[VehicleSpec] = []
    placed: list[np.ndarray] = []
    for vid in range(n):
        for _ in range(50):
            u = rng.random()
            motion = "parked" if u < p_parked else ("constant_turn" if u < p_parked + p_turn else "constant_velocity")
            speed = 0.0 if motion == "parked" else float(rng.uniform(*speed_range))
            yaw = float(rng.choice([-1, 1]) * rng.uniform(*yaw_rate_range)) if motion == "constant_turn" else 0.0
            heading = float(rng.uniform(-math.pi, math.pi))
            # moving vehicles start upstream so they cross the grid centre
            back = speed * dt_s * (n_frames - 1) / 2.0
            cx = float(rng.uniform(-0.25, 0.25) * ex) - back * math.cos(heading)
            cy = float(rng.uniform(-0.25, 0.25) * ey) - back * math.sin(heading)
            if abs(cx) > 0.45 * ex or abs(cy) > 0.45 * ey:
                continue
            spec = VehicleSpec(vid, float(rng.uniform(*length_range)), float(rng.uniform(*width_range)),
                               cx, cy, heading, motion, speed, yaw)
            box = spec.corners_at(0.0)
            if any(_boxes_overlap(box, other) for other in placed):
                continue
            vehicles.append(spec)
            placed.append(box)
            break
    return ScenarioConfig(seed=seed, n_frames=n_frames, geometry=geometry, vehicles=tuple(vehicles),
                          sensor_noise=sensor_noise or SensorNoise(), dt_s=dt_s, occlusion=occlusion)


def _boxes_overlap(a: np.ndarray, b: np.ndarray, margin: float = 0.5) -> bool:
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    ra = np.max(np.linalg.norm(a - ca, axis=1))
    rb = np.max(np.linalg.norm(b - cb, axis=1))
    return float(np.linalg.norm(ca - cb)) < ra + rb + margin
