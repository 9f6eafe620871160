"""Non-learned predictors: constant-velocity flow and zero-flow persistence."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .warp import DEFAULT_WARP, WarpConfig, warp_rollout


@dataclass
class GridPrediction:
    """Numpy prediction bundle for ``n`` windows.

    ``y_now (n,H,W)``, ``y_future``/``w_future (n,P,H,W)``, ``f_future (n,P,2,H,W)``,
    latent moments ``(n,L)``.
    """

    y_now: np.ndarray
    y_future: np.ndarray
    f_future: np.ndarray
    w_future: np.ndarray
    mu_present: np.ndarray
    log_var_present: np.ndarray
    mu_future: Optional[np.ndarray] = None
    log_var_future: Optional[np.ndarray] = None

    def __len__(self):
        return self.y_now.shape[0]

    def __getitem__(self, i) -> "GridPrediction":
        def pick(a):
            return None if a is None else a[i:i + 1]
        return GridPrediction(*(pick(getattr(self, f)) for f in self.__dataclass_fields__))


def _round(x):
    return np.floor(x + 0.5)


_RING = tuple((a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0))


def constant_velocity_flows(inputs: np.ndarray, horizon: int, dt_s: float, cell_size_m: float,
                            v_scale: float = 20.0, semantic_threshold: float = 0.5,
                            dynamic_threshold: float = 0.5) -> np.ndarray:
    """Per-step backward flows ``(P, 2, H, W)`` from the latest frame's velocities.

    Each moving vehicle cell is advanced by ``k * v * dt``; the cell it lands on
    and the cell it left at the previous step both receive the backward step
    ``-v * dt`` so the rollout moves the vehicle and pulls free space into its wake.
    Unclaimed cells bordering those get the same step, which keeps the flow
    uniform across the blurred edge of the warped vehicle.
    """
    latest = np.asarray(inputs, dtype=np.float64)[-1]
    h, w = latest.shape[-2:]
    sem, p_dyn = latest[5], latest[1]
    vel = latest[3:5] * v_scale
    moving = (sem >= semantic_threshold) & (p_dyn >= dynamic_threshold) & (np.hypot(vel[0], vel[1]) > 0)
    rs, cs = np.nonzero(moving)
    u_col = vel[0][moving] * dt_s / cell_size_m
    u_row = vel[1][moving] * dt_s / cell_size_m
    flows = np.zeros((horizon, 2, h, w))

    def paint(k, r, c, keep=None):
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        if keep is not None:
            ok[ok] &= ~keep[r[ok], c[ok]]
        flows[k - 1, 0, r[ok], c[ok]] = -u_col[ok] / w
        flows[k - 1, 1, r[ok], c[ok]] = -u_row[ok] / h
        return r[ok], c[ok]

    for k in range(1, horizon + 1):
        core = np.zeros((h, w), dtype=bool)
        cells = []
        for step in (k - 1, k):
            r = _round(rs + step * u_row).astype(np.intp)
            c = _round(cs + step * u_col).astype(np.intp)
            core[paint(k, r, c)] = True
            cells.append((r, c))
        for dr, dc in _RING:
            for r, c in cells:
                paint(k, r + dr, c + dc, keep=core)
    return flows


def _bundle(y_now, flows_list, warp_cfg, latent_dim) -> GridPrediction:
    n = len(y_now)
    w_future = np.stack([np.stack(warp_rollout(y, f, warp_cfg)) for y, f in zip(y_now, flows_list)])
    f_future = np.stack(flows_list)
    zeros = np.zeros((n, latent_dim))
    return GridPrediction(np.asarray(y_now), w_future.copy(), f_future, w_future, zeros, zeros.copy())


def baseline_constant_velocity(X, horizon: int, dt_s: float, cell_size_m: float, v_scale: float = 20.0,
                               flows=None, warp_cfg: WarpConfig = DEFAULT_WARP,
                               latent_dim: int = 8) -> GridPrediction:
    """Constant-velocity prediction for windows ``X (n, N+1, 6, H, W)``.

    ``flows (n, P, 2, H, W)`` replaces the velocity-derived flows when given.
    """
    X = np.asarray(X, dtype=np.float64)
    y_now = X[:, -1, 5]
    if flows is None:
        flows_list = [constant_velocity_flows(x, horizon, dt_s, cell_size_m, v_scale) for x in X]
    else:
        flows_list = list(np.asarray(flows, dtype=np.float64))
    return _bundle(y_now, flows_list, warp_cfg, latent_dim)


def baseline_persistence(X, horizon: int, warp_cfg: WarpConfig = DEFAULT_WARP, latent_dim: int = 8) -> GridPrediction:
    """Zero-flow persistence: every future grid equals the latest semantic input."""
    X = np.asarray(X, dtype=np.float64)
    y_now = X[:, -1, 5]
    h, w = y_now.shape[-2:]
    flows_list = [np.zeros((horizon, 2, h, w)) for _ in y_now]
    return _bundle(y_now, flows_list, warp_cfg, latent_dim)
