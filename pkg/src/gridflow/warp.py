"""Backward-flow warping of semantic grids and its recursive rollout."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .grid import EDGE_TOL, identity_coords, resample


@dataclass(frozen=True)
class WarpConfig:
    interpolation: str = "bilinear"
    out_of_bounds_fill: float = 0.0
    clamp_output: bool = True

    def __post_init__(self):
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if self.clamp_output and not 0.0 <= self.out_of_bounds_fill <= 1.0:
            raise ValueError("fill must lie in [0, 1] when clamping")


DEFAULT_WARP = WarpConfig()


def source_coords(flow) -> np.ndarray:
    """Continuous ``(row, col)`` each cell pulls from under a normalized backward flow."""
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[-2:]
    base = identity_coords((h, w))
    return np.stack([base[0] + flow[1] * h, base[1] + flow[0] * w])


def warp(w, f, cfg: WarpConfig = DEFAULT_WARP) -> np.ndarray:
    """Warp semantic grid ``w`` with normalized backward flow ``f`` (``(fx, fy)`` planes)."""
    w = np.asarray(w, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (2,) + w.shape:
        raise ValueError(f"geometry mismatch: grid {w.shape} vs flow {f.shape}")
    out = resample(w, source_coords(f), cfg.out_of_bounds_fill, cfg.interpolation)
    if cfg.clamp_output:
        out = np.clip(out, 0.0, 1.0)
    return out


def warp_rollout(w0, flows: Sequence, cfg: WarpConfig = DEFAULT_WARP) -> list[np.ndarray]:
    """Apply ``warp`` recursively: each output feeds the next step."""
    out = []
    current = np.asarray(w0, dtype=np.float64)
    for f in flows:
        current = warp(current, f, cfg)
        out.append(current)
    return out


def warp_tensor(w: torch.Tensor, f: torch.Tensor, cfg: WarpConfig = DEFAULT_WARP) -> torch.Tensor:
    """Differentiable batched ``warp``: ``w (B,H,W)``, ``f (B,2,H,W)``.

    Same sampling rule as the numpy path; gradients flow into both the grid
    and (for bilinear sampling) the flow.
    """
    if f.shape[-3:] != (2,) + tuple(w.shape[-2:]) or f.shape[0] != w.shape[0]:
        raise ValueError(f"geometry mismatch: grid {tuple(w.shape)} vs flow {tuple(f.shape)}")
    b, h, wd = w.shape
    rows = torch.arange(h, dtype=w.dtype, device=w.device).view(1, h, 1)
    cols = torch.arange(wd, dtype=w.dtype, device=w.device).view(1, 1, wd)
    r = rows + f[:, 1] * h
    c = cols + f[:, 0] * wd
    inside = (r >= -EDGE_TOL) & (r <= h - 1 + EDGE_TOL) & (c >= -EDGE_TOL) & (c <= wd - 1 + EDGE_TOL)
    r = r.clamp(0, h - 1)
    c = c.clamp(0, wd - 1)
    flat = w.reshape(b, -1)

    def gather(ri, ci):
        return flat.gather(1, (ri * wd + ci).reshape(b, -1)).reshape(b, h, wd)

    if cfg.interpolation == "nearest":
        ri = torch.floor(r.detach() + 0.5).clamp(0, h - 1).long()
        ci = torch.floor(c.detach() + 0.5).clamp(0, wd - 1).long()
        out = gather(ri, ci)
    else:
        zero = torch.zeros_like(r)
        r_s = torch.where(inside, r, zero)
        c_s = torch.where(inside, c, zero)
        r0 = torch.floor(r_s.detach())
        c0 = torch.floor(c_s.detach())
        ar = r_s - r0
        ac = c_s - c0
        r0i = r0.long()
        c0i = c0.long()
        r1i = (r0i + 1).clamp(max=h - 1)
        c1i = (c0i + 1).clamp(max=wd - 1)
        top = gather(r0i, c0i) * (1 - ac) + gather(r0i, c1i) * ac
        bot = gather(r1i, c0i) * (1 - ac) + gather(r1i, c1i) * ac
        out = top * (1 - ar) + bot * ar
    out = torch.where(inside, out, torch.full_like(out, cfg.out_of_bounds_fill))
    if cfg.clamp_output:
        out = out.clamp(0.0, 1.0)
    return out


def warp_rollout_tensor(w0: torch.Tensor, flows: torch.Tensor, cfg: WarpConfig = DEFAULT_WARP) -> torch.Tensor:
    """Recursive warp over ``flows (B,P,2,H,W)``; returns ``(B,P,H,W)``."""
    out = []
    current = w0
    for k in range(flows.shape[1]):
        current = warp_tensor(current, flows[:, k], cfg)
        out.append(current)
    if not out:
        return w0.new_zeros((w0.shape[0], 0) + tuple(w0.shape[1:]))
    return torch.stack(out, dim=1)
