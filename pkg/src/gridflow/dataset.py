"""Input/target windows cut from frame sequences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .grid import FrameSequence, GridGeometry, VehicleInstance, to_allocentric
from .scene import ground_truth_flow

INPUT_CHANNELS = ("p_static", "p_dynamic", "p_unknown", "vx", "vy", "semantic")
TARGET_CHANNELS = ("semantic", "fx", "fy")


@dataclass(frozen=True)
class Window:
    """One prediction problem.

    ``inputs`` is ``(N+1, 6, H, W)`` with velocities divided by ``v_scale``;
    ``targets`` is ``(P+1, 3, H, W)``: index 0 holds the current semantic grid
    (flow planes zero), indices ``1..P`` the future semantics and backward flows.
    """

    inputs: np.ndarray
    targets: np.ndarray
    current_instances: tuple[VehicleInstance, ...]
    future_instances: tuple[tuple[VehicleInstance, ...], ...]
    geometry: GridGeometry
    dt_s: float
    v_scale: float
    source: str = ""
    start: int = 0

    @property
    def horizon(self) -> int:
        return self.targets.shape[0] - 1


def _same_pose(a, b) -> bool:
    return a.as_tuple() == b.as_tuple()


def make_windows(seq: FrameSequence, n_input: int = 3, horizon: int = 4, stride: int = 1,
                 allocentric: bool = True, v_scale: float = 20.0, source: str = "",
                 fill_vacated: bool = True) -> list[Window]:
    """Slide over ``seq``; each window is reprojected to its latest input pose
    and gets ground-truth flow computed in that fixed frame."""
    n = n_input + horizon
    out = []
    for s in range(0, len(seq) - n + 1, stride):
        sub = FrameSequence(seq.geometry, seq.frames[s:s + n], seq.instances[s:s + n])
        anchor = sub.frames[n_input - 1].pose
        if allocentric and not all(_same_pose(f.pose, anchor) for f in sub.frames):
            sub = to_allocentric(sub, anchor)
        sub = ground_truth_flow(sub, fill_vacated=fill_vacated)
        inputs = np.stack([f.input_channels(v_scale) for f in sub.frames[:n_input]])
        h, w = seq.geometry.shape
        targets = np.zeros((horizon + 1, 3, h, w))
        targets[0, 0] = sub.frames[n_input - 1].semantic.data
        for k in range(1, horizon + 1):
            fr = sub.frames[n_input - 1 + k]
            targets[k, 0] = fr.semantic.data
            targets[k, 1:] = fr.flow.data
        out.append(Window(inputs, targets, sub.instances[n_input - 1], tuple(sub.instances[n_input:]),
                          seq.geometry, seq.dt_s, v_scale, source, s))
    return out


def stack_windows(windows: Sequence[Window], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Arrays ``X (n, N+1, 6, H, W)`` and ``y (n, P+1, 3, H, W)``."""
    if not windows:
        raise ValueError("no windows to stack")
    X = np.stack([w.inputs for w in windows]).astype(dtype)
    y = np.stack([w.targets for w in windows]).astype(dtype)
    return X, y


def windows_from_sequences(seqs: Iterable[FrameSequence], **kw) -> list[Window]:
    out = []
    for i, seq in enumerate(seqs):
        out.extend(make_windows(seq, source=str(i), **kw))
    return out
