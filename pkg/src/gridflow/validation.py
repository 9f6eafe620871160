"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

from typing import Optional

import numpy as np

N_INPUT_CHANNELS = 6
N_TARGET_CHANNELS = 3


def check_windows(X, n_input: Optional[int] = None, dtype=np.float32) -> np.ndarray:
    """Validate input windows ``(n, N+1, 6, H, W)`` and return them as a contiguous array."""
    X = np.asarray(X)
    if X.ndim != 5:
        raise ValueError(f"expected windows shaped (n, T, 6, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no windows given")
    if X.shape[2] != N_INPUT_CHANNELS:
        raise ValueError(f"expected {N_INPUT_CHANNELS} input channels, got {X.shape[2]}")
    if n_input is not None and X.shape[1] != n_input:
        raise ValueError(f"expected {n_input} input frames, got {X.shape[1]}")
    X = np.ascontiguousarray(X, dtype=dtype)
    if not np.all(np.isfinite(X)):
        raise ValueError("input windows contain non-finite values")
    return X


def check_targets(y, X: np.ndarray, horizon: Optional[int] = None, dtype=np.float32) -> np.ndarray:
    """Validate targets ``(n, P+1, 3, H, W)`` against windows ``X``."""
    y = np.asarray(y)
    if y.ndim != 5 or y.shape[2] != N_TARGET_CHANNELS:
        raise ValueError(f"expected targets shaped (n, P+1, 3, H, W), got {y.shape}")
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"targets cover {y.shape[0]} windows, inputs {X.shape[0]}")
    if y.shape[-2:] != X.shape[-2:]:
        raise ValueError(f"target grid {y.shape[-2:]} does not match input grid {X.shape[-2:]}")
    if horizon is not None and y.shape[1] != horizon + 1:
        raise ValueError(f"expected horizon {horizon} (+1 current frame), got {y.shape[1]} target frames")
    y = np.ascontiguousarray(y, dtype=dtype)
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain non-finite values")
    sem = y[:, :, 0]
    if sem.min() < 0 or sem.max() > 1:
        raise ValueError("semantic targets must lie in [0, 1]")
    return y
