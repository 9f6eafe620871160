import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gridflow.warp import WarpConfig, warp, warp_rollout, warp_rollout_tensor, warp_tensor


def uniform_flow(shape, dx_cells, dy_cells):
    h, w = shape
    f = np.zeros((2, h, w))
    f[0] = dx_cells / w
    f[1] = dy_cells / h
    return f


def test_zero_flow_is_exact_identity():
    w = np.random.default_rng(0).random((16, 16))
    assert np.array_equal(warp(w, np.zeros((2, 16, 16))), w)


def test_single_cell_pull_from_right():
    w = np.zeros((12, 12))
    w[5, 5] = 1.0
    out = warp(w, uniform_flow(w.shape, 1, 0))
    assert out[5, 4] == 1.0
    assert out.sum() == 1.0


def test_off_grid_flow_gives_fill():
    w = np.random.default_rng(1).random((8, 8))
    out = warp(w, uniform_flow(w.shape, 50, 0), WarpConfig(out_of_bounds_fill=0.25))
    assert np.all(out == 0.25)


def test_geometry_mismatch_raises():
    with pytest.raises(ValueError):
        warp(np.zeros((8, 8)), np.zeros((2, 8, 9)))


def test_integer_shift_is_exact():
    w = np.random.default_rng(2).random((16, 16))
    out = warp(w, uniform_flow(w.shape, 3, -2))
    assert np.array_equal(out[2:, :13], w[:14, 3:])


def test_rollout_composes_integer_shifts():
    w = np.random.default_rng(3).random((20, 20))
    outs = warp_rollout(w, [uniform_flow(w.shape, 1, 0)] * 2)
    single = warp(w, uniform_flow(w.shape, 2, 0))
    assert np.max(np.abs(outs[1][2:-2, 2:-2] - single[2:-2, 2:-2])) <= 1e-6


def test_rollout_zero_flows_and_empty():
    w = np.random.default_rng(4).random((10, 10))
    assert all(np.array_equal(o, w) for o in warp_rollout(w, [np.zeros((2, 10, 10))] * 3))
    assert warp_rollout(w, []) == []


def test_rollout_matches_manual_loop():
    rng = np.random.default_rng(5)
    w = rng.random((16, 16))
    yy, xx = np.mgrid[0:16, 0:16] / 16.0
    flows = [np.stack([0.05 * np.sin(2 * np.pi * (yy + k / 4)), 0.04 * np.cos(2 * np.pi * xx)]) for k in range(4)]
    outs = warp_rollout(w, flows)
    current = w
    for k, f in enumerate(flows):
        current = warp(current, f)
        assert np.array_equal(outs[k], current)


def test_fractional_uniform_shift_conserves_mass():
    w = np.zeros((24, 24))
    w[8:14, 9:15] = np.random.default_rng(6).random((6, 6))
    out = warp(w, uniform_flow(w.shape, 1.3, -0.7))
    assert abs(out.sum() - w.sum()) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_mass_bound_for_uniform_flows(dx, dy, seed):
    w = np.random.default_rng(seed).random((12, 12))
    out = warp(w, uniform_flow(w.shape, dx, dy), WarpConfig(clamp_output=False))
    assert out.sum() <= w.sum() + 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_clamped_output_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    w = rng.random((10, 10))
    f = rng.normal(scale=scale, size=(2, 10, 10))
    out = warp(w, f)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_nearest_mode_integer_shift():
    w = np.random.default_rng(7).random((10, 10))
    out = warp(w, uniform_flow(w.shape, 1.2, 0), WarpConfig(interpolation="nearest"))
    assert np.array_equal(out[:, :8], w[:, 1:9])


def test_fill_must_be_probability_when_clamping():
    with pytest.raises(ValueError):
        WarpConfig(out_of_bounds_fill=2.0)


@pytest.mark.parametrize("mode", ["bilinear", "nearest"])
def test_tensor_path_matches_numpy(mode):
    rng = np.random.default_rng(8)
    cfg = WarpConfig(interpolation=mode)
    w = rng.random((3, 14, 14))
    f = rng.normal(scale=0.1, size=(3, 2, 14, 14))
    got = warp_tensor(torch.as_tensor(w), torch.as_tensor(f), cfg).numpy()
    want = np.stack([warp(w[i], f[i], cfg) for i in range(3)])
    assert np.max(np.abs(got - want)) <= 1e-12


def test_tensor_rollout_matches_numpy():
    rng = np.random.default_rng(9)
    w = rng.random((2, 12, 12))
    f = rng.normal(scale=0.05, size=(2, 4, 2, 12, 12))
    got = warp_rollout_tensor(torch.as_tensor(w), torch.as_tensor(f)).numpy()
    for i in range(2):
        want = np.stack(warp_rollout(w[i], list(f[i])))
        assert np.max(np.abs(got[i] - want)) <= 1e-12


def _away_from_kinks(f, h, w, margin=0.05):
    coords_r = np.arange(h)[:, None] + f[:, 1] * h
    coords_c = np.arange(w)[None, :] + f[:, 0] * w
    frac = np.concatenate([(coords_r % 1).ravel(), (coords_c % 1).ravel()])
    return np.all((frac > margin) & (frac < 1 - margin))


def test_warp_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    h = w = 10
    while True:
        f = rng.uniform(-0.08, 0.08, size=(1, 2, h, w))
        if _away_from_kinks(f, h, w):
            break
    grid = rng.random((1, h, w)) * 0.8 + 0.1
    weights = rng.normal(size=(1, h, w))
    flow_t = torch.tensor(f, requires_grad=True)
    grid_t = torch.tensor(grid, requires_grad=True)
    cfg = WarpConfig(clamp_output=False)
    (warp_tensor(grid_t, flow_t, cfg) * torch.as_tensor(weights)).sum().backward()

    def objective(g, fl):
        return float(np.sum(warp(g[0], fl[0], cfg) * weights[0]))

    eps = 1e-3
    for arr, grad in ((f, flow_t.grad.numpy()), (grid, grid_t.grad.numpy())):
        idx = [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(40)]
        for i in idx:
            plus, minus = arr.copy(), arr.copy()
            plus[i] += eps
            minus[i] -= eps
            if arr is f:
                num = (objective(grid, plus) - objective(grid, minus)) / (2 * eps)
            else:
                num = (objective(plus, f) - objective(minus, f)) / (2 * eps)
            denom = max(abs(num), abs(grad[i]), 1e-8)
            assert abs(num - grad[i]) / denom <= 1e-3 or abs(num - grad[i]) <= 1e-9
