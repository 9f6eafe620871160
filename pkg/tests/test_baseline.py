import math

import numpy as np
import pytest

from gridflow.baseline import baseline_constant_velocity, baseline_persistence, constant_velocity_flows
from gridflow.dataset import make_windows, stack_windows
from gridflow.grid import GridGeometry
from gridflow.metrics import iou
from gridflow.scene import ScenarioConfig, VehicleSpec, simulate


def _single_vehicle(speed=5.0, heading=0.0, parked=False):
    g = GridGeometry(64, 64, 0.25)
    back = 0 if parked else speed * 0.5 * 3
    car = VehicleSpec(0, 4.0, 2.0, -back * math.cos(heading), -back * math.sin(heading), heading,
                      "parked" if parked else "constant_velocity", 0.0 if parked else speed)
    return simulate(ScenarioConfig(geometry=g, vehicles=(car,), n_frames=7))


def test_static_scene_keeps_grid():
    seq = _single_vehicle(parked=True)
    X, _ = stack_windows(make_windows(seq), np.float64)
    pred = baseline_constant_velocity(X, 4, seq.dt_s, 0.25)
    for k in range(4):
        assert np.array_equal(pred.w_future[0, k], pred.y_now[0])
    assert np.all(pred.mu_present == 0) and np.all(pred.log_var_present == 0)


@pytest.mark.parametrize("heading", [0.0, math.pi / 2, 0.6])
def test_single_vehicle_iou(heading):
    seq = _single_vehicle(heading=heading)
    w = make_windows(seq)
    X, Y = stack_windows(w, np.float64)
    pred = baseline_constant_velocity(X, 4, seq.dt_s, 0.25)
    for k in range(4):
        assert iou(pred.w_future[0, k], Y[0, k + 1, 0]) >= 0.8


def test_gt_flow_substitution_matches_rollout():
    from gridflow.warp import warp_rollout
    seq = _single_vehicle(heading=0.3)
    X, Y = stack_windows(make_windows(seq), np.float64)
    pred = baseline_constant_velocity(X, 4, seq.dt_s, 0.25, flows=Y[:, 1:, 1:])
    want = warp_rollout(X[0, -1, 5], list(Y[0, 1:, 1:]))
    assert np.array_equal(pred.w_future[0], np.stack(want))


def test_persistence_repeats_latest_grid():
    seq = _single_vehicle()
    X, _ = stack_windows(make_windows(seq), np.float64)
    pred = baseline_persistence(X, 4)
    assert all(np.array_equal(pred.w_future[0, k], X[0, -1, 5]) for k in range(4))
    assert np.all(pred.f_future == 0)


def test_constant_velocity_flow_values():
    h = w = 16
    x = np.zeros((1, 6, h, w))
    x[0, 5, 7:9, 4:6] = 1.0
    x[0, 1, 7:9, 4:6] = 1.0
    x[0, 3, 7:9, 4:6] = 2.0 / 20.0  # 2 m/s along x
    flows = constant_velocity_flows(x, 2, 0.5, 0.5, v_scale=20.0)
    # 2 m/s * 0.5 s / 0.5 m = 2 cells per step; landing and vacated cells get -2/w
    assert flows[0, 0, 7, 6] == pytest.approx(-2 / w)
    assert flows[0, 0, 7, 4] == pytest.approx(-2 / w)
    assert flows[1, 0, 7, 9] == pytest.approx(-2 / w)
    assert flows[0, 0, 7, 10] == 0.0
    assert np.all(flows[:, 1] == 0)


def test_constant_velocity_ring_shares_vehicle_step():
    h = w = 16
    x = np.zeros((1, 6, h, w))
    x[0, 5, 7:9, 4:6] = 1.0
    x[0, 1, 7:9, 4:6] = 1.0
    x[0, 3, 7:9, 4:6] = 2.0 / 20.0
    flows = constant_velocity_flows(x, 1, 0.5, 0.5, v_scale=20.0)
    # cells bordering the landing and vacated blocks carry the same step
    assert flows[0, 0, 6, 3] == pytest.approx(-2 / w)
    assert flows[0, 0, 9, 8] == pytest.approx(-2 / w)
    assert flows[0, 0, 7, 9] == 0.0 and flows[0, 0, 5, 5] == 0.0


def test_constant_velocity_beats_persistence_on_noiseless_scenes():
    from gridflow.scene import ground_truth_flow, random_scenario
    g = GridGeometry(64, 64, 0.25)
    seqs = [ground_truth_flow(simulate(random_scenario(s, g, n_frames=8, p_turn=0.0, p_parked=0.0)))
            for s in range(6)]
    w = [x for seq in seqs for x in make_windows(seq)]
    X, Y = stack_windows(w, np.float64)
    cv = baseline_constant_velocity(X, 4, 0.5, 0.25)
    still = baseline_persistence(X, 4)
    score = [np.mean([iou(p.w_future[i, k], Y[i, k + 1, 0]) for i in range(len(w)) for k in range(4)])
             for p in (cv, still)]
    assert score[0] > score[1]
