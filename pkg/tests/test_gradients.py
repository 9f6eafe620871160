import numpy as np
import pytest
import torch

from conftest import TINY
from gridflow.gradcheck import check_gradients, layers
from gridflow.losses import LossWeights
from gridflow.model import FlowGuidedNet
from gridflow.training import loss_and_grad

# denominator floor for tiny gradients; float64 central differences at
# eps=1e-3 carry ~1e-13 rounding noise on an O(1) loss
FLOOR = 1e-8


def _setup(seed=0):
    torch.manual_seed(seed)
    net = FlowGuidedNet(TINY).double()
    eps = torch.randn(2, TINY.latent_dim, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    return net, eps


@pytest.fixture(scope="module")
def full_report(tiny_data):
    X, Y, _ = tiny_data
    net, eps = _setup()
    return check_gradients(net, X[:2], Y[:2], eps, per_layer=20)


def test_every_layer_probed(full_report):
    net, _ = _setup()
    assert set(full_report.by_layer(FLOOR)) == set(layers(net))


def test_composite_gradient_matches_finite_differences(full_report):
    assert full_report.worst(FLOOR) <= 1e-3, full_report.by_layer(FLOOR)


def test_warp_only_path(tiny_data):
    # with only the warped-grid term active, flow-head gradients exist solely through the warp.
    # This objective is strongly curved at some probes, so the step is reduced to keep the
    # O(eps^2) truncation term below tolerance; the pinned eps=1e-3 check is the composite one.
    X, Y, _ = tiny_data
    net, eps = _setup(1)
    rep = check_gradients(net, X[:2], Y[:2], eps, LossWeights(0.0, 0.0, 1.0, 0.0, 0.0), per_layer=10, step=1e-4)
    assert rep.worst(FLOOR) <= 1e-3
    head = [p for p in rep.probes if p.layer == "head_future.out"]
    assert any(abs(p.analytic) > 1e-6 for p in head)


def test_zero_weights_give_zero_gradients(tiny_data):
    X, Y, _ = tiny_data
    net, eps = _setup()
    loss, grads = loss_and_grad(net, X[:2], Y[:2], LossWeights(0, 0, 0, 0, 0), eps=eps)
    assert loss == 0.0
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_kl_gradient_reaches_both_distribution_heads(tiny_data):
    X, Y, _ = tiny_data
    net, eps = _setup()
    _, grads = loss_and_grad(net, X[:2], Y[:2], LossWeights(0, 0, 0, 0, 1.0), eps=eps)
    assert grads["present_head.linear.weight"].abs().sum() > 0
    assert grads["future_head.linear.weight"].abs().sum() > 0


def test_duplicate_pair_doubles_summed_loss(tiny_data):
    X, Y, _ = tiny_data
    net, _ = _setup()
    eps = torch.zeros(1, TINY.latent_dim, dtype=torch.float64)
    one, _ = loss_and_grad(net, X[:1], Y[:1], reduction="sum", eps=eps)
    two, _ = loss_and_grad(net, np.concatenate([X[:1]] * 2), np.concatenate([Y[:1]] * 2), reduction="sum",
                           eps=torch.cat([eps, eps]))
    assert two == pytest.approx(2 * one, rel=1e-12)


def test_central_difference_error_is_second_order(tiny_data):
    X, Y, _ = tiny_data
    net, eps = _setup(1)
    w = LossWeights(0.0, 0.0, 1.0, 0.0, 0.0)
    coarse = check_gradients(net, X[:2], Y[:2], eps, w, per_layer=5, step=1e-3, seed=3)
    fine = check_gradients(net, X[:2], Y[:2], eps, w, per_layer=5, step=1e-4, seed=3)
    fine_by_key = {(p.layer, p.name, p.index): p for p in fine.probes}
    shared = [(a, fine_by_key[(a.layer, a.name, a.index)]) for a in coarse.probes
              if (a.layer, a.name, a.index) in fine_by_key]
    assert len(shared) >= 20
    for a, b in shared:
        if a.abs_error > 1e-9:
            assert b.abs_error <= a.abs_error / 30
