import pytest
import numpy as np
import torch

from conftest import TINY
from gridflow.model import FlowGuidedNet
from gridflow.training import OptimConfig, make_optimizer, predict, train


def _net(seed=0):
    torch.manual_seed(seed)
    return FlowGuidedNet(TINY)


def test_zero_learning_rate_keeps_parameters(tiny_data):
    X, Y, _ = tiny_data
    net = _net()
    before = {k: v.clone() for k, v in net.state_dict().items()}
    res = train(net, X, Y, optim=OptimConfig(lr=0.0, weight_decay=0.0, epochs=3, batch_size=4))
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())
    assert len(res.loss_curve) == 3


def test_same_seed_same_curve(tiny_data):
    X, Y, _ = tiny_data
    opt = OptimConfig(epochs=3, batch_size=4)
    a = train(_net(), X, Y, optim=opt, seed=5).loss_curve
    b = train(_net(), X, Y, optim=opt, seed=5).loss_curve
    c = train(_net(), X, Y, optim=opt, seed=6).loss_curve
    assert a == b
    assert a != c


def test_resume_reproduces_uninterrupted_run(tiny_data):
    X, Y, _ = tiny_data
    opt = OptimConfig(epochs=4, batch_size=4)
    full_net = _net()
    full = train(full_net, X, Y, optim=opt, seed=1)

    net = _net()
    optimizer = make_optimizer(net, opt)
    first = train(net, X, Y, optim=OptimConfig(epochs=2, batch_size=4), seed=1, optimizer=optimizer)
    state = ({k: v.clone() for k, v in net.state_dict().items()}, optimizer.state_dict())

    resumed_net = _net(99)
    resumed_net.load_state_dict(state[0])
    resumed_opt = make_optimizer(resumed_net, opt)
    resumed_opt.load_state_dict(state[1])
    rest = train(resumed_net, X, Y, optim=opt, seed=1, start_epoch=2, optimizer=resumed_opt)
    assert first.loss_curve + rest.loss_curve == full.loss_curve
    assert rest.steps[0]["step"] == full.steps[len(first.steps)]["step"]
    for k, v in full_net.state_dict().items():
        assert torch.equal(v, resumed_net.state_dict()[k])


def test_training_reduces_loss(tiny_data):
    X, Y, _ = tiny_data
    res = train(_net(), X, Y, optim=OptimConfig(epochs=8, batch_size=4))
    assert res.loss_curve[-1] < res.loss_curve[0]
    assert {"bce_d", "bce_b", "bce_w", "flow", "kl", "total", "step"} <= set(res.steps[0])


def test_predict_batches_match_single_pass(tiny_data):
    X = tiny_data[0]
    net = _net()
    whole = predict(net, X, batch_size=64)[0]
    parts = predict(net, X, batch_size=2)
    got = torch.cat([p.w_future for p in parts])
    assert torch.allclose(got, whole.w_future, atol=1e-6)


def test_divergence_guard(tiny_data):
    import pytest
    from gridflow.losses import NumericError
    X, Y, _ = tiny_data
    net = _net()
    with torch.no_grad():
        net.head_now.out.bias.fill_(float("nan"))
    with pytest.raises(NumericError):
        train(net, X, Y, optim=OptimConfig(epochs=1, batch_size=4))


def test_negative_grad_clip_rejected():
    with pytest.raises(ValueError):
        OptimConfig(grad_clip=-1.0)
