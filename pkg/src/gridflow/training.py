"""Loss/gradient evaluation and the seeded Adam training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .losses import LossTargets, LossWeights, NumericError, check_finite, total_loss
from .model import FlowGuidedNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-3
    weight_decay: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 30
    batch_size: int = 8
    # global gradient-norm cap; 0 disables
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def paper(cls) -> "OptimConfig":
        return cls(lr=3e-4, weight_decay=1e-7, epochs=20, batch_size=18)


@dataclass
class TrainResult:
    loss_curve: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    epochs_done: int = 0


def split_targets(Y: torch.Tensor) -> LossTargets:
    """``Y (B, P+1, 3, H, W)`` into loss targets."""
    return LossTargets(Y[:, 0, 0], Y[:, 1:, 0], Y[:, 1:, 1:3])


def future_tensor(Y: torch.Tensor) -> torch.Tensor:
    return Y[:, 1:]


def step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def compute_loss(net: FlowGuidedNet, X: torch.Tensor, Y: torch.Tensor, weights: LossWeights,
                 seed: int = 0, reduction: str = "mean", eps: Optional[torch.Tensor] = None):
    bundle = net(X, mode="train", future=future_tensor(Y), seed=seed, eps=eps)
    return total_loss(bundle, split_targets(Y), weights, reduction, net.cfg.kl_direction)


def loss_and_grad(net: FlowGuidedNet, X, Y, weights: LossWeights = LossWeights(), seed: int = 0,
                  reduction: str = "mean", eps: Optional[torch.Tensor] = None):
    """Composite loss and its gradient, one entry per named parameter."""
    X = torch.as_tensor(X, dtype=next(net.parameters()).dtype)
    Y = torch.as_tensor(Y, dtype=X.dtype)
    net.zero_grad(set_to_none=True)
    loss, breakdown = compute_loss(net, X, Y, weights, seed, reduction, eps)
    check_finite(breakdown)
    loss.backward()
    grads = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for name, p in net.named_parameters()}
    return float(loss.detach()), grads


def make_optimizer(net: FlowGuidedNet, optim: OptimConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(net.parameters(), lr=optim.lr, betas=(optim.beta1, optim.beta2),
                             weight_decay=optim.weight_decay)


def train(net: FlowGuidedNet, X, Y, weights: LossWeights = LossWeights(), optim: OptimConfig = OptimConfig(),
          seed: int = 0, start_epoch: int = 0, optimizer: Optional[torch.optim.Optimizer] = None,
          on_epoch: Optional[Callable] = None) -> TrainResult:
    """Train in place; returns the per-epoch mean loss and per-step breakdowns.

    Shuffling and latent sampling are keyed on ``(seed, epoch, step)`` so a run
    resumed at ``start_epoch`` with the saved optimizer state continues the
    uninterrupted curve exactly. ``on_epoch(epoch, net, optimizer, result)``
    is called after each epoch.
    """
    dtype = next(net.parameters()).dtype
    X = torch.as_tensor(X, dtype=dtype)
    Y = torch.as_tensor(Y, dtype=dtype)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    optimizer = optimizer or make_optimizer(net, optim)
    result = TrainResult(epochs_done=start_epoch)
    n_batches = -(-n // optim.batch_size)
    global_step = start_epoch * n_batches
    net.train()
    for epoch in range(start_epoch, optim.epochs):
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        losses = []
        for b, lo in enumerate(range(0, n, optim.batch_size)):
            idx = torch.as_tensor(perm[lo:lo + optim.batch_size])
            optimizer.zero_grad(set_to_none=True)
            loss, breakdown = compute_loss(net, X[idx], Y[idx], weights, step_seed(seed, epoch, b))
            try:
                check_finite(breakdown)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from exc
            loss.backward()
            if optim.grad_clip > 0:
                nn.utils.clip_grad_norm_(net.parameters(), optim.grad_clip)
            optimizer.step()
            losses.append((breakdown["total"], len(idx)))
            result.steps.append({"step": global_step, "epoch": epoch, **breakdown})
            global_step += 1
        mean = sum(l * k for l, k in losses) / n
        result.loss_curve.append(mean)
        result.epochs_done = epoch + 1
        log.info("epoch %d loss %.5f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, net, optimizer, result)
    return result


@torch.no_grad()
def predict(net: FlowGuidedNet, X, mode: str = "mean", seed: Optional[int] = None, batch_size: int = 32):
    """Batched inference returning a list of detached bundles."""
    net.eval()
    dtype = next(net.parameters()).dtype
    X = torch.as_tensor(X, dtype=dtype)
    out = []
    for lo in range(0, X.shape[0], batch_size):
        s = None if seed is None else step_seed(seed, 0, lo)
        out.append(net(X[lo:lo + batch_size], mode=mode, seed=s))
    return out
