"""Composite training objective: weighted BCE terms, masked L1 flow and KL."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch

EPS = 1e-7
TERMS = ("bce_d", "bce_b", "bce_w", "flow", "kl")


class NumericError(FloatingPointError):
    """A loss term or the loss curve became non-finite."""


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 1.0
    lambda_b: float = 1.0
    lambda_w: float = 1.0
    lambda_f: float = 0.05
    lambda_k: float = 0.005
    bce_pos_weight: float = 5.0

    def __post_init__(self):
        for name in ("lambda_d", "lambda_b", "lambda_w", "lambda_f", "lambda_k"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.bce_pos_weight <= 0:
            raise ValueError("bce_pos_weight must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentDistribution:
    mu: torch.Tensor
    log_var: torch.Tensor

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        return self.mu + torch.exp(0.5 * self.log_var) * eps


@dataclass
class LossTargets:
    """Ground truth for one batch.

    Shapes: ``y_now (B,H,W)``, ``y_future (B,P,H,W)``, ``flow_future (B,P,2,H,W)``;
    ``mask_future`` defaults to the future vehicle footprints.
    """

    y_now: torch.Tensor
    y_future: torch.Tensor
    flow_future: torch.Tensor
    mask_future: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.mask_future is None:
            self.mask_future = (self.y_future > 0.5).to(self.y_future.dtype)


def _t(x, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def bce(pred, target, pos_weight: float = 5.0) -> torch.Tensor:
    """Positively weighted BCE averaged over the last two (cell) dimensions."""
    pred = _t(pred)
    target = _t(target, pred)
    p = pred.clamp(EPS, 1.0 - EPS)
    loss = -(pos_weight * target * torch.log(p) + (1.0 - target) * torch.log1p(-p))
    return loss.mean(dim=(-2, -1))


def flow_l1(pred, target, vehicle_mask) -> torch.Tensor:
    """Sum of ``|dfx| + |dfy|`` over masked cells divided by ``max(1, n_masked)``."""
    pred = _t(pred)
    target = _t(target, pred)
    mask = _t(vehicle_mask, pred)
    err = (pred - target).abs().sum(dim=-3) * mask
    count = mask.sum(dim=(-2, -1)).clamp(min=1.0)
    return err.sum(dim=(-2, -1)) / count


def kl_diag_gaussian(q: LatentDistribution, p: LatentDistribution) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the latent dimension."""
    var_q = torch.exp(q.log_var)
    var_p = torch.exp(p.log_var)
    term = (p.log_var - q.log_var) + (var_q + (q.mu - p.mu) ** 2) / var_p - 1.0
    return 0.5 * term.sum(dim=-1)


def bce_sum(bundle, targets: LossTargets, w: LossWeights) -> torch.Tensor:
    terms = _bce_terms(bundle, targets, w)
    return w.lambda_d * terms["bce_d"] + w.lambda_b * terms["bce_b"] + w.lambda_w * terms["bce_w"]


def _bce_terms(bundle, targets: LossTargets, w: LossWeights) -> dict:
    pw = w.bce_pos_weight
    return {
        "bce_d": bce(bundle.y_now, targets.y_now, pw),
        "bce_b": bce(bundle.y_future, targets.y_future, pw).mean(dim=-1),
        "bce_w": bce(bundle.w_future, targets.y_future, pw).mean(dim=-1),
    }


def total_loss(bundle, targets: LossTargets, w: LossWeights = LossWeights(),
               reduction: str = "mean", kl_direction: str = "future_present") -> tuple[torch.Tensor, dict]:
    """Weighted sum of every term; returns ``(loss, per-term breakdown)``.

    Per-sample losses are reduced over the batch by ``mean`` or ``sum``; the
    breakdown holds the unweighted batch-reduced terms as floats. The KL term
    is ``KL(future || present)`` unless ``kl_direction="present_future"``.
    """
    terms = _bce_terms(bundle, targets, w)
    terms["flow"] = flow_l1(bundle.f_future, targets.flow_future, targets.mask_future).mean(dim=-1)
    if bundle.dist_future is not None:
        q, p = bundle.dist_future, bundle.dist_present
        if kl_direction == "present_future":
            q, p = p, q
        terms["kl"] = kl_diag_gaussian(q, p)
    else:
        terms["kl"] = torch.zeros_like(terms["bce_d"])
    per_sample = (w.lambda_d * terms["bce_d"] + w.lambda_b * terms["bce_b"] + w.lambda_w * terms["bce_w"]
                  + w.lambda_f * terms["flow"] + w.lambda_k * terms["kl"])
    if reduction == "mean":
        reduce = torch.mean
    elif reduction == "sum":
        reduce = torch.sum
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    total = reduce(per_sample)
    breakdown = {name: float(reduce(terms[name]).detach()) for name in TERMS}
    breakdown["total"] = float(total.detach())
    return total, breakdown


def check_finite(breakdown: dict) -> None:
    for name, value in breakdown.items():
        if not torch.isfinite(torch.tensor(value)):
            raise NumericError(f"non-finite loss term {name!r}: {value}")
