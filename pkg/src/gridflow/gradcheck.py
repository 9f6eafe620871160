"""Central finite-difference checks of the network's analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .grid import EDGE_TOL
from .losses import LossWeights, total_loss
from .training import compute_loss, future_tensor, split_targets


@dataclass
class ProbeResult:
    layer: str
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def abs_error(self) -> float:
        return abs(self.analytic - self.numeric)

    def rel_error(self, floor: float) -> float:
        return self.abs_error / max(abs(self.analytic), abs(self.numeric), floor)


@dataclass
class GradCheckReport:
    probes: list = field(default_factory=list)
    skipped_kinks: int = 0

    def worst(self, floor: float) -> float:
        return max((p.rel_error(floor) for p in self.probes), default=0.0)

    def by_layer(self, floor: float) -> dict:
        out: dict = {}
        for p in self.probes:
            out[p.layer] = max(out.get(p.layer, 0.0), p.rel_error(floor))
        return out


def layers(net: nn.Module) -> dict:
    """Leaf modules that own parameters, keyed by dotted name."""
    out = {}
    for name, mod in net.named_modules():
        own = list(mod.parameters(recurse=False))
        if own:
            out[name] = mod
    return out


def _sampling_signature(flows: torch.Tensor) -> np.ndarray:
    """Integer cell and in-grid flag of every sampling coordinate, ``flows (B,P,2,H,W)``."""
    f = flows.detach().cpu().numpy()
    h, w = f.shape[-2:]
    r = np.arange(h)[:, None] + f[:, :, 1] * h
    c = np.arange(w)[None, :] + f[:, :, 0] * w
    inside = (r >= -EDGE_TOL) & (r <= h - 1 + EDGE_TOL) & (c >= -EDGE_TOL) & (c <= w - 1 + EDGE_TOL)
    return np.stack([np.floor(np.clip(r, 0, h - 1)), np.floor(np.clip(c, 0, w - 1)), inside])


def check_gradients(net: nn.Module, X, Y, eps_latent: torch.Tensor, weights: LossWeights = LossWeights(),
                    per_layer: int = 50, step: float = 1e-3, seed: int = 0,
                    max_attempts: Optional[int] = None) -> GradCheckReport:
    """Compare autograd against central differences of the composite loss.

    Runs in float64 with the latent noise ``eps_latent`` held fixed. For every
    parameterised layer ``per_layer`` scalar entries are probed. A probe whose
    two perturbed evaluations put any warp sampling coordinate in a different
    cell, or on a different side of the grid edge, crosses a kink of the
    bilinear sampler and is redrawn.
    """
    net = net.double()
    X = torch.as_tensor(X, dtype=torch.float64)
    Y = torch.as_tensor(Y, dtype=torch.float64)
    eps_latent = torch.as_tensor(eps_latent, dtype=torch.float64)
    rng = np.random.default_rng(seed)

    net.zero_grad(set_to_none=True)
    loss, _ = compute_loss(net, X, Y, weights, eps=eps_latent)
    loss.backward()
    grads = {id(p): p.grad.detach().clone() for p in net.parameters()}

    def evaluate():
        with torch.no_grad():
            bundle = net(X, mode="train", future=future_tensor(Y), eps=eps_latent)
            value, _ = total_loss(bundle, split_targets(Y), weights, "mean", net.cfg.kl_direction)
        return float(value), _sampling_signature(bundle.f_future)

    report = GradCheckReport()
    limit = max_attempts if max_attempts is not None else 20 * per_layer
    for lname, mod in layers(net).items():
        params = list(mod.named_parameters(recurse=False))
        sizes = np.array([p.numel() for _, p in params])
        done = attempts = 0
        while done < per_layer and attempts < limit:
            attempts += 1
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            pname, p = params[k]
            flat_i = int(rng.integers(p.numel()))
            idx = tuple(int(v) for v in np.unravel_index(flat_i, p.shape))
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + step
                lp, sp = evaluate()
                p[idx] = orig - step
                lm, sm = evaluate()
                p[idx] = orig
            if not np.array_equal(sp, sm):
                report.skipped_kinks += 1
                continue
            report.probes.append(ProbeResult(lname, pname, idx, float(grads[id(p)][idx]), (lp - lm) / (2 * step)))
            done += 1
    return report
