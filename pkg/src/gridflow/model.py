"""Multi-task predictor: spatial encoder, ConvLSTM core, present/future latents,
ConvGRU future decoder with a current-grid head and a future semantic+flow head.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F

from .losses import LatentDistribution
from .warp import DEFAULT_WARP, WarpConfig, warp_rollout_tensor

MODES = ("train", "sample", "mean")


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 6
    base_features: int = 16
    n_convlstm_layers: int = 2
    latent_dim: int = 8
    n_gru_units: int = 3
    horizon: int = 4
    n_input: int = 3
    downsample: int = 4
    kernel_size: int = 3
    skip_features: bool = True
    # "future_present" samples the future latent in training and uses KL(future || present)
    kl_direction: str = "future_present"

    def __post_init__(self):
        for name in ("in_channels", "base_features", "n_convlstm_layers", "latent_dim",
                     "n_gru_units", "horizon", "n_input", "downsample", "kernel_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.downsample & (self.downsample - 1):
            raise ValueError("downsample must be a power of two")
        if self.kl_direction not in ("future_present", "present_future"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.downsample))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def paper_scale(cls) -> "NetConfig":
        return cls(base_features=128, n_convlstm_layers=4, latent_dim=32)


@dataclass
class PredictionBundle:
    """Network outputs; tensors are batched with horizon on axis 1."""

    y_now: torch.Tensor
    y_future: torch.Tensor
    f_future: torch.Tensor
    w_future: torch.Tensor
    dist_present: LatentDistribution
    dist_future: Optional[LatentDistribution] = None

    def detach(self) -> "PredictionBundle":
        def d(dist):
            return None if dist is None else LatentDistribution(dist.mu.detach(), dist.log_var.detach())
        return PredictionBundle(self.y_now.detach(), self.y_future.detach(), self.f_future.detach(),
                                self.w_future.detach(), d(self.dist_present), d(self.dist_future))


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels, hidden, kernel_size=3):
        super().__init__()
        self.hidden = hidden
        self.gates = _conv(in_channels + hidden, 4 * hidden, kernel_size)

    def forward(self, x, state):
        h, c = state
        i, f, o, g = self.gates(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class ConvGRUCell(nn.Module):
    def __init__(self, in_channels, hidden, kernel_size=3):
        super().__init__()
        self.hidden = hidden
        self.gates = _conv(in_channels + hidden, 2 * hidden, kernel_size)
        self.candidate = _conv(in_channels + hidden, hidden, kernel_size)

    def forward(self, x, h):
        r, z = torch.sigmoid(self.gates(torch.cat([x, h], dim=1))).chunk(2, dim=1)
        n = torch.tanh(self.candidate(torch.cat([x, r * h], dim=1)))
        return (1 - z) * h + z * n


class Encoder(nn.Module):
    """Full-resolution stem followed by stride-2 stages."""

    def __init__(self, cin, features, n_down, kernel_size=3):
        super().__init__()
        self.stem = _conv(cin, features, kernel_size)
        self.down = nn.ModuleList(_conv(features, features, kernel_size, stride=2) for _ in range(n_down))

    def forward(self, x):
        skip = F.elu(self.stem(x))
        y = skip
        for layer in self.down:
            y = F.elu(layer(y))
        return y, skip


class DistributionHead(nn.Module):
    def __init__(self, cin, features, latent_dim):
        super().__init__()
        self.conv = _conv(cin, features)
        self.linear = nn.Linear(features, 2 * latent_dim)

    def forward(self, x):
        pooled = F.elu(self.conv(x)).mean(dim=(-2, -1))
        mu, log_var = self.linear(pooled).chunk(2, dim=-1)
        return LatentDistribution(mu, log_var)


class Upsampler(nn.Module):
    def __init__(self, features, n_up):
        super().__init__()
        self.convs = nn.ModuleList(_conv(features, features) for _ in range(n_up))

    def forward(self, x, size):
        for conv in self.convs:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.elu(conv(x))
        if tuple(x.shape[-2:]) != tuple(size):
            x = F.interpolate(x, size=size, mode="nearest")
        return x


class OutputHead(nn.Module):
    def __init__(self, features, skip_features, cout):
        super().__init__()
        self.fuse = _conv(features + skip_features, features)
        self.out = nn.Conv2d(features, cout, 1)

    def forward(self, x, skip):
        parts = [x] if skip is None else [x, skip]
        return self.out(F.elu(self.fuse(torch.cat(parts, dim=1))))


class FlowGuidedNet(nn.Module):
    """Predicts ``Y_t``, future semantics, future backward flows and warped grids."""

    def __init__(self, cfg: NetConfig = NetConfig(), warp_cfg: WarpConfig = DEFAULT_WARP):
        super().__init__()
        self.cfg = cfg
        self.warp_cfg = warp_cfg
        nf, k, L, P = cfg.base_features, cfg.kernel_size, cfg.latent_dim, cfg.horizon
        self.encoder = Encoder(cfg.in_channels, nf, cfg.n_down, k)
        self.core = nn.ModuleList(ConvLSTMCell(nf, nf, k) for _ in range(cfg.n_convlstm_layers))
        self.present_head = DistributionHead(nf, nf, L)
        self.future_encoder = Encoder(3 * P, nf, cfg.n_down, k)
        self.future_head = DistributionHead(2 * nf, nf, L)
        self.decoder = nn.ModuleList(ConvGRUCell(L if j == 0 else nf, nf, k) for j in range(cfg.n_gru_units))
        skip_nf = nf if cfg.skip_features else 0
        self.up_now = Upsampler(nf, cfg.n_down)
        self.up_future = Upsampler(nf, cfg.n_down)
        self.head_now = OutputHead(nf, skip_nf, 1)
        self.head_future = OutputHead(nf, skip_nf, 3)
        self.reset_parameters()

    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        """Centred uniform fan-in init; ConvLSTM forget-gate bias 1."""
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Conv2d, nn.Linear)):
                    fan_in = module.weight[0].numel()
                    bound = 1.0 / math.sqrt(fan_in)
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.bias.uniform_(-bound, bound, generator=generator)
            for cell in self.core:
                hid = cell.hidden
                cell.gates.bias[hid:2 * hid].fill_(1.0)

    def encode(self, inputs: torch.Tensor):
        b, t = inputs.shape[:2]
        if inputs.shape[2] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {inputs.shape[2]}")
        feats, skips = self.encoder(inputs.flatten(0, 1))
        feats = feats.unflatten(0, (b, t))
        nf = self.cfg.base_features
        hs = [feats.new_zeros((b, nf) + feats.shape[-2:]) for _ in self.core]
        cs = [h.clone() for h in hs]
        for step in range(t):
            x = feats[:, step]
            for j, cell in enumerate(self.core):
                hs[j], cs[j] = cell(x, (hs[j], cs[j]))
                x = hs[j]
        skip = skips.unflatten(0, (b, t))[:, -1] if self.cfg.skip_features else None
        return hs[-1], skip

    def forward(self, inputs: torch.Tensor, mode: str = "mean", future: Optional[torch.Tensor] = None,
                seed: Optional[int] = None, eps: Optional[torch.Tensor] = None) -> PredictionBundle:
        """Run the network on ``inputs (B, N+1, 6, H, W)``.

        ``future (B, P, 3, H, W)`` holds GT future semantics and flows and is
        required in ``train`` mode. ``sample`` and ``train`` draw the latent
        with a generator seeded by ``seed`` unless ``eps`` is given.
        """
        cfg = self.cfg
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if inputs.dim() != 5:
            raise ValueError(f"inputs must be (B, T, C, H, W), got {tuple(inputs.shape)}")
        if mode == "train" and future is None:
            raise ValueError("train mode needs the future ground truth")
        b, _, _, h, w = inputs.shape
        state, skip = self.encode(inputs)
        present = self.present_head(state)
        future_dist = None
        if mode == "train":
            if future.shape[1] != cfg.horizon:
                raise ValueError(f"future must cover horizon {cfg.horizon}, got {future.shape[1]}")
            ffeat, _ = self.future_encoder(future.flatten(1, 2))
            future_dist = self.future_head(torch.cat([state, ffeat], dim=1))
        if mode == "mean":
            z = present.mu
        else:
            if eps is None:
                gen = torch.Generator().manual_seed(int(seed) if seed is not None else 0)
                eps = torch.randn(present.mu.shape, generator=gen, dtype=present.mu.dtype)
            source = future_dist if mode == "train" and cfg.kl_direction == "future_present" else present
            z = source.sample(eps)
        zmap = z[:, :, None, None].expand(-1, -1, state.shape[-2], state.shape[-1])

        y_now = torch.sigmoid(self.head_now(self.up_now(state, (h, w)), skip))[:, 0]
        hidden = [state for _ in self.decoder]
        sem, flow = [], []
        for _ in range(cfg.horizon):
            x = zmap
            for j, cell in enumerate(self.decoder):
                hidden[j] = cell(x, hidden[j])
                x = hidden[j]
            out = self.head_future(self.up_future(x, (h, w)), skip)
            sem.append(torch.sigmoid(out[:, 0]))
            flow.append(torch.tanh(out[:, 1:3]))
        y_future = torch.stack(sem, dim=1)
        f_future = torch.stack(flow, dim=1)
        w_future = warp_rollout_tensor(y_now, f_future, self.warp_cfg)
        return PredictionBundle(y_now, y_future, f_future, w_future, present, future_dist)

