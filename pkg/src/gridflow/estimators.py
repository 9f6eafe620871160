"""Scikit-learn style predictors over windowed grid data.

``X`` holds input windows ``(n, N+1, 6, H, W)`` and ``y`` targets
``(n, P+1, 3, H, W)`` as produced by :func:`gridflow.dataset.stack_windows`.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baseline import GridPrediction, baseline_constant_velocity, baseline_persistence
from .io import read_checkpoint, write_checkpoint
from .losses import LossWeights
from .metrics import iou
from .model import FlowGuidedNet, NetConfig
from .training import OptimConfig, make_optimizer, predict, train
from .validation import check_targets, check_windows

_NET_KEYS = tuple(NetConfig.__dataclass_fields__)
_LOSS_KEYS = tuple(LossWeights.__dataclass_fields__)
_OPTIM_KEYS = tuple(OptimConfig.__dataclass_fields__)


def _mean_w_iou(pred: GridPrediction, y: np.ndarray) -> float:
    vals = [iou(pred.w_future[i, k], y[i, k + 1, 0]) for i in range(len(pred)) for k in range(y.shape[1] - 1)]
    return float(np.mean(vals))


class _GridPredictorMixin:
    def predict(self, X) -> np.ndarray:
        """Warped future grids ``(n, P, H, W)``."""
        return self.predict_bundle(X).w_future

    def score(self, X, y) -> float:
        """Mean IoU of the warped future grids against the future semantics in ``y``."""
        X = check_windows(X)
        y = check_targets(y, X)
        return _mean_w_iou(self.predict_bundle(X), y)


class FlowGuidedPredictor(_GridPredictorMixin, BaseEstimator):
    """Recurrent variational predictor of future semantics, flows and warped grids."""

    def __init__(self, base_features=16, n_convlstm_layers=2, latent_dim=8, n_gru_units=3, horizon=4,
                 n_input=3, downsample=4, kernel_size=3, skip_features=True, kl_direction="future_present",
                 lambda_d=1.0, lambda_b=1.0, lambda_w=1.0, lambda_f=0.05, lambda_k=0.005, bce_pos_weight=5.0,
                 lr=2e-3, weight_decay=1e-7, beta1=0.9, beta2=0.999, epochs=30, batch_size=8,
                 grad_clip=1.0, random_state=0):
        self.base_features = base_features
        self.n_convlstm_layers = n_convlstm_layers
        self.latent_dim = latent_dim
        self.n_gru_units = n_gru_units
        self.horizon = horizon
        self.n_input = n_input
        self.downsample = downsample
        self.kernel_size = kernel_size
        self.skip_features = skip_features
        self.kl_direction = kl_direction
        self.lambda_d = lambda_d
        self.lambda_b = lambda_b
        self.lambda_w = lambda_w
        self.lambda_f = lambda_f
        self.lambda_k = lambda_k
        self.bce_pos_weight = bce_pos_weight
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epochs = epochs
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.random_state = random_state

    @classmethod
    def from_configs(cls, net: NetConfig, loss: LossWeights, optim: OptimConfig, random_state: int = 0):
        kw = {**{k: v for k, v in net.to_dict().items() if k != "in_channels"}, **loss.to_dict(),
              **optim.to_dict()}
        return cls(random_state=random_state, **kw)

    def net_config(self) -> NetConfig:
        p = self.get_params()
        return NetConfig(**{k: p[k] for k in _NET_KEYS if k in p})

    def loss_weights(self) -> LossWeights:
        p = self.get_params()
        return LossWeights(**{k: p[k] for k in _LOSS_KEYS})

    def optim_config(self) -> OptimConfig:
        p = self.get_params()
        return OptimConfig(**{k: p[k] for k in _OPTIM_KEYS})

    def _build(self) -> FlowGuidedNet:
        net = FlowGuidedNet(self.net_config())
        net.reset_parameters(torch.Generator().manual_seed(int(self.random_state)))
        return net

    def fit(self, X, y, start_epoch: int = 0, on_epoch: Optional[Callable] = None):
        """Train from scratch, or continue from ``start_epoch`` on a restored model.

        Continuing requires the fitted state set by :meth:`load_checkpoint`.
        """
        X = check_windows(X, self.n_input)
        y = check_targets(y, X, self.horizon)
        optim = self.optim_config()
        if start_epoch == 0:
            self.net_ = self._build()
            self.optimizer_ = make_optimizer(self.net_, optim)
            self.history_ = []
            self.loss_curve_ = []
        else:
            check_is_fitted(self, ["net_", "optimizer_"])
        res = train(self.net_, X, y, self.loss_weights(), optim, seed=int(self.random_state),
                    start_epoch=start_epoch, optimizer=self.optimizer_, on_epoch=on_epoch)
        self.loss_curve_ = list(self.loss_curve_) + res.loss_curve
        self.history_ = list(self.history_) + res.steps
        self.n_epochs_ = res.epochs_done
        return self

    def predict_bundle(self, X, mode: str = "mean", seed: Optional[int] = None) -> GridPrediction:
        check_is_fitted(self, "net_")
        X = check_windows(X, self.n_input)
        parts = predict(self.net_, X, mode=mode, seed=seed)

        def cat(attr, dist=None):
            if dist is not None:
                vals = [getattr(getattr(b, dist), attr) for b in parts]
            else:
                vals = [getattr(b, attr) for b in parts]
            return torch.cat(vals).double().numpy()

        return GridPrediction(cat("y_now"), cat("y_future"), cat("f_future"), cat("w_future"),
                              cat("mu", "dist_present"), cat("log_var", "dist_present"))

    # checkpoints hold parameters and Adam moments so training resumes exactly
    def checkpoint_tensors(self) -> dict:
        check_is_fitted(self, "net_")
        tensors = {name: p.detach().numpy() for name, p in self.net_.named_parameters()}
        state = self.optimizer_.state
        for name, p in self.net_.named_parameters():
            if p in state:
                tensors[f"adam.exp_avg.{name}"] = state[p]["exp_avg"].numpy()
                tensors[f"adam.exp_avg_sq.{name}"] = state[p]["exp_avg_sq"].numpy()
        return tensors

    def optimizer_step_count(self) -> int:
        steps = [float(s["step"]) for s in self.optimizer_.state.values() if "step" in s]
        return int(steps[0]) if steps else 0

    def save_checkpoint(self, path, manifest: Optional[dict] = None):
        body = {"params": self.get_params(), "net_config": self.net_config().to_dict(),
                "seed": int(self.random_state), "epochs_done": int(getattr(self, "n_epochs_", 0)),
                "adam_step": self.optimizer_step_count(), "loss_curve": list(self.loss_curve_)}
        body.update(manifest or {})
        return write_checkpoint(path, self.checkpoint_tensors(), body)

    @classmethod
    def load_checkpoint(cls, path) -> "FlowGuidedPredictor":
        tensors, manifest = read_checkpoint(path)
        est = cls(**manifest["params"])
        est.net_ = net = est._build()
        est.optimizer_ = make_optimizer(net, est.optim_config())
        with torch.no_grad():
            for name, p in net.named_parameters():
                if name not in tensors:
                    raise ValueError(f"checkpoint lacks parameter {name!r}")
                if tuple(tensors[name].shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {name!r}: {tensors[name].shape} vs {tuple(p.shape)}")
                p.copy_(torch.from_numpy(tensors[name]))
        step = manifest.get("adam_step", 0)
        if step:
            for name, p in net.named_parameters():
                est.optimizer_.state[p] = {
                    "step": torch.tensor(float(step)),
                    "exp_avg": torch.from_numpy(tensors[f"adam.exp_avg.{name}"].copy()),
                    "exp_avg_sq": torch.from_numpy(tensors[f"adam.exp_avg_sq.{name}"].copy()),
                }
        est.loss_curve_ = list(manifest.get("loss_curve", []))
        est.history_ = []
        est.n_epochs_ = int(manifest.get("epochs_done", 0))
        est.manifest_ = manifest
        return est


class ConstantVelocityPredictor(_GridPredictorMixin, BaseEstimator):
    """Advances every moving vehicle cell along its measured velocity."""

    def __init__(self, horizon=4, dt_s=0.5, cell_size_m=0.5, v_scale=20.0):
        self.horizon = horizon
        self.dt_s = dt_s
        self.cell_size_m = cell_size_m
        self.v_scale = v_scale

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict_bundle(self, X, flows=None) -> GridPrediction:
        X = check_windows(X, dtype=np.float64)
        return baseline_constant_velocity(X, self.horizon, self.dt_s, self.cell_size_m, self.v_scale, flows)


class PersistencePredictor(_GridPredictorMixin, BaseEstimator):
    """Zero-flow baseline: the future equals the latest semantic grid."""

    def __init__(self, horizon=4):
        self.horizon = horizon

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict_bundle(self, X) -> GridPrediction:
        return baseline_persistence(check_windows(X, dtype=np.float64), self.horizon)
