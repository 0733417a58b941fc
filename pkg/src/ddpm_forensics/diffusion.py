"""Benign DDPM transitions, training and ancestral sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .denoiser import frozen, timestep_tensor
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, trace: list[float]):
        super().__init__(f"non-finite training loss at step {step}")
        self.step = step
        self.trace = trace


@dataclass
class TrainConfig:
    steps: int = 3000
    lr: float = 2e-3
    batch_size: int = 32
    seed: int = 0
    grad_clip: float = 1.0
    cosine: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageBatch:
    """Images ``[batch, channels, height, width]`` in [-1, 1] tagged with the seed that made them."""

    data: torch.Tensor
    seed: int = 0


def as_tensor(images) -> torch.Tensor:
    data = images.data if isinstance(images, ImageBatch) else images
    if isinstance(data, np.ndarray):
        data = torch.from_numpy(data)
    return data.float()


def _coef(values, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather 1-based per-timestep coefficients and broadcast over image dims."""
    out = torch.tensor(np.asarray(values), dtype=like.dtype, device=like.device)[t - 1]
    return out.view(-1, *([1] * (like.ndim - 1)))


def forward_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Direct sample ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    x0 = as_tensor(x0)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    tt = timestep_tensor(t, x0.shape[0], x0.device)
    if tt.min() < 1 or tt.max() > sched.T:
        raise ValueError(f"timestep outside [1, {sched.T}]")
    ab = _coef(sched.alpha_bars, tt, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def posterior_step(xt: torch.Tensor, eps_pred: torch.Tensor, t: int, sched: NoiseSchedule,
                   noise: torch.Tensor | None) -> torch.Tensor:
    """One ancestral update given the network's noise prediction at ``t``."""
    if eps_pred.shape != xt.shape:
        raise ValueError("prediction shape does not match x_t")
    a = sched.alpha(t)
    ab = sched.alpha_bar(t)
    mean = (xt - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(a)
    if t == 1 or noise is None:
        return mean
    if noise.shape != xt.shape:
        raise ValueError("noise shape does not match x_t")
    return mean + sched.sigma(t) * noise


def reverse_step(model: nn.Module, xt: torch.Tensor, t: int, sched: NoiseSchedule,
                 noise: torch.Tensor | None = None) -> torch.Tensor:
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    return posterior_step(xt, model(xt, t), t, sched, noise)


def image_shape_of(model: nn.Module, stamp=None) -> tuple[int, ...]:
    if stamp is not None:
        return tuple(as_tensor(stamp).shape[-3:])
    shape = getattr(model, "image_shape", None)
    if shape is None:
        raise ValueError("model has no image_shape; pass a stamp or set model.image_shape")
    return tuple(shape)


@torch.no_grad()
def generate(model: nn.Module, sched: NoiseSchedule, n: int, seed: int, stamp=None,
             clip: bool = True) -> ImageBatch:
    """Ancestral sampling from ``x_T = eps (+ stamp)`` down to ``x_0``.

    Deterministic given ``seed``: the initial noise is drawn first, then one
    noise tensor per step for ``t = T .. 2`` from the same generator.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    shape = image_shape_of(model, stamp)
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn((n, *shape), generator=gen)
    if stamp is not None:
        x = x + as_tensor(stamp).reshape(1, *shape)
    with frozen(model):
        for t in range(sched.T, 0, -1):
            noise = torch.randn(x.shape, generator=gen) if t > 1 else None
            x = reverse_step(model, x, t, sched, noise)
    return ImageBatch(x.clamp(-1.0, 1.0) if clip else x, int(seed))


def _train_loop(model: nn.Module, cfg: TrainConfig, batch_loss) -> nn.Module:
    gen = torch.Generator().manual_seed(int(cfg.seed))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1)) if cfg.cosine else None
    trace: list[float] = []
    model.train()
    for step in range(cfg.steps):
        loss = batch_loss(gen)
        value = float(loss.detach())
        if not math.isfinite(value):
            model.loss_trace = trace
            raise TrainingDiverged(step, trace)
        trace.append(value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        if sched is not None:
            sched.step()
    model.eval()
    model.loss_trace = trace
    return model


def train_clean(model: nn.Module, dataset, sched: NoiseSchedule, cfg: TrainConfig) -> nn.Module:
    """Fit ``model`` with the simplified eps-prediction objective.

    The per-step losses are left on ``model.loss_trace``.
    """
    data = as_tensor(dataset)
    if data.shape[0] == 0:
        raise ValueError("empty dataset")

    def batch_loss(gen):
        idx = torch.randint(0, data.shape[0], (cfg.batch_size,), generator=gen)
        t = torch.randint(1, sched.T + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn((cfg.batch_size, *data.shape[1:]), generator=gen)
        xt = forward_sample(data[idx], t, eps, sched)
        return ((model(xt, t) - eps) ** 2).mean()

    return _train_loop(model, cfg, batch_loss)
