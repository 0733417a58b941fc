"""Analytic denoisers for fast, exactly-known tests.

``MixtureDenoiser`` is the Bayes-optimal noise predictor when the clean data
is a finite set of images and a backdoor component (trigger plus one or more
targets) is mixed in with a fixed prior. ``StubDenoiser`` is a small smooth
function used for gradient checks.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .attacks import BackdoorSpec, coefficients_for
from .denoiser import timestep_tensor
from .diffusion import as_tensor
from .schedule import NoiseSchedule


class MixtureDenoiser(nn.Module):
    """Posterior-weighted noise prediction for point-mass data.

    Clean component ``i`` contributes ``(x - sqrt(abar) a_i) / sqrt(1 - abar)``;
    backdoor target ``j`` contributes the linear training target of ``spec``.
    """

    def __init__(self, atoms, sched: NoiseSchedule, spec: BackdoorSpec | None = None,
                 poison_prior: float = 0.5):
        super().__init__()
        atoms = as_tensor(atoms).double()
        if atoms.ndim != 4 or atoms.shape[0] == 0:
            raise ValueError("atoms must be a non-empty [N, C, H, W] batch")
        if spec is not None and not 0.0 < poison_prior < 1.0:
            raise ValueError("poison_prior must lie in (0, 1)")
        self.register_buffer("atoms", atoms)
        self.image_shape = tuple(atoms.shape[1:])
        self.sched = sched
        self.spec = spec
        self.prior = poison_prior if spec is not None else 0.0
        ab = torch.tensor(sched.alpha_bars, dtype=torch.float64)
        self.register_buffer("sqrt_ab", ab.sqrt())
        self.register_buffer("sqrt_1mab", (1.0 - ab).sqrt())
        if spec is not None:
            c = coefficients_for(spec, sched)
            for name in ("direct_content_coef", "direct_trigger_coef", "direct_noise_coef",
                         "target_x", "target_x0", "target_delta"):
                self.register_buffer(name, torch.tensor(getattr(c, name), dtype=torch.float64))
            self.register_buffer("targets", spec.target.stack.double())
            self.register_buffer("delta", spec.trigger.pattern.double())
        self.config = {"name": "MixtureDenoiser"}

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        dtype = x.dtype
        x = x.double()
        tt = timestep_tensor(t, x.shape[0], x.device) - 1
        d = x[0].numel()
        flat = x.flatten(1)
        sa, sn = self.sqrt_ab[tt][:, None], self.sqrt_1mab[tt][:, None]
        means = sa[:, None] * self.atoms.flatten(1)[None]          # [B, N, D]
        resid = flat[:, None] - means
        logw = (-0.5 * resid.pow(2).sum(-1) / sn**2 - d * torch.log(sn)
                + math.log((1.0 - self.prior) / self.atoms.shape[0]))
        preds = resid / sn[:, None]
        if self.spec is not None:
            A = self.direct_content_coef[tt][:, None, None]
            B = self.direct_trigger_coef[tt][:, None, None]
            S = self.direct_noise_coef[tt][:, None]
            tg = self.targets.flatten(1)[None]                       # [1, K, D]
            dl = self.delta.flatten()[None, None]
            bres = flat[:, None] - A * tg - B * dl
            blogw = (-0.5 * bres.pow(2).sum(-1) / S**2 - d * torch.log(S)
                     + math.log(self.prior / tg.shape[1]))
            bpred = (self.target_x[tt][:, None, None] * flat[:, None]
                     + self.target_x0[tt][:, None, None] * tg
                     + self.target_delta[tt][:, None, None] * dl)
            logw = torch.cat([logw, blogw], dim=1)
            preds = torch.cat([preds, bpred], dim=1)
        w = torch.softmax(logw, dim=1)
        out = (w[..., None] * preds).sum(1)
        return out.reshape(x.shape).to(dtype)


class StubDenoiser(nn.Module):
    """Smooth nonlinear map ``x -> a_t x + tanh(conv(x)) * s_t`` in double precision."""

    def __init__(self, channels: int = 1, size: int = 4, seed: int = 0, T: int = 1000):
        super().__init__()
        g = torch.Generator().manual_seed(int(seed))
        self.conv = nn.Conv2d(channels, channels, 3, padding=1).double()
        with torch.no_grad():
            self.conv.weight.copy_(0.3 * torch.randn(self.conv.weight.shape, generator=g, dtype=torch.float64))
            self.conv.bias.copy_(0.1 * torch.randn(self.conv.bias.shape, generator=g, dtype=torch.float64))
        steps = torch.arange(1, T + 1, dtype=torch.float64)
        self.register_buffer("lin", 0.6 + 0.3 * torch.cos(steps / T * math.pi))
        self.register_buffer("scale", 0.5 + 0.2 * torch.sin(steps / T * math.pi))
        self.image_shape = (channels, size, size)
        self.config = {"name": "StubDenoiser"}

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        tt = timestep_tensor(t, x.shape[0], x.device) - 1
        x = x.double()
        return self.lin[tt][:, None, None, None] * x + self.scale[tt][:, None, None, None] * torch.tanh(self.conv(x))
