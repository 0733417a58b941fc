"""Trigger inversion through the unrolled reverse chain.

The candidate trigger ``delta`` is stamped on the initial noise, the sampler
is run ``k`` steps from ``T`` and the network's noise prediction at ``T - k``
is scored. Two objectives are available: a distribution-shift loss that asks
the prediction to equal ``lambda_{T-k} * delta``, and a consistency loss that
asks two different noise draws to agree once their own noise is removed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .attacks import TriggerPattern
from .denoiser import frozen
from .diffusion import image_shape_of, posterior_step
from .schedule import NoiseSchedule
from .shift import ShiftProfile

MODES = ("two-stage", "mds-only", "dc-only", "single-step-baseline")


@dataclass
class InversionConfig:
    n_mds: int = 30
    n_dc: int = 500
    lr_mds: float = 0.1
    lr_dc: float = 0.5
    batch_mds: int = 8
    batch_dc: int = 16
    max_chain: int = 50
    mode: str = "two-stage"
    optimizer: str = "sgd"
    baseline_lambda: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        for name in ("n_mds", "n_dc", "max_chain"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("lr_mds", "lr_dc", "batch_mds", "batch_dc"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InversionResult:
    trigger: TriggerPattern
    loss_trace: dict = field(default_factory=lambda: {"mds": [], "dc": []})
    config: InversionConfig = field(default_factory=InversionConfig)
    profile: ShiftProfile | None = None
    seed: int = 0

    def save(self, directory) -> Path:
        """Write ``trigger.npy``, ``inversion.json`` and ``losses.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "trigger.npy", self.trigger.pattern.numpy())
        meta = {"config": self.config.to_dict(), "seed": self.seed, "trigger": "trigger.npy",
                "profile": None if self.profile is None else self.profile.provenance}
        (directory / "inversion.json").write_text(json.dumps(meta, indent=2))
        with open(directory / "losses.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "iteration", "loss"])
            for stage in ("mds", "dc"):
                for i, v in enumerate(self.loss_trace.get(stage, [])):
                    w.writerow([stage, i, repr(float(v))])
        return directory

    @classmethod
    def load(cls, directory) -> "InversionResult":
        directory = Path(directory)
        meta = json.loads((directory / "inversion.json").read_text())
        trace = {"mds": [], "dc": []}
        with open(directory / "losses.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                trace[row["stage"]].append(float(row["loss"]))
        return cls(TriggerPattern(np.load(directory / meta["trigger"]), "inverted"), trace,
                   InversionConfig(**meta["config"]), None, meta["seed"])


class InversionDiverged(RuntimeError):
    def __init__(self, stage: str, partial: InversionResult):
        super().__init__(f"non-finite loss during {stage} stage")
        self.partial = partial


def _sq_norm(diff: torch.Tensor) -> torch.Tensor:
    """Squared L2 norm per sample, averaged over the batch."""
    return diff.pow(2).flatten(1).sum(1).mean()


def chained_eps(model: nn.Module, delta: torch.Tensor, eps: torch.Tensor, k: int, sched: NoiseSchedule,
                *, max_chain: int | None = None, noise_seed: int | None = None) -> torch.Tensor:
    """Noise prediction after ``k`` stamped reverse steps from ``x_T = eps + delta``.

    Per-step sampler noise comes from a generator seeded with ``noise_seed``
    (``None`` runs the mean chain). Differentiable w.r.t. ``delta``.
    """
    if k < 0 or k >= sched.T:
        raise ValueError(f"chain length {k} outside [0, {sched.T - 1}]")
    if max_chain is not None and k > max_chain:
        raise ValueError(f"chain length {k} exceeds the configured maximum {max_chain}")
    gen = None if noise_seed is None else torch.Generator().manual_seed(int(noise_seed))
    x = eps + delta
    t = sched.T
    for _ in range(k):
        noise = None if gen is None else torch.randn(x.shape, generator=gen, dtype=x.dtype)
        x = posterior_step(x, model(x, t), t, sched, noise)
        t -= 1
    return model(x, t)


def loss_mds(model: nn.Module, delta: torch.Tensor, k: int, lambda_t: float, eps: torch.Tensor,
             sched: NoiseSchedule, *, noise_seed: int | None = None) -> torch.Tensor:
    """Batch mean of the squared L2 gap between the chained prediction and ``lambda_t * delta``."""
    pred = chained_eps(model, delta, eps, k, sched, noise_seed=noise_seed)
    return _sq_norm(pred - lambda_t * delta)


def identity_shift(eps: torch.Tensor) -> torch.Tensor:
    return eps


def loss_dc(model: nn.Module, delta: torch.Tensor, k: int, eps1: torch.Tensor, eps2: torch.Tensor,
            sched: NoiseSchedule, noise_shift: Callable = identity_shift, *,
            noise_seed: int | None = None) -> torch.Tensor:
    """Disagreement of the noise-removed predictions for two noise draws.

    Both branches share the per-step sampler noise so that only the initial
    draws differ.
    """
    p1 = chained_eps(model, delta, eps1, k, sched, noise_seed=noise_seed) - noise_shift(eps1)
    p2 = chained_eps(model, delta, eps2, k, sched, noise_seed=noise_seed) - noise_shift(eps2)
    return _sq_norm(p1 - p2)


def _optimizer(name: str, param: torch.Tensor, lr: float):
    if name == "adam":
        return torch.optim.Adam([param], lr=lr)
    return torch.optim.SGD([param], lr=lr)


def invert_trigger(model: nn.Module, profile: ShiftProfile | None, cfg: InversionConfig,
                   sched: NoiseSchedule, seed: int = 0, *, shape=None, init: torch.Tensor | None = None,
                   noise_shift: Callable = identity_shift, anchor: torch.Tensor | None = None) -> InversionResult:
    """Recover a trigger candidate from ``model``.

    The trigger starts from unit Gaussian noise (or ``init``). The
    distribution-shift stage draws a chain length ``k`` uniformly from
    ``[0, max_chain]`` each iteration and uses ``profile.at(T - k)``; the
    consistency stage then refines the result. ``anchor`` replaces ``delta``
    inside the distribution-shift target (used by amplification).
    """
    if cfg.max_chain >= sched.T:
        raise ValueError("max_chain must be smaller than T")
    shape = tuple(shape) if shape is not None else image_shape_of(model, init)
    gen = torch.Generator().manual_seed(int(seed))
    start = torch.randn(shape, generator=gen) if init is None else init.detach().clone().float()
    delta = start.clone().requires_grad_(True)

    run_mds = cfg.mode in ("two-stage", "mds-only", "single-step-baseline")
    run_dc = cfg.mode in ("two-stage", "dc-only")
    single = cfg.mode == "single-step-baseline"
    if run_mds and not single:
        needed = [sched.T - k for k in range(cfg.max_chain + 1)]
        if profile is None or not profile.covers(needed):
            raise ValueError("shift profile does not cover the sampled timesteps")

    result = InversionResult(TriggerPattern(start, "inverted"), {"mds": [], "dc": []}, cfg, profile, seed)

    def finish(stage):
        result.trigger = TriggerPattern(delta.detach().clone(), "inverted")
        if stage is not None:
            raise InversionDiverged(stage, result)
        return result

    with frozen(model):
        if run_mds:
            opt = _optimizer(cfg.optimizer, delta, cfg.lr_mds)
            for _ in range(cfg.n_mds):
                k = 0 if single else int(torch.randint(0, cfg.max_chain + 1, (), generator=gen))
                lam = cfg.baseline_lambda if single else profile.at(sched.T - k)
                eps = torch.randn((cfg.batch_mds, *shape), generator=gen)
                nseed = int(torch.randint(0, 2**31 - 1, (), generator=gen))
                pred = chained_eps(model, delta, eps, k, sched, noise_seed=nseed)
                goal = lam * (delta if anchor is None else anchor)
                loss = _sq_norm(pred - goal)
                if not math.isfinite(float(loss.detach())):
                    return finish("mds")
                result.loss_trace["mds"].append(float(loss.detach()))
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        if run_dc:
            opt = _optimizer(cfg.optimizer, delta, cfg.lr_dc)
            for _ in range(cfg.n_dc):
                k = int(torch.randint(0, cfg.max_chain + 1, (), generator=gen))
                eps1 = torch.randn((cfg.batch_dc, *shape), generator=gen)
                eps2 = torch.randn((cfg.batch_dc, *shape), generator=gen)
                nseed = int(torch.randint(0, 2**31 - 1, (), generator=gen))
                loss = loss_dc(model, delta, k, eps1, eps2, sched, noise_shift, noise_seed=nseed)
                if not math.isfinite(float(loss.detach())):
                    return finish("dc")
                result.loss_trace["dc"].append(float(loss.detach()))
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
    return finish(None)
