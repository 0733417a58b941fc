"""Trigger-shift scales: how much of the trigger the denoiser predicts at each step."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .attacks import (BackdoorSpec, Method, TriggerPattern, VillanSchedulers, _villan_tables,
                      train_backdoor, trojdiff_kt)
from .denoiser import clone_model, frozen
from .diffusion import TrainConfig, posterior_step
from .schedule import NoiseSchedule


@dataclass
class ShiftProfile:
    """``lambdas[i]`` is the trigger-shift scale at timestep ``timesteps[i]``."""

    timesteps: np.ndarray
    lambdas: np.ndarray
    provenance: dict = field(default_factory=dict)
    schedule_hash: str = ""

    def __post_init__(self):
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if self.timesteps.shape != self.lambdas.shape:
            raise ValueError("timesteps and lambdas differ in length")
        if not np.all(np.isfinite(self.lambdas)):
            raise ValueError("non-finite trigger-shift scale")
        self._index = {int(t): i for i, t in enumerate(self.timesteps)}

    def at(self, t: int) -> float:
        try:
            return float(self.lambdas[self._index[int(t)]])
        except KeyError:
            raise KeyError(f"profile does not cover timestep {t}") from None

    def covers(self, timesteps) -> bool:
        return all(int(t) in self._index for t in timesteps)

    def to_json(self, path) -> None:
        doc = {
            "lambdas": {str(int(t)): float(v) for t, v in zip(self.timesteps, self.lambdas)},
            "provenance": self.provenance,
            "schedule_hash": self.schedule_hash,
        }
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def from_json(cls, path) -> "ShiftProfile":
        doc = json.loads(Path(path).read_text())
        items = sorted(((int(k), v) for k, v in doc["lambdas"].items()), reverse=True)
        return cls([k for k, _ in items], [v for _, v in items], doc.get("provenance", {}),
                   doc.get("schedule_hash", ""))

    @classmethod
    def constant(cls, value: float, timesteps, note: str = "constant") -> "ShiftProfile":
        ts = np.asarray(list(timesteps))
        return cls(ts, np.full(ts.shape, float(value)), {"kind": note})


def lambda_whitebox(method, sched: NoiseSchedule, gamma: float | None = None,
                    villan: VillanSchedulers | None = None) -> ShiftProfile:
    """Closed-form scales for every timestep ``T .. 1``."""
    method = Method(method)
    alphas, abars = sched.alphas, sched.alpha_bars
    if method is Method.BADDIFFUSION:
        lam = (1.0 - np.sqrt(alphas)) * np.sqrt(1.0 - abars) / (1.0 - alphas)
        params = {}
    elif method is Method.TROJDIFF:
        if gamma is None:
            raise ValueError("TrojDiff profile needs gamma")
        kt = np.array([trojdiff_kt(sched, t) for t in range(1, sched.T + 1)])
        lam = kt * (1.0 - gamma) * np.sqrt(1.0 - abars) / (1.0 - alphas)
        params = {"gamma": gamma}
    else:
        if villan is None:
            raise ValueError("VillanDiffusion profile needs scheduler functions")
        v, h, *_ = _villan_tables(villan, sched.T)
        lam = h * np.sqrt(alphas) * np.sqrt(1.0 - abars) / (v * (1.0 - alphas))
        params = {"villan": villan.name}
    ts = np.arange(sched.T, 0, -1)
    return ShiftProfile(ts, lam[ts - 1], {"kind": "whitebox", "method": method.value, **params},
                        sched.content_hash())


def profiled_timesteps(sched: NoiseSchedule, max_chain: int = 50, full_range: bool = False) -> np.ndarray:
    if full_range:
        return np.arange(sched.T, 0, -1)
    return np.arange(sched.T, max(sched.T - max_chain, 1) - 1, -1)


@torch.no_grad()
def estimate_lambda_graybox(model_copy: nn.Module, surrogate: TriggerPattern, sched: NoiseSchedule,
                            timesteps=None, *, n_draws: int = 8, seed: int = 0) -> ShiftProfile:
    """Least-squares scale ``(eps_theta . d) / |d|^2`` along a stamped reverse chain.

    ``model_copy`` must already carry a backdoor for ``surrogate``. The chain
    starts at ``x_T = eps + d`` and is run down to the lowest requested
    timestep; scales are averaged over ``n_draws`` noise draws.
    """
    d = surrogate.pattern
    norm2 = float((d * d).sum())
    if norm2 == 0.0:
        raise ValueError("surrogate trigger has zero norm")
    ts = profiled_timesteps(sched) if timesteps is None else np.asarray(sorted(set(map(int, timesteps)), reverse=True))
    wanted = set(ts.tolist())
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn((n_draws, *d.shape), generator=gen) + d
    found = {}
    with frozen(model_copy):
        for t in range(sched.T, int(ts.min()) - 1, -1):
            eps = model_copy(x, t)
            if t in wanted:
                found[t] = float(((eps * d).flatten(1).sum(1) / norm2).mean())
            noise = torch.randn(x.shape, generator=gen) if t > 1 else None
            x = posterior_step(x, eps, t, sched, noise)
    return ShiftProfile(ts, [found[int(t)] for t in ts],
                        {"kind": "graybox", "surrogate": surrogate.name, "n_draws": n_draws, "seed": seed},
                        sched.content_hash())


def graybox_profile(model: nn.Module, surrogate_spec: BackdoorSpec, dataset, sched: NoiseSchedule,
                    train_cfg: TrainConfig, timesteps=None, *, n_draws: int = 8, seed: int = 0) -> ShiftProfile:
    """Backdoor a copy of ``model`` with the surrogate trigger, then profile the copy."""
    copy = train_backdoor(clone_model(model), dataset, surrogate_spec, sched, train_cfg)
    return estimate_lambda_graybox(copy, surrogate_spec.trigger, sched, timesteps, n_draws=n_draws, seed=seed)
