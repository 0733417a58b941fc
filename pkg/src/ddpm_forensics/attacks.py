"""Unified backdoor forward process and poisoned training.

Every attack is described by per-step transition coefficients

    x*_t = a(t) x*_{t-1} + b(t) delta + sqrt(c(t)) z,      z ~ N(0, I)

(``c`` is a variance) together with the direct-sampling form

    x*_t = A_t x*_0 + B_t delta + S_t eps.

Backdoored denoisers are trained so that the *standard* ancestral sampler
reproduces the backdoor posterior mean; the resulting noise-prediction target
is linear in ``(x_t, x0, delta)`` and its coefficients are precomputed here.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .denoiser import timestep_tensor
from .diffusion import TrainConfig, _coef, _train_loop, as_tensor, forward_sample
from .schedule import NoiseSchedule


POISON_SEED_OFFSET = 7919


class Method(str, enum.Enum):
    BADDIFFUSION = "BadDiffusion"
    TROJDIFF = "TrojDiff"
    VILLANDIFFUSION = "VillanDiffusion"


@dataclass
class TriggerPattern:
    pattern: torch.Tensor
    name: str = "trigger"

    def __post_init__(self):
        self.pattern = as_tensor(self.pattern).clone()
        if not torch.isfinite(self.pattern).all():
            raise ValueError(f"trigger {self.name!r} has non-finite entries")

    @property
    def shape(self):
        return tuple(self.pattern.shape)


@dataclass
class TargetImage:
    """Backdoor target; a 4-D ``image`` stacks several targets."""

    image: torch.Tensor
    name: str = "target"

    def __post_init__(self):
        self.image = as_tensor(self.image).clone()
        if self.image.abs().max() > 1.0 + 1e-6:
            raise ValueError("target image must lie in [-1, 1]")

    @property
    def stack(self) -> torch.Tensor:
        return self.image if self.image.ndim == 4 else self.image[None]


@dataclass(frozen=True)
class VillanSchedulers:
    """Content, noise-amplitude and correction schedulers of a VillanDiffusion attack.

    Each maps an integer timestep in ``[0, T]`` to a real; at ``t = 0`` they
    must return 1, 0 and 0 respectively.
    """

    content: Callable[[int], float]
    noise: Callable[[int], float]
    correction: Callable[[int], float]
    name: str = "custom"


def ddpm_villan_schedulers(sched: NoiseSchedule) -> VillanSchedulers:
    """DDPM-compatible default: content sqrt(abar), noise sqrt(1-abar), correction 1 - content."""
    content = lambda t: math.sqrt(sched.alpha_bar(t))  # noqa: E731
    return VillanSchedulers(
        content=content,
        noise=lambda t: math.sqrt(1.0 - sched.alpha_bar(t)),
        correction=lambda t: 1.0 - content(t),
        name="ddpm-default",
    )


@dataclass
class BackdoorSpec:
    method: Method
    trigger: TriggerPattern
    target: TargetImage
    poison_rate: float = 0.3
    gamma: float | None = None
    villan: VillanSchedulers | None = None

    def __post_init__(self):
        self.method = Method(self.method)
        if not 0.0 < self.poison_rate <= 1.0:
            raise ValueError("poison_rate must lie in (0, 1]")
        if self.method is Method.TROJDIFF:
            if self.gamma is None:
                raise ValueError("TrojDiff requires gamma")
            if not 0.0 <= self.gamma <= 1.0:
                raise ValueError("gamma must lie in [0, 1]")
        elif self.gamma is not None:
            raise ValueError(f"gamma is only meaningful for TrojDiff, not {self.method.value}")
        if self.villan is not None and self.method is not Method.VILLANDIFFUSION:
            raise ValueError("villan schedulers given for a non-Villan method")
        if self.trigger.shape != tuple(self.target.stack.shape[1:]):
            raise ValueError("trigger and target shapes differ")

    def to_json(self, directory) -> Path:
        """Write ``spec.json`` plus ``trigger.npy`` / ``target.npy`` into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "trigger.npy", self.trigger.pattern.numpy())
        np.save(directory / "target.npy", self.target.image.numpy())
        if self.villan is not None and self.villan.name != "ddpm-default":
            raise ValueError("only the default Villan schedulers are serialisable")
        doc = {
            "method": self.method.value,
            "trigger": {"file": "trigger.npy", "name": self.trigger.name},
            "target": {"file": "target.npy", "name": self.target.name},
            "poison_rate": self.poison_rate,
            "gamma": self.gamma,
            "villan": None if self.villan is None else self.villan.name,
        }
        path = directory / "spec.json"
        path.write_text(json.dumps(doc, indent=2))
        return path

    @classmethod
    def from_json(cls, path, sched: NoiseSchedule | None = None) -> "BackdoorSpec":
        path = Path(path)
        doc = json.loads(path.read_text())
        villan = None
        if doc.get("villan"):
            if sched is None:
                raise ValueError("a schedule is needed to rebuild Villan schedulers")
            villan = ddpm_villan_schedulers(sched)
        return cls(
            method=Method(doc["method"]),
            trigger=TriggerPattern(np.load(path.parent / doc["trigger"]["file"]), doc["trigger"]["name"]),
            target=TargetImage(np.load(path.parent / doc["target"]["file"]), doc["target"]["name"]),
            poison_rate=float(doc["poison_rate"]),
            gamma=doc.get("gamma"),
            villan=villan,
        )


@dataclass
class ScheduleCoefficients:
    """Per-timestep coefficient tables, 0-based (index ``t - 1``)."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    direct_content_coef: np.ndarray
    direct_trigger_coef: np.ndarray
    direct_noise_coef: np.ndarray
    # noise-prediction target = target_x * x_t + target_x0 * x0 + target_delta * delta
    target_x: np.ndarray = field(repr=False, default=None)
    target_x0: np.ndarray = field(repr=False, default=None)
    target_delta: np.ndarray = field(repr=False, default=None)


def trojdiff_kt(sched: NoiseSchedule, t: int) -> float:
    """Per-step trigger weight making TrojDiff's trigger coefficient telescope.

    Chosen so that ``sqrt(alpha_t) * sqrt(1 - abar_{t-1}) + k_t = sqrt(1 - abar_t)``.
    """
    a = sched.alpha(t)
    return math.sqrt(1.0 - sched.alpha_bar(t)) - math.sqrt(a * (1.0 - sched.alpha_bar(t - 1)))


def _villan_tables(villan: VillanSchedulers, T: int):
    content = np.array([villan.content(t) for t in range(T + 1)])
    noise = np.array([villan.noise(t) for t in range(T + 1)])
    corr = np.array([villan.correction(t) for t in range(T + 1)])
    if not (math.isclose(content[0], 1.0) and abs(noise[0]) < 1e-12 and abs(corr[0]) < 1e-12):
        raise ValueError("Villan schedulers must start at (1, 0, 0) for t = 0")
    v = content[1:] / content[:-1]
    # h_t = rho(t) - sum_{i<t} (prod_{j=i+1}^{t} v_j) h_i, accumulated left to right
    h = np.empty(T)
    carried = 0.0
    for i in range(T):
        carried = v[i] * carried
        h[i] = corr[i + 1] - carried
        carried += h[i]
    w = noise[1:] ** 2 - v**2 * noise[:-1] ** 2
    return v, h, w, content[1:], corr[1:], noise[1:]


def _target_tables(a, b, c, A, B, S, sched: NoiseSchedule):
    """Linear coefficients of the posterior-matching noise-prediction target."""
    A_prev = np.concatenate([[1.0], A[:-1]])
    B_prev = np.concatenate([[0.0], B[:-1]])
    V_prev = np.concatenate([[0.0], S[:-1] ** 2])
    k = V_prev * a / (S**2)
    g = np.sqrt(1.0 - sched.alpha_bars) / (1.0 - sched.alphas)
    ra = np.sqrt(sched.alphas)
    tx = g * (1.0 - ra * k)
    tx0 = -g * ra * (1.0 - k * a) * A_prev
    td = -g * ra * ((1.0 - k * a) * B_prev - k * b)
    return tx, tx0, td


def coefficients_for(spec: BackdoorSpec | Method, sched: NoiseSchedule, *, gamma: float | None = None,
                     villan: VillanSchedulers | None = None) -> ScheduleCoefficients:
    """Transition, direct-sampling and training-target tables for an attack.

    Accepts a full ``BackdoorSpec`` or a bare method tag plus its parameters.
    """
    if isinstance(spec, BackdoorSpec):
        method, gamma, villan = spec.method, spec.gamma, spec.villan
    else:
        method = Method(spec)
    alphas, abars = sched.alphas, sched.alpha_bars
    if method is Method.BADDIFFUSION:
        a = np.sqrt(alphas)
        b = 1.0 - np.sqrt(alphas)
        c = 1.0 - alphas
        A, B, S = np.sqrt(abars), 1.0 - np.sqrt(abars), np.sqrt(1.0 - abars)
    elif method is Method.TROJDIFF:
        if gamma is None:
            raise ValueError("TrojDiff requires gamma")
        kt = np.array([trojdiff_kt(sched, t) for t in range(1, sched.T + 1)])
        a = np.sqrt(alphas)
        b = kt * (1.0 - gamma)
        # variance consistent with the direct noise amplitude gamma*sqrt(1-abar)
        c = gamma**2 * (1.0 - alphas)
        A, B, S = np.sqrt(abars), np.sqrt(1.0 - abars) * (1.0 - gamma), np.sqrt(1.0 - abars) * gamma
    elif method is Method.VILLANDIFFUSION:
        if villan is None:
            raise ValueError("VillanDiffusion requires scheduler functions")
        a, b, c, A, B, S = _villan_tables(villan, sched.T)
    else:  # pragma: no cover
        raise ValueError(method)
    if np.any(S**2 <= 0):
        # degenerate noise (TrojDiff gamma=0): target tables undefined
        tx = tx0 = td = None
    else:
        tx, tx0, td = _target_tables(a, b, c, A, B, S, sched)
    return ScheduleCoefficients(a, b, c, A, B, S, tx, tx0, td)


def backdoor_forward_sample(spec: BackdoorSpec, x0, t, eps: torch.Tensor, sched: NoiseSchedule,
                            coefs: ScheduleCoefficients | None = None) -> torch.Tensor:
    """Direct sample of the backdoored chain at ``t`` from target images ``x0``."""
    x0 = as_tensor(getattr(x0, "image", x0))
    if x0.ndim == 3:
        x0 = x0.expand(eps.shape[0], *x0.shape)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    delta = spec.trigger.pattern
    if delta.shape != x0.shape[1:]:
        raise ValueError("trigger shape does not match images")
    coefs = coefs or coefficients_for(spec, sched)
    tt = timestep_tensor(t, x0.shape[0], x0.device)
    if tt.min() < 1 or tt.max() > sched.T:
        raise ValueError(f"timestep outside [1, {sched.T}]")
    return (_coef(coefs.direct_content_coef, tt, x0) * x0
            + _coef(coefs.direct_trigger_coef, tt, x0) * delta
            + _coef(coefs.direct_noise_coef, tt, x0) * eps)


def backdoor_eps_target(coefs: ScheduleCoefficients, t, xt: torch.Tensor, x0: torch.Tensor,
                        delta: torch.Tensor) -> torch.Tensor:
    tt = timestep_tensor(t, xt.shape[0], xt.device)
    return (_coef(coefs.target_x, tt, xt) * xt + _coef(coefs.target_x0, tt, xt) * x0
            + _coef(coefs.target_delta, tt, xt) * delta)


def train_backdoor(model: nn.Module, dataset, spec: BackdoorSpec, sched: NoiseSchedule,
                   cfg: TrainConfig) -> nn.Module:
    """Poisoned fine-tuning.

    Each step is a poisoned batch with probability ``spec.poison_rate``,
    otherwise a benign batch. The coin comes from its own generator so that
    benign batches draw exactly what ``train_clean`` would.
    """
    data = as_tensor(dataset)
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    coefs = coefficients_for(spec, sched)
    if coefs.target_x is None:
        raise ValueError("attack has zero noise amplitude; cannot train")
    targets = spec.target.stack
    delta = spec.trigger.pattern
    bs = cfg.batch_size
    coin = torch.Generator().manual_seed(int(cfg.seed) + POISON_SEED_OFFSET)

    def batch_loss(gen):
        poisoned = bool(torch.rand((), generator=coin) < spec.poison_rate)
        pool = targets if poisoned else data
        x0 = pool[torch.randint(0, pool.shape[0], (bs,), generator=gen)]
        t = torch.randint(1, sched.T + 1, (bs,), generator=gen)
        eps = torch.randn((bs, *data.shape[1:]), generator=gen)
        if poisoned:
            xt = backdoor_forward_sample(spec, x0, t, eps, sched, coefs)
            goal = backdoor_eps_target(coefs, t, xt, x0, delta)
        else:
            xt = forward_sample(x0, t, eps, sched)
            goal = eps
        return ((model(xt, t) - goal) ** 2).mean()

    return _train_loop(model, cfg, batch_loss)
