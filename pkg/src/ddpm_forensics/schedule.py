"""Discrete DDPM noise schedules."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion coefficients for a chain of length ``T``.

    Arrays are stored 0-based; use the accessor methods with 1-based
    timesteps ``t in [1, T]``. ``alpha_bar(0)`` is defined as 1.
    """

    T: int
    betas: np.ndarray
    beta_start: float = field(default=float("nan"))
    beta_end: float = field(default=float("nan"))

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.shape[0] != self.T:
            raise ValueError(f"betas must have length T={self.T}")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        sigmas = np.sqrt(betas * (1.0 - prev) / (1.0 - alpha_bars))
        for name, arr in (("alphas", alphas), ("alpha_bars", alpha_bars), ("sigmas", sigmas)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        betas.setflags(write=False)

    def _check(self, t: int) -> int:
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return int(t) - 1

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check(t)])

    def alpha_bar(self, t: int) -> float:
        if int(t) == 0:
            return 1.0
        return float(self.alpha_bars[self._check(t)])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self._check(t)])

    def to_dict(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def content_hash(self) -> str:
        return hashlib.sha256(self.betas.tobytes()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))

    def __eq__(self, other):
        return isinstance(other, NoiseSchedule) and self.T == other.T and np.array_equal(self.betas, other.betas)

    def __hash__(self):
        return hash((self.T, self.betas.tobytes()))

    def __repr__(self):
        return f"NoiseSchedule({json.dumps(self.to_dict())})"


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ValueError("T must be an integer >= 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(int(T), betas, float(beta_start), float(beta_end))


def desk_schedule(T: int = 200) -> NoiseSchedule:
    """Linear schedule with the T=1000 bounds rescaled so alpha_bar_T stays near zero."""
    scale = 1000.0 / T
    return make_linear_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))
