"""Backdoor detection from an inverted trigger.

Two rules are combined with OR: a generation rule (stamped samples collapse
onto few outputs) and a trigger rule (the inverted trigger's entries are far
from a standard Gaussian, relative to a threshold fitted on benign models).
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .diffusion import as_tensor, generate
from .inversion import InversionConfig, invert_trigger
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


@dataclass
class DetectionConfig:
    K: int = 16
    k_ratio: float = 5.0
    kl_threshold: float = math.inf
    norm: str = "l1"
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.k_ratio <= 1:
            raise ValueError("k_ratio must exceed 1")
        if self.norm not in ("l1", "l2"):
            raise ValueError("norm must be 'l1' or 'l2'")


@dataclass
class DetectionVerdict:
    sim_trigger: float
    sim_clean: float
    kl_stat: float
    generation_flag: bool
    trigger_flag: bool
    config: DetectionConfig = field(default_factory=DetectionConfig)
    model_id: str = ""

    @property
    def combined_flag(self) -> bool:
        return self.generation_flag or self.trigger_flag

    def to_row(self) -> dict:
        return {"model_id": self.model_id, "sim_clean": self.sim_clean, "sim_trigger": self.sim_trigger,
                "kl_stat": self.kl_stat, "generation_flag": self.generation_flag,
                "trigger_flag": self.trigger_flag, "combined_flag": self.combined_flag}

    def to_json(self) -> str:
        return json.dumps({**self.to_row(), "config": asdict(self.config)})


def mean_pairwise_distance(samples: torch.Tensor, norm: str = "l1") -> float:
    """Average distance over all unordered pairs; ``l1`` is mean absolute difference per entry."""
    x = as_tensor(samples).flatten(1).double()
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    dists = []
    for i, j in itertools.combinations(range(x.shape[0]), 2):
        d = x[i] - x[j]
        dists.append(d.abs().mean() if norm == "l1" else torch.linalg.vector_norm(d))
    return float(torch.stack(dists).mean())


def sim_score(model: nn.Module, stamp, K: int, seed: int, sched: NoiseSchedule, norm: str = "l1") -> float:
    if K < 2:
        raise ValueError("K must be >= 2")
    stamp = getattr(stamp, "pattern", stamp)
    return mean_pairwise_distance(generate(model, sched, K, seed, stamp).data, norm)


def generation_rule(sim_clean: float, sim_trigger: float, k_ratio: float) -> bool:
    if sim_trigger <= 0.0:
        return True
    return sim_clean >= k_ratio * sim_trigger


def generation_based_detect(model: nn.Module, inverted, cfg: DetectionConfig, sched: NoiseSchedule):
    """Returns ``(flag, sim_clean, sim_trigger)``; both scores use the same noise seed."""
    sim_trigger = sim_score(model, inverted, cfg.K, cfg.seed, sched, cfg.norm)
    sim_clean = sim_score(model, None, cfg.K, cfg.seed, sched, cfg.norm)
    return generation_rule(sim_clean, sim_trigger, cfg.k_ratio), sim_clean, sim_trigger


def kl_statistic(inverted) -> float:
    """KL( N(mu, sigma^2) || N(0, 1) ) for moments fitted to the trigger entries."""
    x = as_tensor(getattr(inverted, "pattern", inverted)).double().flatten()
    mu = float(x.mean())
    sigma = float(x.std(unbiased=False))
    if sigma < SIGMA_FLOOR:
        log.warning("inverted trigger is nearly constant (sigma=%.3g); clamping", sigma)
        sigma = SIGMA_FLOOR
    return math.log(1.0 / sigma) + (sigma**2 + mu**2) / 2.0 - 0.5


def threshold_from_stats(stats, margin: float = 1.2) -> float:
    stats = list(stats)
    if len(stats) < 3:
        raise ValueError("calibration needs at least three benign models")
    return max(stats) * margin


def calibrate_threshold(benign_models, inversion_cfg: InversionConfig, sched: NoiseSchedule, profile,
                        *, seed: int = 0, margin: float = 1.2) -> float:
    """Invert each benign model and scale the largest KL statistic by ``margin``."""
    benign_models = list(benign_models)
    if len(benign_models) < 3:
        raise ValueError("calibration needs at least three benign models")
    stats = [kl_statistic(invert_trigger(m, profile, inversion_cfg, sched, seed).trigger) for m in benign_models]
    return threshold_from_stats(stats, margin)


def detect(model: nn.Module, inverted, cfg: DetectionConfig, sched: NoiseSchedule, model_id: str = "") -> DetectionVerdict:
    gen_flag, sim_clean, sim_trigger = generation_based_detect(model, inverted, cfg, sched)
    kl = kl_statistic(inverted)
    return DetectionVerdict(sim_trigger, sim_clean, kl, gen_flag, kl > cfg.kl_threshold, cfg, model_id)
