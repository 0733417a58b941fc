"""Trigger reinforcement against a freshly backdoored model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn

from .attacks import BackdoorSpec, TriggerPattern, train_backdoor
from .denoiser import clone_model
from .diffusion import TrainConfig
from .inversion import InversionConfig, InversionDiverged, invert_trigger
from .metrics import asr
from .schedule import NoiseSchedule
from .shift import ShiftProfile


@dataclass
class AmplifyResult:
    model: nn.Module
    reinforced: TriggerPattern
    original: TriggerPattern
    asr_before: float
    asr_after: float
    timings: dict = field(default_factory=dict)
    loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.reinforced.shape != self.original.shape:
            raise ValueError("reinforced and original triggers differ in shape")


def reinforce_trigger(model: nn.Module, original: TriggerPattern, sched: NoiseSchedule, n_mds: int,
                      profile: ShiftProfile, *, refine_dc: int | None = None,
                      cfg: InversionConfig | None = None, seed: int = 0):
    """Start from the known trigger and pull ``eps_theta`` towards ``lambda_t * original``.

    Returns ``(reinforced, loss_trace)``; ``original`` is never modified.
    """
    base = cfg or InversionConfig()
    anchor = original.pattern.detach().clone()
    if n_mds == 0 and not refine_dc:
        return TriggerPattern(anchor.clone(), "reinforced"), []
    mode = "two-stage" if refine_dc else "mds-only"
    run_cfg = replace(base, n_mds=n_mds, n_dc=int(refine_dc or 0), mode=mode)
    res = invert_trigger(model, profile, run_cfg, sched, seed, init=anchor, anchor=anchor)
    return TriggerPattern(res.trigger.pattern, "reinforced"), res.loss_trace["mds"]


def amplify(clean_model: nn.Module, spec: BackdoorSpec, sched: NoiseSchedule, n_mds: int,
            profile: ShiftProfile, refine_dc: int | None = None, *, dataset=None,
            train_cfg: TrainConfig | None = None, tau: float, n_eval: int = 64, seed: int = 0,
            cfg: InversionConfig | None = None, backdoored: nn.Module | None = None) -> AmplifyResult:
    """Backdoor ``clean_model`` with ``spec`` and reinforce its trigger.

    ``backdoored`` skips the training step when a matching model already
    exists. Both ASRs use the same sample count, seed and ``tau``.
    If the reinforcement diverges, the partial result is returned with the
    original trigger in place of the reinforced one.
    """
    if n_mds < 0:
        raise ValueError("n_mds must be non-negative")
    timings = {}
    t0 = time.perf_counter()
    if backdoored is None:
        if dataset is None or train_cfg is None:
            raise ValueError("dataset and train_cfg are required to backdoor the model")
        backdoored = train_backdoor(clone_model(clean_model), dataset, spec, sched, train_cfg)
    timings["backdoor_s"] = time.perf_counter() - t0

    original = spec.trigger
    t0 = time.perf_counter()
    try:
        reinforced, trace = reinforce_trigger(backdoored, original, sched, n_mds, profile,
                                              refine_dc=refine_dc, cfg=cfg, seed=seed)
    except InversionDiverged as err:
        reinforced, trace = original, err.partial.loss_trace["mds"]
    timings["reinforce_s"] = time.perf_counter() - t0

    target = spec.target
    before = asr(backdoored, original, target, n_eval, tau, sched, seed)
    after = asr(backdoored, reinforced, target, n_eval, tau, sched, seed)
    return AmplifyResult(backdoored, reinforced, original, before, after, timings, trace)


def original_untouched(result: AmplifyResult, spec: BackdoorSpec) -> bool:
    return bool(torch.equal(result.original.pattern, spec.trigger.pattern))
