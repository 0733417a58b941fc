"""ASR, trigger distance and detection confusion metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .diffusion import as_tensor, generate
from .schedule import NoiseSchedule


@dataclass
class MetricReport:
    asr: float | None = None
    l2d: float | None = None
    sim: float | None = None
    acc: float | None = None
    tpr: float | None = None
    tnr: float | None = None
    n: int = 0
    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0
    match_threshold: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def per_sample_mse(samples: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-pixel MSE of each sample to its closest target (targets ``[K, C, H, W]``)."""
    s = samples.flatten(1)
    t = targets.reshape(targets.shape[0] if targets.ndim == 4 else 1, -1)
    return ((s[:, None, :] - t[None]) ** 2).mean(-1).min(dim=1).values


def calibrate_tau(target, references, *, noise_std: float = 0.1, seed: int = 0) -> float:
    """Match threshold halfway between a noisy-target MSE and a clean-sample MSE.

    ``references`` are clean images (dataset draws or unstamped samples).
    """
    tgt = as_tensor(getattr(target, "image", target))
    tgt = tgt if tgt.ndim == 4 else tgt[None]
    refs = as_tensor(references)
    gen = torch.Generator().manual_seed(int(seed))
    noisy = tgt[torch.arange(refs.shape[0]) % tgt.shape[0]]
    noisy = noisy + noise_std * torch.randn(noisy.shape, generator=gen)
    low = float(per_sample_mse(noisy, tgt).mean())
    high = float(per_sample_mse(refs, tgt).mean())
    if high <= low:
        raise ValueError("clean references are no farther from the target than noisy copies")
    return low + 0.5 * (high - low)


def asr(model: nn.Module, trigger, target, n: int, tau: float, sched: NoiseSchedule, seed: int = 0) -> float:
    """Fraction of ``n`` stamped generations within per-pixel MSE ``tau`` of the target."""
    if n < 1:
        raise ValueError("n must be >= 1")
    stamp = getattr(trigger, "pattern", trigger)
    samples = generate(model, sched, n, seed, stamp).data
    tgt = as_tensor(getattr(target, "image", target))
    return float((per_sample_mse(samples, tgt) < tau).float().mean())


def asr_of_samples(samples: torch.Tensor, target, tau: float) -> float:
    tgt = as_tensor(getattr(target, "image", target))
    return float((per_sample_mse(as_tensor(samples), tgt) < tau).float().mean())


def l2d(inverted, truth) -> float:
    a = as_tensor(getattr(inverted, "pattern", inverted)).double()
    b = as_tensor(getattr(truth, "pattern", truth)).double()
    if a.shape != b.shape:
        raise ValueError("trigger shapes differ")
    return float(torch.linalg.vector_norm(a - b))


def detection_metrics(verdicts, labels) -> MetricReport:
    """ACC/TPR/TNR from predicted flags (bools or verdict objects) and true labels."""
    preds = [bool(getattr(v, "combined_flag", v)) for v in verdicts]
    labels = [bool(x) for x in labels]
    if len(preds) != len(labels):
        raise ValueError("verdicts and labels differ in length")
    if not preds:
        raise ValueError("no verdicts")
    p, y = np.array(preds), np.array(labels)
    tp, fn = int(np.sum(p & y)), int(np.sum(~p & y))
    tn, fp = int(np.sum(~p & ~y)), int(np.sum(p & ~y))
    rate = lambda num, den: num / den if den else math.nan  # noqa: E731
    return MetricReport(acc=(tp + tn) / len(p), tpr=rate(tp, tp + fn), tnr=rate(tn, tn + fp),
                        n=len(p), tp=tp, fn=fn, tn=tn, fp=fp)
