"""Noise-prediction networks.

Any ``torch.nn.Module`` whose ``forward(x, t)`` maps an image batch
``[B, C, H, W]`` and integer timesteps (int or ``[B]`` tensor, 1-based) to a
tensor of the same shape can serve as a denoiser. ``TinyUNet`` is the trained
architecture used at desk scale; analytic stand-ins live in ``oracle_models``.
"""
from __future__ import annotations

import copy
import math
from contextlib import contextmanager

import torch
import torch.nn as nn
import torch.nn.functional as F


def timestep_tensor(t, batch: int, device=None) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.to(device=device, dtype=torch.long)
        return t.expand(batch) if t.ndim == 0 else t
    return torch.full((batch,), int(t), dtype=torch.long, device=device)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=t.device, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


class ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)

    def forward(self, x, emb):
        h = self.conv1(F.silu(x)) + self.emb(emb)[:, :, None, None]
        return x + self.conv2(F.silu(h))


class TinyUNet(nn.Module):
    """Two-level residual U-Net with sinusoidal timestep embedding.

    Sized for 16x16 to 32x32 inputs; spatial dims must be divisible by 4.
    """

    def __init__(self, in_channels: int = 3, base: int = 16, emb_dim: int = 32, image_size: int = 16):
        super().__init__()
        if image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        self.config = {"name": "TinyUNet", "in_channels": in_channels, "base": base,
                       "emb_dim": emb_dim, "image_size": image_size}
        self.image_shape = (in_channels, image_size, image_size)
        c = base
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(in_channels, c, 3, padding=1)
        self.res0 = ResBlock(c, emb_dim)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.res1 = ResBlock(2 * c, emb_dim)
        self.down2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.res2 = ResBlock(2 * c, emb_dim)
        self.up2 = nn.Conv2d(4 * c, 2 * c, 3, padding=1)
        self.res3 = ResBlock(2 * c, emb_dim)
        self.up1 = nn.Conv2d(3 * c, c, 3, padding=1)
        self.conv_out = nn.Conv2d(c, in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        tt = timestep_tensor(t, x.shape[0], x.device)
        emb = self.time_mlp(sinusoidal_embedding(tt, self.emb_dim).to(x.dtype))
        h0 = self.res0(self.conv_in(x), emb)
        h1 = self.res1(self.down1(F.silu(h0)), emb)
        h2 = self.res2(self.down2(F.silu(h1)), emb)
        u = F.interpolate(h2, scale_factor=2, mode="nearest")
        u = self.res3(self.up2(torch.cat([u, h1], dim=1)), emb)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.up1(torch.cat([u, h0], dim=1))
        return self.conv_out(F.silu(u))


ARCHITECTURES = {"TinyUNet": TinyUNet}


def build_denoiser(config: dict) -> nn.Module:
    cfg = dict(config)
    name = cfg.pop("name")
    try:
        cls = ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}") from None
    return cls(**cfg)


def make_denoiser(config: dict, seed: int) -> nn.Module:
    """Build an architecture with weights drawn from a private seeded RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return build_denoiser(config)


def clone_model(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)


@contextmanager
def frozen(model: nn.Module):
    """Evaluate ``model`` read-only: eval mode, parameters excluded from autograd."""
    flags = [p.requires_grad for p in model.parameters()]
    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)
