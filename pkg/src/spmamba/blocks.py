"""Architectural units of the detector: stem, downsampling, ODSS blocks, PSA and SPPELAN."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, ConvBNAct, LayerNorm2d, Linear, Module
from .ssm import SelectiveSSM
from .tensor import Tensor

PHASE_ORDER = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True)
class StemConfig:
    in_ch: int = 3
    mid_ch: int = 8
    out_ch: int = 16


@dataclass(frozen=True)
class VCMConfig:
    in_ch: int
    out_ch: int
    phase_order: tuple[tuple[int, int], ...] = PHASE_ORDER


@dataclass(frozen=True)
class ODSSConfig:
    channels: int
    state_dim: int = 8
    ls_kernel: int = 3
    rg_expansion: int = 2
    share_routes: bool = True
    order: tuple[str, ...] = ("ls", "ss2d", "rg")


@dataclass(frozen=True)
class PSAConfig:
    channels: int
    branches: int = 4
    kernels: tuple[int, ...] = (3, 5, 7, 9)
    groups: tuple[int, ...] = (1, 4, 8, 16)
    reduction: int = 4

    def validate(self) -> None:
        if self.branches < 1 or self.channels % self.branches:
            raise ConfigError(f"PSA channels {self.channels} not divisible by {self.branches} branches")
        if len(self.kernels) < self.branches or len(self.groups) < self.branches:
            raise ConfigError("PSA needs one kernel size and group count per branch")
        if any(k % 2 == 0 for k in self.kernels[: self.branches]):
            raise ConfigError(f"PSA kernel sizes must be odd, got {self.kernels}")


@dataclass(frozen=True)
class SPPELANConfig:
    in_ch: int
    hidden_ch: int
    out_ch: int
    stages: int = 3
    pool_kernel: int = 5

    @property
    def concat_width(self) -> int:
        return (self.stages + 1) * self.hidden_ch


class SimpleStem(Module):
    """Two 3×3 stride-2 conv-BN-SiLU layers: H×W → ⌈H/2⌉ → H/4 for divisible sizes."""

    def __init__(self, cfg: StemConfig, rng: np.random.Generator):
        self.conv1 = ConvBNAct(cfg.in_ch, cfg.mid_ch, 3, rng, stride=2)
        self.conv2 = ConvBNAct(cfg.mid_ch, cfg.out_ch, 3, rng, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] < 4 or x.shape[3] < 4:
            raise DimensionError(f"stem needs H, W >= 4, got {x.shape[2:]}")
        return T.fault_point(self.conv2(self.conv1(x)), "stem")


def vcm_rearrange(x: Tensor, phase_order=PHASE_ORDER) -> Tensor:
    """Stack the four 2×2 sampling phases along channels: NCHW → N(4C)(H/2)(W/2)."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"vision clue merge needs even H and W, got {x.shape[2:]}")
    return T.concat_channels([x[:, :, i::2, j::2] for i, j in phase_order])


def vcm_restore(y: Tensor | np.ndarray, phase_order=PHASE_ORDER) -> np.ndarray:
    """Exact inverse of :func:`vcm_rearrange` (array level)."""
    yd = y.data if isinstance(y, Tensor) else np.asarray(y)
    n, c4, h2, w2 = yd.shape
    c = c4 // 4
    out = np.empty((n, c, 2 * h2, 2 * w2), dtype=yd.dtype)
    for k, (i, j) in enumerate(phase_order):
        out[:, :, i::2, j::2] = yd[:, k * c:(k + 1) * c]
    return out


class VisionClueMerge(Module):
    def __init__(self, cfg: VCMConfig, rng: np.random.Generator):
        self.phase_order = cfg.phase_order
        self.proj = ConvBNAct(4 * cfg.in_ch, cfg.out_ch, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.fault_point(self.proj(vcm_rearrange(x, self.phase_order)), "vcm")


class LSBlock(Module):
    """x + pointwise(SiLU(BN(depthwise(x))))."""

    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 3):
        self.dw = Conv2d(channels, channels, kernel, rng, groups=channels, bias=False)
        self.bn = BatchNorm2d(channels)
        self.pw = Conv2d(channels, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.fault_point(x + self.pw(T.silu(self.bn(self.dw(x)))), "ls")


class RGBlock(Module):
    """Residual gate: x + contract(u ⊙ σ(depthwise(u))) with u = expand(x)."""

    def __init__(self, channels: int, rng: np.random.Generator, expansion: int = 2, gated: bool = True):
        hidden = channels * expansion
        self.gated = gated
        self.expand = Conv2d(channels, hidden, 1, rng)
        self.dw = Conv2d(hidden, hidden, 3, rng, groups=hidden)
        self.contract = Conv2d(hidden, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        u = self.expand(x)
        if self.gated:
            u = u * T.sigmoid(self.dw(u))
        return T.fault_point(x + self.contract(u), "rg")


class SS2D(Module):
    """norm → 1×1 in-projection → depthwise 3×3 → SiLU → four-route scan → 1×1 out-projection."""

    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator, share_routes: bool = True):
        self.norm = LayerNorm2d(channels)
        self.in_proj = Conv2d(channels, channels, 1, rng)
        self.dw = Conv2d(channels, channels, 3, rng, groups=channels)
        self.ssm = SelectiveSSM(channels, state_dim, rng, share_routes)
        self.out_proj = Conv2d(channels, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        z = T.silu(self.dw(self.in_proj(self.norm(x))))
        return self.out_proj(T.fault_point(self.ssm(z), "ss2d"))


class ODSSBlock(Module):
    def __init__(self, cfg: ODSSConfig, rng: np.random.Generator):
        unknown = set(cfg.order) - {"ls", "ss2d", "rg"}
        if unknown:
            raise ConfigError(f"unknown ODSS stages {sorted(unknown)}")
        self.order = cfg.order
        self.ls = LSBlock(cfg.channels, rng, cfg.ls_kernel)
        self.ss2d = SS2D(cfg.channels, cfg.state_dim, rng, cfg.share_routes)
        self.rg = RGBlock(cfg.channels, rng, cfg.rg_expansion)

    def forward(self, x: Tensor) -> Tensor:
        for stage in self.order:
            if stage == "ss2d":
                x = x + self.ss2d(x)
            else:
                x = getattr(self, stage)(x)
        return T.fault_point(x, "odss")


class ConvResBlock(Module):
    """Plain bottleneck residual used where the Mamba blocks are switched off."""

    def __init__(self, channels: int, rng: np.random.Generator):
        hidden = max(1, channels // 2)
        self.cv1 = ConvBNAct(channels, hidden, 1, rng)
        self.cv2 = ConvBNAct(hidden, channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.cv2(self.cv1(x))


class PSA(Module):
    """Pyramid split attention: per-branch multi-kernel convs re-weighted by a softmax over branches."""

    def __init__(self, cfg: PSAConfig, rng: np.random.Generator):
        cfg.validate()
        self.branches = cfg.branches
        self.split = cfg.channels // cfg.branches
        self.convs = [
            Conv2d(self.split, self.split, k, rng, groups=math.gcd(g, self.split), bias=False)
            for k, g in zip(cfg.kernels[: cfg.branches], cfg.groups[: cfg.branches])
        ]
        hidden = max(1, self.split // cfg.reduction)
        self.fc1 = Linear(self.split, hidden, rng)
        self.fc2 = Linear(hidden, self.split, rng)

    def se_weight(self, f: Tensor) -> Tensor:
        """Squeeze-excitation weights (N, C/S) for one branch's feature map."""
        g = T.global_avg_pool(f)
        g = T.reshape(g, g.shape[:2])
        return T.sigmoid(self.fc2(T.relu(self.fc1(g))))

    def attention(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        """Branch features and their softmax-normalised weights of shape (N, S, C/S)."""
        if x.shape[1] != self.branches * self.split:
            raise DimensionError(f"PSA built for {self.branches * self.split} channels, got {x.shape[1]}")
        parts = T.split_channels(x, [self.split] * self.branches)
        feats = [conv(p) for conv, p in zip(self.convs, parts)]
        n = x.shape[0]
        logits = T.concat([T.reshape(self.se_weight(f), (n, 1, self.split)) for f in feats], axis=1)
        return feats, T.softmax_axis(logits, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        feats, att = self.attention(x)
        n = x.shape[0]
        out = [f * T.reshape(att[:, i], (n, self.split, 1, 1)) for i, f in enumerate(feats)]
        return T.fault_point(T.concat_channels(out), "psa")


class SPPELAN(Module):
    def __init__(self, cfg: SPPELANConfig, rng: np.random.Generator):
        self.stages = cfg.stages
        self.k = cfg.pool_kernel
        self.cv1 = ConvBNAct(cfg.in_ch, cfg.hidden_ch, 1, rng)
        self.cv2 = ConvBNAct(cfg.concat_width, cfg.out_ch, 1, rng)

    def pyramid(self, x: Tensor) -> list[Tensor]:
        """``[F_0, F_1, ..., F_N]`` with ``F_i = maxpool(F_{i-1})``."""
        feats = [self.cv1(x)]
        for _ in range(self.stages):
            feats.append(T.maxpool2d(feats[-1], self.k, 1, self.k // 2))
        return feats

    def forward(self, x: Tensor) -> Tensor:
        return T.fault_point(self.cv2(T.concat_channels(self.pyramid(x))), "sppelan")
