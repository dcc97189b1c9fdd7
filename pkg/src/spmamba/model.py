"""Toy-scale detector assembly: backbone, PAFPN neck and anchor-free heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .blocks import (PSA, SPPELAN, ConvResBlock, ODSSBlock, ODSSConfig, PSAConfig, SimpleStem, SPPELANConfig,
                     StemConfig, VCMConfig, VisionClueMerge)
from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvBNAct, Module
from .tensor import Tensor

STRIDES = (8, 16, 32)
LEVELS = ("P3", "P4", "P5")
BOX_PRIOR_CELLS = 2.0
OBJ_PRIOR = 0.01

# Ablation module switches: group -> (mamba, psa, sppelan)
ABLATION_GROUPS = {
    1: (False, False, False),
    2: (True, False, False),
    3: (False, True, False),
    4: (False, False, True),
    5: (True, True, False),
    6: (True, False, True),
    7: (True, True, True),
}


@dataclass
class ModelConfig:
    enable_mamba: bool = True
    enable_psa: bool = True
    enable_sppelan: bool = True
    width: int = 16
    depths: tuple[int, ...] = (1, 1, 1, 1)
    neck_depth: int = 1
    psa_level: str = "P5"
    psa_branches: int = 4
    num_classes: int = 4
    input_size: int = 96
    state_dim: int = 8
    share_routes: bool = True

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.validate()

    def validate(self) -> None:
        if self.psa_level not in LEVELS:
            raise ConfigError(f"psa_level must be one of {LEVELS}, got {self.psa_level!r}")
        if self.width < 2 or self.width % 2:
            raise ConfigError(f"width must be an even integer >= 2, got {self.width}")
        if self.enable_psa and self.width % self.psa_branches:
            raise ConfigError(f"width {self.width} not divisible by {self.psa_branches} PSA branches")
        if len(self.depths) != 4 or min(self.depths) < 1 or self.neck_depth < 1:
            raise ConfigError("need four backbone stage depths >= 1 and neck_depth >= 1")
        if self.num_classes < 1 or self.state_dim < 1:
            raise ConfigError("num_classes and state_dim must be positive")
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")

    @property
    def channels(self) -> tuple[int, int, int, int]:
        w = self.width
        return (w, 2 * w, 4 * w, 8 * w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def for_group(cls, group: int, **kw) -> "ModelConfig":
        m, p, s = ABLATION_GROUPS[group]
        return cls(enable_mamba=m, enable_psa=p, enable_sppelan=s, **kw)


@dataclass
class RawPrediction:
    """Per-level head outputs, each (N, 5 + classes, h, w): ltrb raw, objectness, class logits."""

    levels: list[Tensor]
    strides: tuple[int, ...] = STRIDES
    image_size: tuple[int, int] = (0, 0)
    num_classes: int = 4

    def grid_shapes(self) -> list[tuple[int, int]]:
        return [lv.shape[2:] for lv in self.levels]


class Head(Module):
    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator):
        self.stem = ConvBNAct(channels, channels, 3, rng)
        self.out = Conv2d(channels, 5 + num_classes, 1, rng)
        bias = self.out.bias.data
        bias[:4] = np.log(np.expm1(BOX_PRIOR_CELLS))
        bias[4] = np.log(OBJ_PRIOR / (1 - OBJ_PRIOR))
        bias[5:] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return self.out(self.stem(x))


class Detector(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c0, c1, c2, c3 = cfg.channels
        self.stem = SimpleStem(StemConfig(3, max(1, c0 // 2), c0), rng)
        self.stage1 = self._blocks(c0, cfg.depths[0], rng)
        self.vcm1 = VisionClueMerge(VCMConfig(c0, c1), rng)
        self.stage2 = self._blocks(c1, cfg.depths[1], rng)
        self.vcm2 = VisionClueMerge(VCMConfig(c1, c2), rng)
        self.stage3 = self._blocks(c2, cfg.depths[2], rng)
        self.vcm3 = VisionClueMerge(VCMConfig(c2, c3), rng)
        self.stage4 = self._blocks(c3, cfg.depths[3], rng)
        self.sppelan = SPPELAN(SPPELANConfig(c3, c3 // 2, c3), rng) if cfg.enable_sppelan else None
        psa_ch = {"P3": c1, "P4": c2, "P5": c3}[cfg.psa_level]
        self.psa = PSA(PSAConfig(psa_ch, branches=cfg.psa_branches), rng) if cfg.enable_psa else None
        nd = cfg.neck_depth
        self.reduce_td4 = ConvBNAct(c3 + c2, c2, 1, rng)
        self.td4 = self._blocks(c2, nd, rng)
        self.reduce_out3 = ConvBNAct(c2 + c1, c1, 1, rng)
        self.out3 = self._blocks(c1, nd, rng)
        self.down3 = ConvBNAct(c1, c1, 3, rng, stride=2)
        self.reduce_out4 = ConvBNAct(c1 + c2, c2, 1, rng)
        self.out4 = self._blocks(c2, nd, rng)
        self.down4 = ConvBNAct(c2, c2, 3, rng, stride=2)
        self.reduce_out5 = ConvBNAct(c2 + c3, c3, 1, rng)
        self.out5 = self._blocks(c3, nd, rng)
        self.heads = [Head(c, cfg.num_classes, rng) for c in (c1, c2, c3)]

    def _blocks(self, channels: int, depth: int, rng) -> list[Module]:
        if self.cfg.enable_mamba:
            odss = ODSSConfig(channels, self.cfg.state_dim, share_routes=self.cfg.share_routes)
            return [ODSSBlock(odss, rng) for _ in range(depth)]
        return [ConvResBlock(channels, rng) for _ in range(depth)]

    @staticmethod
    def _run(blocks, x):
        for b in blocks:
            x = b(x)
        return x

    def feature_inventory(self) -> list[str]:
        names = ["stem", "stage1", "vcm1", "stage2_P3", "vcm2", "stage3_P4", "vcm3", "stage4_P5"]
        if self.sppelan is not None:
            names.append("sppelan")
        if self.psa is not None:
            names.append(f"psa_{self.cfg.psa_level}")
        return names + ["neck_td4", "neck_out3", "neck_out4", "neck_out5"]

    def forward(self, x: Tensor, capture: dict | None = None) -> RawPrediction:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected N×3×S×S images, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise DimensionError(f"image size must be divisible by 32, got {x.shape[2:]}")
        feats = {}

        def keep(name, t):
            feats[name] = t
            return t

        s = keep("stem", self.stem(x))
        s = keep("stage1", self._run(self.stage1, s))
        s = keep("vcm1", self.vcm1(s))
        p3 = keep("stage2_P3", self._run(self.stage2, s))
        s = keep("vcm2", self.vcm2(p3))
        p4 = keep("stage3_P4", self._run(self.stage3, s))
        s = keep("vcm3", self.vcm3(p4))
        p5 = keep("stage4_P5", self._run(self.stage4, s))
        if self.sppelan is not None:
            p5 = keep("sppelan", self.sppelan(p5))
        if self.psa is not None:
            lv = self.cfg.psa_level
            if lv == "P3":
                p3 = keep("psa_P3", p3 + self.psa(p3))
            elif lv == "P4":
                p4 = keep("psa_P4", p4 + self.psa(p4))
            else:
                p5 = keep("psa_P5", p5 + self.psa(p5))

        td4 = keep("neck_td4", self._run(self.td4, self.reduce_td4(T.concat_channels([T.upsample_nearest(p5), p4]))))
        o3 = keep("neck_out3", self._run(self.out3, self.reduce_out3(T.concat_channels([T.upsample_nearest(td4), p3]))))
        o4 = keep("neck_out4", self._run(self.out4, self.reduce_out4(T.concat_channels([self.down3(o3), td4]))))
        o5 = keep("neck_out5", self._run(self.out5, self.reduce_out5(T.concat_channels([self.down4(o4), p5]))))
        if capture is not None:
            capture.update(feats)
        levels = [T.fault_point(h(o), "model") for h, o in zip(self.heads, (o3, o4, o5))]
        return RawPrediction(levels, STRIDES, (x.shape[2], x.shape[3]), self.cfg.num_classes)


def build_model(cfg: ModelConfig, seed: int = 0) -> Detector:
    cfg.validate()
    return Detector(cfg, np.random.default_rng(seed))
