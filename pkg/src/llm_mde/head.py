"""Adaptation head: token states over the patch grid → dense depth in meters."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import DepthMap
from .errors import ConfigError, ShapeError

LEAKY_SLOPE = 0.01
_UNIT_EPS = 1e-6


@dataclass(frozen=True)
class HeadConfig:
    width: int = 64
    grid: int = 14
    channels: tuple[int, int, int, int] = (16, 8, 8, 4)
    target: int = 224

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ConfigError("head needs exactly four channel widths (three blocks)")
        if self.grid * 8 > self.target:
            raise ConfigError(f"grid {self.grid} * 8 exceeds target resolution {self.target}")

    @classmethod
    def full_scale(cls, width: int = 768) -> "HeadConfig":
        return cls(width=width, channels=(128, 64, 32, 16))


class UpsampleBN(nn.Module):
    """2x nearest upsample → 3x3 conv → batch norm, plus a residual path, then leaky ReLU."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.bn = nn.BatchNorm2d(c_out, momentum=0.1)
        self.skip = nn.Conv2d(c_in, c_out, 1, bias=False) if c_in != c_out else None

    def pre_activation(self, x: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(x, scale_factor=2, mode="nearest")
        residual = up if self.skip is None else self.skip(up)
        return self.bn(self.conv(up)) + residual

    def forward(self, x):
        return F.leaky_relu(self.pre_activation(x), LEAKY_SLOPE)


class AdaptationHead(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.linear = nn.Linear(cfg.width, c[0])
        for i in range(3):
            self.add_module(f"block{i}", UpsampleBN(c[i], c[i + 1]))
        self.out = nn.Conv2d(c[3], 1, 1)

    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(3)]

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return head_forward(self, hidden)


def head_forward(head: AdaptationHead, hidden: torch.Tensor, vision_len: int | None = None) -> torch.Tensor:
    """``hidden`` is (B, T, D) or (T, D); the last ``g*g`` tokens are the patch grid.

    Returns unit depth (B, target, target) strictly inside (0, 1).
    """
    squeeze = hidden.ndim == 2
    if squeeze:
        hidden = hidden.unsqueeze(0)
    n = vision_len if vision_len is not None else head.cfg.grid ** 2
    g = math.isqrt(n)
    if g * g != n:
        raise ShapeError(f"{n} vision tokens do not form a square grid")
    if g != head.cfg.grid or hidden.shape[-2] < n:
        raise ShapeError(f"expected {head.cfg.grid ** 2} vision tokens, got {n} of {hidden.shape[-2]}")
    x = head.linear(hidden[:, -n:, :])                          # (B, N, C0)
    x = x.transpose(1, 2).reshape(x.shape[0], -1, g, g)         # row-major patch grid
    for block in head.blocks():
        x = block(x)
    x = head.out(x)
    x = F.interpolate(x, size=(head.cfg.target, head.cfg.target), mode="bilinear", align_corners=False)
    # affine squash keeps float32 outputs off 0 and 1 without cutting gradients
    unit = _UNIT_EPS + (1.0 - 2 * _UNIT_EPS) * torch.sigmoid(x[:, 0])
    return unit[0] if squeeze else unit


def check_depth_range(d_min: float, d_max: float) -> None:
    if not 0 < d_min < d_max:
        raise ConfigError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")


def to_metric_depth(unit, d_min: float = 1e-3, d_max: float = 10.0):
    """Affine map of unit depth onto (d_min, d_max); tensors in → tensors out, arrays in → DepthMap."""
    check_depth_range(d_min, d_max)
    depth = d_min + unit * (d_max - d_min)
    if isinstance(depth, torch.Tensor):
        return depth
    depth = np.asarray(depth)
    return DepthMap(depth, np.ones(depth.shape, dtype=bool))
