"""Convolutional building blocks shared by every network in the package.

All convolutions are pre-activation units: instance norm, ReLU, then conv.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

IN_EPS = 1e-5


def scaled(channels: int, width: float) -> int:
    """Nominal channel count scaled by the global width multiplier (min 1)."""
    return max(1, int(round(channels * width)))


class SmoothedDilation(nn.Module):
    """Shared separable pre-filter of size (2r-1) x (2r-1).

    A single 2D filter is applied depthwise to every channel, so each
    output pixel of the following dilated conv sees a contiguous patch.
    Starts as the identity filter.
    """

    def __init__(self, dilation: int):
        super().__init__()
        if dilation < 2:
            raise ValueError(f"smoothed dilation needs dilation >= 2, got {dilation}")
        self.dilation = dilation
        size = 2 * dilation - 1
        weight = torch.zeros(1, 1, size, size)
        weight[0, 0, size // 2, size // 2] = 1.0
        self.weight = nn.Parameter(weight)

    def forward(self, x):
        c = x.shape[1]
        w = self.weight.expand(c, 1, -1, -1)
        return F.conv2d(x, w, padding=self.dilation - 1, groups=c)


class ConvUnit(nn.Module):
    """Instance norm -> ReLU -> (optional smoothing) -> conv, 'same' padding."""

    def __init__(self, in_channels, out_channels, kernel_size=3, dilation=1,
                 smoothed=False, affine=False, bias=True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be positive")
        if dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {dilation}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.norm = nn.InstanceNorm2d(in_channels, eps=IN_EPS, affine=affine)
        self.smooth = SmoothedDilation(dilation) if smoothed else None
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size,
                              padding=dilation * (kernel_size - 1) // 2,
                              dilation=dilation, bias=bias)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        x = F.relu(self.norm(x))
        if self.smooth is not None:
            x = self.smooth(x)
        return self.conv(x)


class ResBlock(nn.Module):
    """1x1 unit, 3x3 unit, two smoothed dilated (r=2) 3x3 units, plus a skip.

    The skip is the identity when channel counts agree and a bias-free 1x1
    projection otherwise.
    """

    def __init__(self, in_channels, out_channels, internal=None, dilation=2, smoothed=True):
        super().__init__()
        internal = internal or out_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.body = nn.Sequential(
            ConvUnit(in_channels, internal, 1),
            ConvUnit(internal, internal, 3),
            ConvUnit(internal, internal, 3, dilation=dilation, smoothed=smoothed),
            ConvUnit(internal, out_channels, 3, dilation=dilation, smoothed=smoothed),
        )
        if in_channels == out_channels:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Conv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return self.skip(x) + self.body(x)


class DenseTrunk(nn.Module):
    """Sequence of ResBlocks with block-level dense connectivity.

    Block n consumes the concatenation of the trunk input and every earlier
    block output, fused back to its nominal width by a 1x1 unit.
    """

    def __init__(self, specs):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.fuse = nn.ModuleList()
        seen = [specs[0][0]]
        for n, (cin, cout) in enumerate(specs):
            if n == 0:
                self.fuse.append(nn.Identity())
            else:
                self.fuse.append(ConvUnit(sum(seen), cin, 1))
            self.blocks.append(ResBlock(cin, cout))
            seen.append(cout)

    def forward(self, x):
        feats = [x]
        for n, (fuse, block) in enumerate(zip(self.fuse, self.blocks)):
            inp = feats[0] if n == 0 else fuse(torch.cat(feats, dim=1))
            feats.append(block(inp))
        return feats[-1]


def downsample(x):
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"downsample needs even spatial dims, got {tuple(x.shape[-2:])}")
    return F.avg_pool2d(x, 2)


def upsample(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
