"""Training-only hierarchical fusion head: multi-stage taps are projected to
the shared dim and resampled onto the stride-8 grid, where dense image-text
alignment happens. Nothing here sits on the deployed inference path."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import FeaturePyramid


def fuse_aligned(stride4: torch.Tensor, stride8: torch.Tensor | None,
                 stride16: torch.Tensor, include_mid: bool = True) -> torch.Tensor:
    """Resample channel-aligned maps onto the stride-8 grid and sum.

    stride-4 is 2x2 average pooled, stride-16 bilinearly upsampled x2. The
    stride-8 term is skipped when include_mid is false (the literal printed
    form of the fusion rule).
    """
    target = (stride4.shape[-2] // 2, stride4.shape[-1] // 2)
    if stride16.shape[-2] * 4 != stride4.shape[-2] or stride16.shape[-1] * 4 != stride4.shape[-1]:
        raise ValueError("stride mismatch: expected maps at strides {4, 8, 16}")
    out = F.avg_pool2d(stride4, 2) + F.interpolate(
        stride16, scale_factor=2, mode="bilinear", align_corners=False)
    if include_mid:
        if stride8 is None or tuple(stride8.shape[-2:]) != target:
            raise ValueError("stride mismatch: mid map is not at stride 8")
        out = out + stride8
    return out


class FusionHead(nn.Module):
    """Per-stage 1x1 pointwise projections to the shared dim + resample-and-sum."""

    def __init__(self, in_channels: tuple[int, int, int], out_dim: int,
                 include_mid: bool = True):
        super().__init__()
        c2, c3, c4 = in_channels
        self.out_dim = out_dim
        self.include_mid = include_mid
        self.proj4 = nn.Conv2d(c2, out_dim, 1)
        self.proj8 = nn.Conv2d(c3, out_dim, 1)
        self.proj16 = nn.Conv2d(c4, out_dim, 1)

    def channel_align(self, feature_map: torch.Tensor, stride: int) -> torch.Tensor:
        proj = {4: self.proj4, 8: self.proj8, 16: self.proj16}.get(stride)
        if proj is None:
            raise ValueError(f"no projection for stride {stride}")
        return proj(feature_map)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        f4 = self.channel_align(pyramid.stride4, 4)
        f16 = self.channel_align(pyramid.stride16, 16)
        f8 = self.channel_align(pyramid.stride8, 8) if self.include_mid else None
        return fuse_aligned(f4, f8, f16, self.include_mid)


class SingleStageAlignHead(nn.Module):
    """No-fusion ablation: channel-aligned deepest map upsampled to stride 8."""

    def __init__(self, in_ch: int, out_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_dim, 1)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        return F.interpolate(self.proj(pyramid.stride16), scale_factor=2,
                             mode="bilinear", align_corners=False)


class TokenPyramid(nn.Module):
    """Synthesize stride-4/16 views from a plain backbone's stride-8 token map.

    The stride-4 branch is nearest x2 upsampling plus a 3x3 conv initialized to
    the identity (center tap), so constants propagate exactly at init; the
    stride-16 branch is 2x2 average pooling.
    """

    def __init__(self, width: int):
        super().__init__()
        self.refine = nn.Conv2d(width, width, 3, padding=1, padding_mode="replicate")
        with torch.no_grad():
            self.refine.weight.zero_()
            for i in range(width):
                self.refine.weight[i, i, 1, 1] = 1.0
            self.refine.bias.zero_()

    def forward(self, token_map: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if token_map.dim() != 4:
            raise ValueError("token map must be a (B, C, H, W) grid")
        up = self.refine(F.interpolate(token_map, scale_factor=2, mode="nearest"))
        down = F.avg_pool2d(token_map, 2)
        return up, token_map, down

    def expand(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        s4, s8, s16 = self.forward(pyramid.stride8)
        return FeaturePyramid(s4, s8, s16, pyramid.global_embed)
