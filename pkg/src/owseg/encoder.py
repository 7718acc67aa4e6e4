"""Spatial-temporal graph convolution encoder with a three-scale feature pyramid.

Ten ST-GCN style blocks; the feature maps after blocks 4, 7, and 10 form the
pyramid at temporal strides 1, 2, and 4. Strides are realized by strided
temporal convolutions at blocks 5 and 8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .data import SkeletonGraph


@dataclass
class FeatureMap:
    """Dense (N, C, T', V) activation tensor tagged with its temporal stride."""

    data: torch.Tensor
    stride: int

    def validate(self, input_length: int | None = None) -> None:
        if self.data.ndim != 4:
            raise ValueError(f"feature map must be 4-axis, got shape {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("feature map contains non-finite values")
        if input_length is not None:
            expected = -(-input_length // self.stride)
            if self.data.shape[2] != expected:
                raise ValueError(
                    f"temporal size {self.data.shape[2]} != ceil({input_length}/{self.stride})"
                )


class STGCNBlock(nn.Module):
    """One encoder block: graph convolution, temporal convolution,
    batch-statistic normalization, rectifier, then a residual connection.

    The residual branch is the identity when shapes allow, otherwise a strided
    1x1 projection. ``use_norm``/``use_residual`` exist so tests can pin the
    block to its bare computational core.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        temporal_kernel: int = 3,
        temporal_stride: int = 1,
        use_norm: bool = True,
        use_residual: bool = True,
    ):
        super().__init__()
        if temporal_stride not in (1, 2):
            raise ValueError(f"temporal_stride must be 1 or 2, got {temporal_stride}")
        if temporal_kernel % 2 == 0:
            raise ValueError("temporal_kernel must be odd")
        self.spatial = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        # a bias ahead of batch-statistic normalization would be cancelled by
        # the mean subtraction, so it only exists when the norm is off
        self.temporal = nn.Conv2d(
            out_channels,
            out_channels,
            kernel_size=(temporal_kernel, 1),
            stride=(temporal_stride, 1),
            padding=(temporal_kernel // 2, 0),
            bias=not use_norm,
        )
        self.norm = nn.BatchNorm2d(out_channels, eps=1e-5, track_running_stats=False) if use_norm else None
        if not use_residual:
            self.residual = None
        elif in_channels == out_channels and temporal_stride == 1:
            self.residual = nn.Identity()
        else:
            self.residual = nn.Conv2d(
                in_channels, out_channels, kernel_size=1, stride=(temporal_stride, 1), bias=False
            )
        self.stride = temporal_stride

    def forward(self, x: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ValueError(f"expected (N, C, T, V) input, got shape {tuple(x.shape)}")
        if adjacency.shape != (x.shape[3], x.shape[3]):
            raise ValueError(
                f"adjacency shape {tuple(adjacency.shape)} does not match V={x.shape[3]}"
            )
        aggregated = torch.einsum("nctv,vw->nctw", x, adjacency)
        h = self.temporal(self.spatial(aggregated))
        if self.norm is not None:
            h = self.norm(h)
        h = torch.relu(h)
        if self.residual is not None:
            h = h + self.residual(x)
        return h


class PyramidEncoder(nn.Module):
    """Stack of 10 blocks producing features at full, half, and quarter rate."""

    NUM_BLOCKS = 10
    TAPS = (4, 7, 10)       # blocks whose outputs form the pyramid
    STRIDED = (5, 8)        # blocks with temporal stride 2

    def __init__(
        self,
        graph: SkeletonGraph,
        in_channels: int = 3,
        channel_plan: tuple[int, int, int] = (16, 32, 64),
        temporal_kernel: int = 3,
    ):
        super().__init__()
        self.channel_plan = tuple(channel_plan)
        adjacency = torch.from_numpy(graph.adjacency.copy())
        self.register_buffer("adjacency", adjacency, persistent=False)
        blocks = []
        prev = in_channels
        for index in range(1, self.NUM_BLOCKS + 1):
            out = self.channel_plan[0] if index <= 4 else self.channel_plan[1] if index <= 7 else self.channel_plan[2]
            stride = 2 if index in self.STRIDED else 1
            blocks.append(STGCNBlock(prev, out, temporal_kernel, stride))
            prev = out
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> tuple[FeatureMap, FeatureMap, FeatureMap]:
        """Encode a padded batch (N, 3, T, V) with T divisible by 4."""
        if x.shape[2] % 4 != 0:
            raise RuntimeError(
                f"encoder input length {x.shape[2]} not divisible by 4; padding must prevent this"
            )
        taps = {}
        h = x
        for index, block in enumerate(self.blocks, start=1):
            h = block(h, self.adjacency.to(h.dtype))
            if index in self.TAPS:
                taps[index] = h
        return (
            FeatureMap(taps[4], stride=1),
            FeatureMap(taps[7], stride=2),
            FeatureMap(taps[10], stride=4),
        )


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministically initialize parameters from a seeded generator.

    Weights are uniform in +-1/sqrt(fan_in); biases and normalization offsets
    zero, normalization scales one. Iteration is in sorted parameter-name
    order so two models built from the same seed are bit-identical.
    """
    import numpy as np

    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, param in sorted(module.named_parameters()):
            if param.ndim <= 1:
                if name.endswith("norm.weight"):
                    param.fill_(1.0)
                else:
                    param.zero_()
            else:
                fan_in = math.prod(param.shape[1:])
                bound = 1.0 / math.sqrt(fan_in)
                values = rng.uniform(-bound, bound, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values).to(param.dtype))
