"""Miniature large-kernel feature extractor.

Each modality map passes a 3x3/2 stem and four stages.  A stage is a stack
of blocks ``x + MLP(SE(DRB(x)))`` where DRB is a depthwise dilated
re-parameterisable block.  The first block of a stage carries the large
kernel; deeper blocks use plain depthwise 3x3.  Stage outputs F0..F3 are
pooled, projected and concatenated into one 512-wide vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import Linear, Module, he_normal, param
from .tensor import (
    ConfigurationError, DimensionError, Tensor, as_tensor, concat, conv2d, embed_kernel,
    global_avg_pool, linear, relu, reshape, sigmoid,
)

FEATURE_WIDTH = 512
MODALITY_CHANNELS = {"image": 3, "audio": 2, "wave": 1}


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    large_kernel: int = 13
    dilated_branches: tuple[tuple[int, int], ...] = ((13, 1), (5, 2), (3, 3))
    blocks_per_stage: int = 2
    se_reduction: int = 4
    mlp_ratio: int = 2
    stage_width: int = FEATURE_WIDTH // 4

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.dilated_branches = tuple((int(k), int(d)) for k, d in self.dilated_branches)
        if len(self.stage_channels) != 4:
            raise ConfigurationError(f"need exactly 4 stage widths, got {self.stage_channels}")
        check_branches(self.dilated_branches, self.large_kernel)
        for c in self.stage_channels:
            if c % self.se_reduction:
                raise ConfigurationError(f"stage width {c} not divisible by SE reduction {self.se_reduction}")


def check_branches(branches: Sequence[tuple[int, int]], large_kernel: int) -> None:
    if large_kernel % 2 == 0 or large_kernel < 1:
        raise ConfigurationError(f"large kernel must be odd, got {large_kernel}")
    for k, d in branches:
        if k % 2 == 0 or d < 1:
            raise ConfigurationError(f"branch ({k}, {d}): kernel must be odd and dilation >= 1")
        if d * (k - 1) + 1 > large_kernel:
            raise ConfigurationError(
                f"branch ({k}, {d}) spans {d * (k - 1) + 1} taps, exceeds the {large_kernel}x{large_kernel} footprint")


@dataclass
class StageOutputs:
    F: tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.F) != 4:
            raise DimensionError(f"expected four stage outputs, got {len(self.F)}")


@dataclass
class ModalFeature:
    vector: Tensor
    modality_id: str = field(default="")

    def __post_init__(self):
        if self.vector.shape[-1] != FEATURE_WIDTH:
            raise DimensionError(f"modal feature must be {FEATURE_WIDTH} wide, got {self.vector.shape}")


# -- squeeze and excitation -------------------------------------------------------------

def se_block(x, W1, b1, W2, b2) -> Tensor:
    """x * sigmoid(W2 relu(W1 gap(x) + b1) + b2), gate broadcast per channel."""
    x = as_tensor(x)
    s = sigmoid(linear(relu(linear(global_avg_pool(x), W1, b1)), W2, b2))
    return x * reshape(s, s.shape + (1, 1))


class SEBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        if channels % reduction:
            raise ConfigurationError(f"{channels} channels not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.W1 = he_normal(rng, (channels, hidden), channels)
        self.b1 = param(np.zeros(hidden))
        self.W2 = he_normal(rng, (hidden, channels), hidden)
        self.b2 = param(np.zeros(channels))

    def forward(self, x):
        return se_block(x, self.W1, self.b1, self.W2, self.b2)


# -- dilated re-param block ---------------------------------------------------------------

def dilated_reparam_forward(x, branches: Sequence[tuple[int, int, Tensor]], large_kernel: int) -> Tensor:
    """Training-time form: sum of size-preserving depthwise dilated convs."""
    check_branches([(k, d) for k, d, _ in branches], large_kernel)
    out = None
    for k, d, kern in branches:
        y = conv2d(x, kern, padding=d * (k - 1) // 2, dilation=d, depthwise=True)
        out = y if out is None else out + y
    return out


def reparam_merge(branches: Sequence[tuple[int, int, Tensor]], large_kernel: int) -> Tensor:
    """One (C, 1, K, K) kernel equivalent to the multi-branch sum."""
    check_branches([(k, d) for k, d, _ in branches], large_kernel)
    merged = None
    for k, d, kern in branches:
        e = embed_kernel(kern, large_kernel, d)
        merged = e if merged is None else merged + e
    return merged


class DilatedReparamBlock(Module):
    def __init__(self, channels: int, branches: Sequence[tuple[int, int]], large_kernel: int,
                 rng: np.random.Generator):
        check_branches(branches, large_kernel)
        self.spec = tuple(branches)
        self.large_kernel = large_kernel
        n = len(branches)
        self.kernels = [he_normal(rng, (channels, 1, k, k), k * k * n) for k, _ in branches]
        self.bias = param(np.zeros(channels))

    def branch_list(self):
        return [(k, d, w) for (k, d), w in zip(self.spec, self.kernels)]

    def merged_kernel(self) -> Tensor:
        return reparam_merge(self.branch_list(), self.large_kernel)

    def forward(self, x, merged: bool = True):
        if merged:
            y = conv2d(x, self.merged_kernel(), padding=self.large_kernel // 2, depthwise=True)
        else:
            y = dilated_reparam_forward(x, self.branch_list(), self.large_kernel)
        return y + reshape(self.bias, (-1, 1, 1))


class Block(Module):
    def __init__(self, channels: int, branches, large_kernel: int, cfg: BackboneConfig, rng):
        self.drb = DilatedReparamBlock(channels, branches, large_kernel, rng)
        self.se = SEBlock(channels, rng, cfg.se_reduction)
        hidden = channels * cfg.mlp_ratio
        self.pw1 = he_normal(rng, (hidden, channels, 1, 1), channels)
        self.pb1 = param(np.zeros(hidden))
        self.pw2 = he_normal(rng, (channels, hidden, 1, 1), hidden, gain=0.5)
        self.pb2 = param(np.zeros(channels))

    def forward(self, x):
        y = self.se(self.drb(x))
        y = relu(conv2d(y, self.pw1, bias=self.pb1))
        return x + conv2d(y, self.pw2, bias=self.pb2)


class Backbone(Module):
    """Stem + four stages + pooled-projection fusion for one modality."""

    def __init__(self, in_channels: int, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.in_channels = in_channels
        c = cfg.stage_channels
        self.stem_w = he_normal(rng, (c[0], in_channels, 3, 3), 9 * in_channels)
        self.stem_b = param(np.zeros(c[0]))
        self.stages = []
        self.down_w = []
        self.down_b = []
        for s, ch in enumerate(c):
            blocks = []
            for b in range(cfg.blocks_per_stage):
                if b == 0:
                    blocks.append(Block(ch, cfg.dilated_branches, cfg.large_kernel, cfg, rng))
                else:
                    blocks.append(Block(ch, ((3, 1),), 3, cfg, rng))
            self.stages.append(blocks)
            if s + 1 < len(c):
                self.down_w.append(he_normal(rng, (c[s + 1], ch, 3, 3), 9 * ch))
                self.down_b.append(param(np.zeros(c[s + 1])))
        self.proj = [Linear(ch, cfg.stage_width, rng) for ch in c]

    def forward_stages(self, x) -> StageOutputs:
        x = as_tensor(x)
        if x.shape[-3] != self.in_channels:
            raise DimensionError(f"backbone expects {self.in_channels} input channels, got {x.shape}")
        if x.shape[-1] < 16 or x.shape[-2] < 16:
            raise DimensionError(f"map {x.shape[-2:]} too small for four stride-2 reductions")
        h = relu(conv2d(x, self.stem_w, stride=2, padding=1, bias=self.stem_b))
        outs = []
        for s, blocks in enumerate(self.stages):
            if s > 0:
                h = conv2d(h, self.down_w[s - 1], stride=2, padding=1, bias=self.down_b[s - 1])
            for blk in blocks:
                h = blk(h)
            outs.append(h)
        return StageOutputs(tuple(outs))

    def fuse_stages(self, stages: StageOutputs) -> Tensor:
        return concat([p(global_avg_pool(f)) for p, f in zip(self.proj, stages.F)], axis=-1)

    def forward(self, x) -> Tensor:
        return self.fuse_stages(self.forward_stages(x))

    def feature(self, x, modality_id: str = "") -> ModalFeature:
        return ModalFeature(self.forward(x), modality_id)
