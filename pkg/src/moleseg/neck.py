"""Feature pyramid neck: lateral 1x1 projections to a common width, top-down
fusion by averaging with the upsampled deeper map, and channel reduction of
the two finest levels into the (sfm, ifp, ffp) triple."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, ParameterRegistry, Tensor


@dataclass
class FeatureTriple:
    """Deepest map at full width d, level-1 map at d/4, level-0 map at d/8."""

    sfm: Tensor
    ifp: Tensor
    ffp: Tensor
    tag: str = "fused"

    def level_maps(self):
        """Maps keyed by pyramid level name, shallowest last."""
        return {"sfm": self.sfm, "ifp": self.ifp, "ffp": self.ffp}


def topdown_fuse(z_list: list[Tensor], fuse_levels: set[int]) -> list[Tensor]:
    """Average each fused level with the upsampled next-deeper output; the
    deepest level and non-fused levels pass through unchanged."""
    n = len(z_list) - 1
    for i in fuse_levels:
        if not 0 <= i < n:
            raise ValueError(f"fusion level {i} invalid for deepest stage {n}")
    y: list[Tensor | None] = [None] * len(z_list)
    y[n] = z_list[n]
    for i in range(n - 1, -1, -1):
        if i in fuse_levels:
            deeper = T.upsample_bilinear(y[i + 1], z_list[i].shape[1], z_list[i].shape[2])
            y[i] = T.mul(T.add(z_list[i], deeper), 0.5)
        else:
            y[i] = z_list[i]
    return y


class Neck:
    """Lateral + top-down pyramid with trainable (optionally frozen) convs."""

    def __init__(self, stage_channels: list[int], d: int,
                 registry: ParameterRegistry, rng: np.random.Generator,
                 prefix: str = "neck", frozen: bool = False):
        if d % 8:
            raise ValueError(f"feature width d={d} must be divisible by 8")
        self.d = d
        self.num_stages = len(stage_channels)
        self.laterals: list[tuple[Parameter, Parameter]] = []
        for i, ci in enumerate(stage_channels):
            w = registry.register(f"{prefix}.lateral{i}.w",
                                  rng.standard_normal((d, ci)) / math.sqrt(ci),
                                  frozen=frozen)
            b = registry.register(f"{prefix}.lateral{i}.b", np.zeros(d), frozen=frozen)
            self.laterals.append((w, b))
        self.proj_ifp = (
            registry.register(f"{prefix}.proj_ifp.w",
                              rng.standard_normal((d // 4, d)) / math.sqrt(d),
                              frozen=frozen),
            registry.register(f"{prefix}.proj_ifp.b", np.zeros(d // 4), frozen=frozen),
        )
        self.proj_ffp = (
            registry.register(f"{prefix}.proj_ffp.w",
                              rng.standard_normal((d // 8, d)) / math.sqrt(d),
                              frozen=frozen),
            registry.register(f"{prefix}.proj_ffp.b", np.zeros(d // 8), frozen=frozen),
        )

    def lateral(self, x: Tensor, i: int) -> Tensor:
        if not 0 <= i < self.num_stages:
            raise ValueError(f"stage index {i} out of range [0, {self.num_stages})")
        w, b = self.laterals[i]
        return T.conv1x1(x, w.tensor, b.tensor)

    def project_triple(self, y_list: list[Tensor], tag: str) -> FeatureTriple:
        """Keep the deepest map, reduce level 1 to d/4 and level 0 to d/8."""
        if len(y_list) < 2:
            raise ValueError("pyramid needs at least stages 0 and 1")
        return FeatureTriple(
            sfm=y_list[-1],
            ifp=T.conv1x1(y_list[1], self.proj_ifp[0].tensor, self.proj_ifp[1].tensor),
            ffp=T.conv1x1(y_list[0], self.proj_ffp[0].tensor, self.proj_ffp[1].tensor),
            tag=tag,
        )

    def forward(self, features: list[Tensor], tag: str,
                fuse_levels: set[int] | None = None) -> FeatureTriple:
        if fuse_levels is None:
            fuse_levels = set(range(len(features) - 1))
        z = [self.lateral(x, i) for i, x in enumerate(features)]
        y = topdown_fuse(z, fuse_levels)
        return self.project_triple(y, tag)
