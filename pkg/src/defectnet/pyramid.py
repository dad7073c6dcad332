"""Top-down multi-level fusion of C2..C5 into uniform-width P2..P5.

Primed maps (P'_i) are the fused maps before smoothing; P_i are the outputs
of the per-level 3x3 smoothing convolutions.
"""

from __future__ import annotations

from . import tensor as T
from .backbone import LEVELS, FeatureSet
from .nn import Conv2d, Module
from .tensor import Tensor


def lateral_project(c: Tensor, conv: Conv2d) -> Tensor:
    """1x1 convolution adjusting the channel count of one backbone level."""
    if c.shape[1] != conv.in_channels:
        raise ValueError(f"lateral_project: feature has {c.shape[1]} channels, conv expects {conv.in_channels}")
    return conv(c)


def top_down_fuse(upper: Tensor, lateral: Tensor) -> Tensor:
    """``add(upsample_nearest2(upper), lateral)``."""
    up = T.upsample_nearest2(upper)
    if up.shape != lateral.shape:
        raise ValueError(f"top_down_fuse: upsampled upper {up.shape} does not match lateral {lateral.shape}")
    return T.add(up, lateral)


class Pyramid(Module):
    def __init__(self, in_channels, d: int = 128):
        self.d = d
        self.lateral = [Conv2d(c, d, 1) for c in in_channels]
        self.smooth = [Conv2d(d, d, 3, padding=1) for _ in in_channels]

    def build(self, features: FeatureSet) -> FeatureSet:
        # lateral[-1] is the C5 projection that enters the top-down path
        fused = {5: lateral_project(features[5], self.lateral[3])}
        for i, level in ((2, 4), (1, 3), (0, 2)):
            lat = lateral_project(features[level], self.lateral[i])
            fused[level] = top_down_fuse(fused[level + 1], lat)
        return FeatureSet({lv: self.smooth[i](fused[lv]) for i, lv in enumerate(LEVELS)})

    def project_only(self, features: FeatureSet) -> FeatureSet:
        """Channel projection without top-down fusion or smoothing (ablation path)."""
        return FeatureSet({lv: lateral_project(features[lv], self.lateral[i]) for i, lv in enumerate(LEVELS)})

    __call__ = build
