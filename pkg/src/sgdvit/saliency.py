"""Object saliency mining over the template/search similarity map.

Pipeline: depthwise cross-correlation produces the similarity grid; an MLP
mixes the spatial axis (shared across channels), a conv bottleneck plus a
deconv mix channels, and two conv branches then emit the refined saliency
features (C channels) and the single-channel saliency map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ShapeError
from .ppm import write_pgm
from .tensor import Tensor


@dataclass
class SimilarityMap:
    """Raw correlation grid: (C, H, W) with H = W = search - template + 1."""
    values: Tensor

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass
class SaliencyArtifacts:
    fused: Tensor      # channel+spatial fused map, same shape as the input grid
    features: Tensor   # (C, H, W) refined saliency features for encoder K/V
    saliency: Tensor   # (1, H, W) single-channel saliency map


def cross_correlate(search_feat: Tensor, template_feat: Tensor) -> SimilarityMap:
    return SimilarityMap(T.depthwise_xcorr(search_feat, template_feat))


class SaliencyMiner(nn.Module):
    def __init__(self, channels: int, height: int, width: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.height, self.width = height, width
        hw = height * width
        self.mlp = nn.MLP(hw, 2 * hw, rng, dtype=dtype)
        half = max(channels // 2, 1)
        self.conv = nn.Conv2d(channels, half, 3, rng, padding=1, dtype=dtype)
        self.deconv = nn.ConvTranspose2d(half, channels, 3, rng, padding=1, dtype=dtype)
        self.feat_branch = nn.Conv2d(channels, channels, 3, rng, padding=1, dtype=dtype)
        self.map_branch = nn.Conv2d(channels, 1, 3, rng, padding=1, dtype=dtype)

    def __call__(self, sim: SimilarityMap) -> SaliencyArtifacts:
        s1 = sim.values
        c, h, w = s1.shape
        if (c, h, w) != (self.channels, self.height, self.width):
            raise ShapeError("mine_saliency", s1.shape,
                             (self.channels, self.height, self.width))
        spatial = self.mlp(T.reshape(s1, (c, h * w)))
        fused = self.deconv(self.conv(T.reshape(spatial, (c, h, w))))
        features = self.feat_branch(fused)
        saliency = self.map_branch(fused)
        return SaliencyArtifacts(fused=fused, features=features, saliency=saliency)


def export_saliency_pgm(path, saliency: Tensor) -> None:
    """Dump the (1, H, W) saliency map as a min-max normalized P5 image."""
    arr = np.asarray(saliency.data)[0]
    write_pgm(path, arr)
