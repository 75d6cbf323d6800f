"""Feature extraction and the multi-receptive-field adjustment network.

The extractor is an AlexNet-flavored conv stack trained from scratch; the
default stages map a 127x127 template crop to 6x6 features and a 287x287
search crop to 26x26. The adjustment network mixes receptive fields
{3, 5, 7} (stacked 3x3 convs) and optionally resizes to the token grid so
windows tile it evenly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class StageSpec:
    kind: str                 # "conv" | "pool"
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1


def parse_stages(text: str) -> list[StageSpec]:
    stages = []
    for part in text.split(","):
        bits = part.strip().split(":")
        if bits[0] == "conv":
            if len(bits) != 5:
                raise ConfigError(f"conv stage needs conv:in:out:k:s, got {part!r}")
            stages.append(StageSpec("conv", int(bits[1]), int(bits[2]),
                                    int(bits[3]), int(bits[4])))
        elif bits[0] == "pool":
            if len(bits) != 3:
                raise ConfigError(f"pool stage needs pool:k:s, got {part!r}")
            stages.append(StageSpec("pool", kernel=int(bits[1]), stride=int(bits[2])))
        else:
            raise ConfigError(f"unknown stage kind {bits[0]!r}")
    if not stages or stages[0].kind != "conv" or stages[0].in_ch != 3:
        raise ConfigError("stage list must start with a conv taking 3 channels")
    return stages


def stage_out_size(stages: list[StageSpec], size: int) -> int:
    for st in stages:
        size = (size - st.kernel) // st.stride + 1
        if size < 1:
            raise ConfigError(f"input too small for stage {st}")
    return size


class FeatureExtractor(nn.Module):
    """Shared (Siamese) conv stack over standardized image crops."""

    def __init__(self, stages: list[StageSpec], template_size: int,
                 search_size: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.stages = stages
        self.template_size = template_size
        self.search_size = search_size
        self.out_channels = [s for s in stages if s.kind == "conv"][-1].out_ch
        self.template_feat = stage_out_size(stages, template_size)
        self.search_feat = stage_out_size(stages, search_size)
        convs = []
        for st in stages:
            if st.kind == "conv":
                convs.append(nn.Conv2d(st.in_ch, st.out_ch, st.kernel, rng,
                                       stride=st.stride, dtype=dtype))
        self.convs = nn.ModuleList(convs)

    def feature_size(self, input_size: int) -> int:
        return stage_out_size(self.stages, input_size)

    @staticmethod
    def standardize(crop: np.ndarray) -> np.ndarray:
        """Per-crop, per-channel standardization of a CHW [0,1] image.

        Maps constant crops (zero frames, mean padding) to zero.
        """
        mean = crop.mean(axis=(1, 2), keepdims=True)
        std = crop.std(axis=(1, 2), keepdims=True)
        return (crop - mean) / (std + 1e-6)

    def __call__(self, crop: Tensor) -> Tensor:
        if crop.ndim != 3 or crop.shape[0] != 3:
            raise ShapeError("extract_features", crop.shape, detail="CHW image expected")
        size = crop.shape[1]
        if crop.shape[1] != crop.shape[2] or size not in (self.template_size, self.search_size):
            raise ShapeError(
                "extract_features", crop.shape,
                detail=f"supported square sizes: {self.template_size}, {self.search_size}")
        x = crop
        ci = 0
        for st in self.stages:
            if st.kind == "conv":
                x = T.relu(self.convs[ci](x))
                ci += 1
            else:
                x = T.max_pool2d(x, st.kernel, st.stride)
        return x


class AdjustNet(nn.Module):
    """Parallel 3x3-conv branches (depths 1..3), concat, optional resize.

    Channel budget splits across branches and concatenates back to the
    input width; the resize target must stay window-aligned (checked by the
    caller's config validation).
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 resize_to: Optional[int] = None, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.resize_to = resize_to
        split = channels // 3
        outs = [split, split, channels - 2 * split]
        branches = []
        for depth, out_ch in enumerate(outs, start=1):
            layers = []
            ch = channels
            for d in range(depth):
                nxt = out_ch if d == depth - 1 else max(out_ch, channels // 2)
                layers.append(nn.Conv2d(ch, nxt, 3, rng, padding=1, dtype=dtype))
                ch = nxt
            branches.append(nn.ModuleList(layers))
        self.branches = nn.ModuleList(branches)

    def __call__(self, feat: Tensor) -> Tensor:
        if feat.shape[0] != self.channels:
            raise ShapeError("adjust_sample", feat.shape, (self.channels,))
        outs = []
        for branch in self.branches:
            x = feat
            for i, conv in enumerate(branch):
                x = conv(x)
                if i < len(branch) - 1:
                    x = T.relu(x)
            outs.append(x)
        merged = T.concat(outs, axis=0)
        if self.resize_to is not None and merged.shape[1] != self.resize_to:
            merged = nn.resize_bilinear(merged, self.resize_to, self.resize_to)
        return merged
