"""Toy convolutional backbone producing the five-level feature pyramid.

Stand-in for a pretrained classification network: a small stem reaches
stride 4, four blocks continue to stride 32, and per-level 1x1 convolutions
reduce to the channel contract {64, 128, 256, 256, 256}. Levels 0 and 1
share stride 4, mirroring a residual network's first pooling output and
first block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatchError
from .nn import Conv2d, ConvBNReLU, Module

LEVELS = (0, 1, 2, 3, 4)
STRIDES = (4, 4, 8, 16, 32)
CHANNELS = (64, 128, 256, 256, 256)
SIZE_MULTIPLE = 32


@dataclass
class FeatureMap:
    level: int
    stride: int
    tensor: Tensor

    @property
    def channels(self) -> int:
        return self.tensor.shape[0]


@dataclass
class FeaturePyramid:
    levels: list[FeatureMap]
    image_size: tuple[int, int]

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, level: int) -> FeatureMap:
        return self.levels[level]

    def channel_tuple(self) -> tuple[int, ...]:
        return tuple(fm.channels for fm in self.levels)


@dataclass
class BackboneConfig:
    stem_channels: int = 32
    block_channels: tuple[int, int, int, int] = (48, 64, 96, 96)


def check_input_size(h: int, w: int):
    if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        raise ShapeMismatchError(
            f"input spatial size must be a multiple of {SIZE_MULTIPLE}",
            expected=f"multiples of {SIZE_MULTIPLE}",
            got=(h, w),
        )


class PyramidBackbone(Module):
    """extract_features: image [3,H,W] -> pyramid at strides {4,4,8,16,32}."""

    def __init__(self, rng: np.random.Generator, config: BackboneConfig | None = None):
        super().__init__()
        cfg = config or BackboneConfig()
        self.config = cfg
        c_stem = cfg.stem_channels
        c1, c2, c3, c4 = cfg.block_channels

        # stem: two 3x3 convs then a stride-2 average pool, landing at stride 4
        self.stem1 = ConvBNReLU(3, c_stem, rng, stride=2)
        self.stem2 = ConvBNReLU(c_stem, c_stem, rng, stride=1)
        # blocks: two conv+BN+ReLU each; block 1 keeps stride 4
        self.block1a = ConvBNReLU(c_stem, c1, rng, stride=1)
        self.block1b = ConvBNReLU(c1, c1, rng, stride=1)
        self.block2a = ConvBNReLU(c1, c2, rng, stride=2)
        self.block2b = ConvBNReLU(c2, c2, rng, stride=1)
        self.block3a = ConvBNReLU(c2, c3, rng, stride=2)
        self.block3b = ConvBNReLU(c3, c3, rng, stride=1)
        self.block4a = ConvBNReLU(c3, c4, rng, stride=2)
        self.block4b = ConvBNReLU(c4, c4, rng, stride=1)
        # 1x1 dimension-reduction convs onto the channel contract
        raw = (c_stem, c1, c2, c3, c4)
        for n, (cin, cout) in enumerate(zip(raw, CHANNELS)):
            setattr(self, f"reduce{n}", Conv2d(cin, cout, 1, rng))

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.data.ndim != 3 or image.shape[0] != 3:
            raise ShapeMismatchError("backbone expects an image [3,H,W]", got=image.shape)
        h, w = image.shape[1], image.shape[2]
        check_input_size(h, w)

        x = self.stem2(self.stem1(image))
        x0 = ad.avg_pool2d(x, 2)                      # stride 4
        x1 = self.block1b(self.block1a(x0))           # stride 4
        x2 = self.block2b(self.block2a(x1))           # stride 8
        x3 = self.block3b(self.block3a(x2))           # stride 16
        x4 = self.block4b(self.block4a(x3))           # stride 32

        taps = (x0, x1, x2, x3, x4)
        levels = []
        for n, tap in enumerate(taps):
            reduced = getattr(self, f"reduce{n}")(tap)
            levels.append(FeatureMap(level=n, stride=STRIDES[n], tensor=reduced))
        return FeaturePyramid(levels=levels, image_size=(h, w))
