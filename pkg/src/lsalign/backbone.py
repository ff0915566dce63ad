"""Conv-64-style feature extractor with the final pooling removed.

Four conv3x3-batchnorm-relu blocks; the first three downsample with 2x2
max pooling, the fourth keeps its resolution so an 84x84 input yields a
64x10x10 feature map (84 -> 42 -> 21 -> 10).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import ShapeError, Tensor, relu


@dataclass
class BackboneConfig:
    in_channels: int = 3
    block_channels: tuple = (64, 64, 64, 64)
    input_size: int = 84

    @property
    def feature_channels(self) -> int:
        return self.block_channels[-1]

    @property
    def feature_extent(self) -> int:
        s = self.input_size
        for i in range(len(self.block_channels)):
            if i < len(self.block_channels) - 1:
                s = s // 2
        return s


class ConvBlock(Module):
    def __init__(self, cin, cout, pool, rng, dtype):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, padding=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.pool = pool

    def __call__(self, x: Tensor) -> Tensor:
        x = relu(self.bn(self.conv(x)))
        return kernels.maxpool2(x) if self.pool else x


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        chans = [config.in_channels] + list(config.block_channels)
        last = len(config.block_channels) - 1
        self.blocks = [
            ConvBlock(chans[i], chans[i + 1], pool=(i < last), rng=rng, dtype=dtype)
            for i in range(len(config.block_channels))
        ]

    def extract(self, image: Tensor) -> Tensor:
        """Map a normalized 3xSxS image (or NCHW batch) to a feature map."""
        expect = (self.config.in_channels, self.config.input_size, self.config.input_size)
        got = image.shape if image.ndim == 3 else image.shape[1:]
        if got != expect:
            raise ShapeError(f"backbone expects input {expect}, got {tuple(got)} from {image.shape}")
        x = image
        for block in self.blocks:
            x = block(x)
        return x

    def __call__(self, image: Tensor) -> Tensor:
        return self.extract(image)
