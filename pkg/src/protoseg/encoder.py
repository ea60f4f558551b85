"""Feature-pyramid encoder built from inception-style separable-conv blocks.

Five bottom-up stages (each halving resolution after the first) feed a
top-down pathway of 1x1 lateral projections plus bilinear upsampling. The
finest pyramid level P2 is the default feature source for prototype
generation. One parameter store serves support and query images alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    conv2d,
    maxpool2d,
    relu,
    sepconv2d,
    tmean,
    tsqrt,
    upsample_bilinear_x2,
)
from .errors import ContractViolationError

PYRAMID_LEVELS = (2, 3, 4, 5)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    scale = math.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class BatchNorm:
    """Channel-wise normalization over (B,H,W,C) maps.

    Two training-time statistics sources:
      * running mode (default): normalize with the running estimates, treated
        as constants in the graph, then fold the observed batch statistics
        into the running estimates. Keeps per-image outputs independent of
        batch composition, which single-image episodic batches require.
      * batch mode: classic in-graph batch statistics.
    Evaluation always normalizes with the (frozen) running estimates.
    """

    def __init__(self, channels: int, epsilon: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = zeros_param(channels, dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.training = True
        self.use_batch_stats = False

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ContractViolationError(f"BatchNorm expects (B,H,W,C), got {x.shape}")
        if self.training and self.use_batch_stats:
            mean = tmean(x, axis=(0, 1, 2), keepdims=True)
            var = tmean((x - mean) * (x - mean), axis=(0, 1, 2), keepdims=True)
            self._update_running(mean.data.reshape(-1), var.data.reshape(-1))
            xhat = (x - mean) / tsqrt(var + self.epsilon)
        else:
            denom = np.sqrt(self.running_var + self.epsilon)
            xhat = (x - self.running_mean) / denom
            if self.training:
                self._update_running(x.data.mean(axis=(0, 1, 2)), x.data.var(axis=(0, 1, 2)))
        return xhat * self.gamma + self.beta

    def _update_running(self, mean: np.ndarray, var: np.ndarray):
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self, "running_mean"
        yield f"{prefix}.running_var", self, "running_var"

    def norms(self):
        yield self


class ConvUnit:
    """conv (no bias) -> norm -> ReLU."""

    def __init__(self, rng, in_channels, out_channels, kernel_size, epsilon, momentum, dtype):
        k = kernel_size
        self.kernel = he_normal(rng, (k, k, in_channels, out_channels), k * k * in_channels, dtype)
        self.norm = BatchNorm(out_channels, epsilon, momentum, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.norm(conv2d(x, self.kernel)))

    def named_parameters(self, prefix):
        yield f"{prefix}.kernel", self.kernel
        yield from self.norm.named_parameters(f"{prefix}.norm")

    def named_buffers(self, prefix):
        yield from self.norm.named_buffers(f"{prefix}.norm")

    def norms(self):
        yield self.norm


class SepConvUnit:
    """depthwise conv + pointwise mix (no bias) -> norm -> ReLU."""

    def __init__(self, rng, in_channels, out_channels, kernel_size, epsilon, momentum, dtype):
        k = kernel_size
        self.depthwise = he_normal(rng, (k, k, in_channels), k * k, dtype)
        self.pointwise = he_normal(rng, (in_channels, out_channels), in_channels, dtype)
        self.norm = BatchNorm(out_channels, epsilon, momentum, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.norm(sepconv2d(x, self.depthwise, self.pointwise)))

    def named_parameters(self, prefix):
        yield f"{prefix}.depthwise", self.depthwise
        yield f"{prefix}.pointwise", self.pointwise
        yield from self.norm.named_parameters(f"{prefix}.norm")

    def named_buffers(self, prefix):
        yield from self.norm.named_buffers(f"{prefix}.norm")

    def norms(self):
        yield self.norm


def default_branch_split(out_channels: int) -> tuple[int, int, int]:
    b = out_channels // 3
    return (b, b, out_channels - 2 * b)


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    branch_split: tuple[int, int, int] | None = None
    norm_epsilon: float = 1e-5
    norm_momentum: float = 0.1

    def __post_init__(self):
        if self.branch_split is None:
            self.branch_split = default_branch_split(self.out_channels)
        b1, b2, b3 = self.branch_split
        if b1 + b2 + b3 != self.out_channels:
            raise ContractViolationError(
                f"branch split {self.branch_split} does not sum to out_channels {self.out_channels}"
            )
        if min(b1, b2, b3, self.in_channels) < 1:
            raise ContractViolationError("all channel counts must be >= 1")


class InceptionSepConv:
    """Three parallel branches concatenated along channels.

    Branch 1: 3x3 conv unit then 3x3 separable-conv unit.
    Branch 2: the same with 5x5 kernels.
    Branch 3: 3x3 stride-1 max pool then a 1x1 conv unit.
    Spatial dims are preserved; output channels = sum of branch widths.
    """

    def __init__(self, rng, config: BlockConfig, dtype=np.float32):
        self.config = config
        b1, b2, b3 = config.branch_split
        eps, mom = config.norm_epsilon, config.norm_momentum
        cin = config.in_channels
        self.b1_conv = ConvUnit(rng, cin, b1, 3, eps, mom, dtype)
        self.b1_sep = SepConvUnit(rng, b1, b1, 3, eps, mom, dtype)
        self.b2_conv = ConvUnit(rng, cin, b2, 5, eps, mom, dtype)
        self.b2_sep = SepConvUnit(rng, b2, b2, 5, eps, mom, dtype)
        self.b3_conv = ConvUnit(rng, cin, b3, 1, eps, mom, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[3] != self.config.in_channels:
            raise ContractViolationError(
                f"block expects {self.config.in_channels} input channels, got {x.shape[3]}"
            )
        out1 = self.b1_sep(self.b1_conv(x))
        out2 = self.b2_sep(self.b2_conv(x))
        out3 = self.b3_conv(maxpool2d(x, 3, 1, padding="same"))
        return concat([out1, out2, out3], axis=3)

    def _units(self):
        return (
            ("b1_conv", self.b1_conv),
            ("b1_sep", self.b1_sep),
            ("b2_conv", self.b2_conv),
            ("b2_sep", self.b2_sep),
            ("b3_conv", self.b3_conv),
        )

    def named_parameters(self, prefix):
        for name, unit in self._units():
            yield from unit.named_parameters(f"{prefix}.{name}")

    def named_buffers(self, prefix):
        for name, unit in self._units():
            yield from unit.named_buffers(f"{prefix}.{name}")

    def norms(self):
        for _, unit in self._units():
            yield from unit.norms()


@dataclass
class PyramidFeatures:
    """Bottom-up maps C1..C5 and top-down maps P2..P5, keyed by level."""

    bottom_up: dict[int, Tensor]
    top_down: dict[int, Tensor]


@dataclass
class EncoderConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    pyramid_channels: int = 64
    in_channels: int = 1
    norm_epsilon: float = 1e-5
    norm_momentum: float = 0.1
    dtype: str = "float32"
    batch_stat_norm: bool = False

    def __post_init__(self):
        if len(self.stage_channels) != 5:
            raise ContractViolationError("encoder needs exactly 5 stage widths")

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "EncoderConfig":
        base = dict(stage_channels=(32, 64, 128, 256, 256), pyramid_channels=256)
        base.update(overrides)
        return cls(**base)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class Encoder:
    """Shared-weight feature extractor producing the P2..P5 pyramid."""

    def __init__(self, config: EncoderConfig | None = None, seed: int = 0):
        self.config = config or EncoderConfig()
        dtype = self.config.np_dtype
        rng = np.random.default_rng(seed)
        widths = self.config.stage_channels
        ins = (self.config.in_channels,) + widths[:-1]
        self.blocks = [
            InceptionSepConv(
                rng,
                BlockConfig(
                    in_channels=ins[i],
                    out_channels=widths[i],
                    norm_epsilon=self.config.norm_epsilon,
                    norm_momentum=self.config.norm_momentum,
                ),
                dtype=dtype,
            )
            for i in range(5)
        ]
        pc = self.config.pyramid_channels
        self.lateral_kernels = {
            lvl: he_normal(rng, (1, 1, widths[lvl - 1], pc), widths[lvl - 1], dtype)
            for lvl in PYRAMID_LEVELS
        }
        self.lateral_biases = {lvl: zeros_param(pc, dtype) for lvl in PYRAMID_LEVELS}
        if self.config.batch_stat_norm:
            for norm in self.norms():
                norm.use_batch_stats = True

    # -- forward ---------------------------------------------------------------

    def bottom_up(self, image: Tensor) -> dict[int, Tensor]:
        if image.ndim != 4:
            raise ContractViolationError(f"encoder expects (B,H,W,C) input, got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        if h % 16 or w % 16:
            raise ContractViolationError(
                f"input spatial dims must be divisible by 16 (four 2x downsamples), got {h}x{w}"
            )
        feats = {1: self.blocks[0](image)}
        for i in range(2, 6):
            pooled = maxpool2d(feats[i - 1], 2, 2)
            feats[i] = self.blocks[i - 1](pooled)
        return feats

    def top_down(self, bottom_up: dict[int, Tensor]) -> dict[int, Tensor]:
        lat = {
            lvl: conv2d(bottom_up[lvl], self.lateral_kernels[lvl], self.lateral_biases[lvl])
            for lvl in PYRAMID_LEVELS
        }
        tops = {5: lat[5]}
        for lvl in (4, 3, 2):
            up = upsample_bilinear_x2(tops[lvl + 1])
            if up.shape != lat[lvl].shape:
                raise ContractViolationError(
                    f"pyramid fusion shape mismatch at level {lvl}: {up.shape} vs {lat[lvl].shape}"
                )
            tops[lvl] = lat[lvl] + up
        return tops

    def pyramid(self, image: Tensor) -> PyramidFeatures:
        c = self.bottom_up(image)
        return PyramidFeatures(bottom_up=c, top_down=self.top_down(c))

    def extract_features(self, image: Tensor, level: int = 2) -> Tensor:
        if level not in PYRAMID_LEVELS:
            raise ContractViolationError(f"pyramid level must be one of {PYRAMID_LEVELS}, got {level}")
        return self.pyramid(image).top_down[level]

    def __call__(self, image: Tensor, level: int = 2) -> Tensor:
        return self.extract_features(image, level)

    # -- parameter plumbing -------------------------------------------------------

    def named_parameters(self):
        for i, block in enumerate(self.blocks, start=1):
            yield from block.named_parameters(f"block{i}")
        for lvl in PYRAMID_LEVELS:
            yield f"lateral{lvl}.kernel", self.lateral_kernels[lvl]
            yield f"lateral{lvl}.bias", self.lateral_biases[lvl]

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def named_buffers(self):
        for i, block in enumerate(self.blocks, start=1):
            yield from block.named_buffers(f"block{i}")

    def norms(self):
        for block in self.blocks:
            yield from block.norms()

    def train(self):
        for norm in self.norms():
            norm.training = True
        return self

    def eval(self):
        for norm in self.norms():
            norm.training = False
        return self

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    # -- checkpoint state --------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_parameters()}
        for name, obj, attr in self.named_buffers():
            state[name] = getattr(obj, attr)
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        for name, t in self.named_parameters():
            src = state[name]
            if src.shape != t.data.shape:
                raise ContractViolationError(
                    f"checkpoint shape mismatch for {name}: {src.shape} vs {t.data.shape}"
                )
            t.data = src.astype(t.data.dtype, copy=True)
        for name, obj, attr in self.named_buffers():
            setattr(obj, attr, state[name].astype(self.config.np_dtype, copy=True))
