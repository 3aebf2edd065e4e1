"""Convolutional feature extractor: a Conv3x3+BN stem followed by residual blocks.

Two block families are provided.  ``leres`` blocks keep every convolution at
equal channel width; when a block doubles its width the extra feature maps come
from a per-channel linear 3x3 map of the first convolution's output, and the
shortcut concatenates the input with that same output instead of projecting it.
``standard_res`` blocks are the classic two-conv residual block with a 1x1
conv+BN projection on the shortcut when widening; they exist for comparisons.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import DimensionError, Parameter

INPUT_SHAPE = (1, 20, 2)


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    kind: str = "leres"
    stride: int = 1

    def __post_init__(self):
        if self.out_channels not in (self.in_channels, 2 * self.in_channels):
            raise ValueError(f"block {self.in_channels}->{self.out_channels}: out must be in or 2*in")
        if self.kind not in ("leres", "standard_res"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.stride != 1:
            raise ValueError("only stride 1 is supported")

    @property
    def expands(self) -> bool:
        return self.out_channels == 2 * self.in_channels


@dataclass(frozen=True)
class BackboneConfig:
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    stem_channels: int = 8
    blocks: tuple[BlockSpec, ...] = field(default_factory=tuple)
    final_activation: str = "sigmoid"

    def __post_init__(self):
        if self.final_activation not in ("sigmoid", "relu"):
            raise ValueError(f"unknown final activation {self.final_activation!r}")
        prev = self.stem_channels
        for i, b in enumerate(self.blocks):
            if b.in_channels != prev:
                raise ValueError(f"block {i} expects {b.in_channels} channels, previous layer gives {prev}")
            prev = b.out_channels

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].out_channels if self.blocks else self.stem_channels

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "stem_channels": self.stem_channels,
            "blocks": [[b.in_channels, b.out_channels, b.kind] for b in self.blocks],
            "final_activation": self.final_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            input_shape=tuple(d.get("input_shape", INPUT_SHAPE)),
            stem_channels=int(d.get("stem_channels", 8)),
            blocks=tuple(BlockSpec(int(b[0]), int(b[1]), b[2] if len(b) > 2 else "leres") for b in d["blocks"]),
            final_activation=d.get("final_activation", "sigmoid"),
        )


def lexnet_config(widths=(16, 16, 32, 32), stem_channels: int = 8, kind: str = "leres",
                  final_activation: str = "sigmoid") -> BackboneConfig:
    """The four-block layout of the reference architecture (8 -> 16 -> 16 -> 32 -> 32)."""
    blocks, prev = [], stem_channels
    for w in widths:
        blocks.append(BlockSpec(prev, w, kind))
        prev = w
    return BackboneConfig(stem_channels=stem_channels, blocks=tuple(blocks), final_activation=final_activation)


def resnet_twin_config(widths=(16, 16, 32, 32), stem_channels: int = 8) -> BackboneConfig:
    return lexnet_config(widths, stem_channels, kind="standard_res", final_activation="relu")


# ---------------------------------------------------------------- layers


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv3x3:
    def __init__(self, cin: int, cout: int, rng, dtype, name: str):
        self.weight = Parameter(kaiming_uniform((cout, cin, 3, 3), cin * 9, rng, dtype), "backbone", name)

    @property
    def params(self):
        return [self.weight]

    def forward(self, x):
        return nn.conv2d_forward(x, self.weight.data)

    def backward(self, dy, cache):
        dx, dk = nn.conv2d_backward(dy, cache)
        self.weight.accumulate(dk)
        return dx


class Conv1x1:
    def __init__(self, cin: int, cout: int, rng, dtype, name: str):
        self.weight = Parameter(kaiming_uniform((cout, cin), cin, rng, dtype), "backbone", name)

    @property
    def params(self):
        return [self.weight]

    def forward(self, x):
        return nn.conv1x1_forward(x, self.weight.data)

    def backward(self, dy, cache):
        dx, dk = nn.conv1x1_backward(dy, cache)
        self.weight.accumulate(dk)
        return dx


class Depthwise3x3:
    def __init__(self, channels: int, rng, dtype, name: str):
        self.weight = Parameter(kaiming_uniform((channels, 3, 3), 9, rng, dtype), "backbone", name)

    @property
    def params(self):
        return [self.weight]

    def forward(self, x):
        return nn.depthwise_conv3x3_forward(x, self.weight.data)

    def backward(self, dy, cache):
        dx, dk = nn.depthwise_conv3x3_backward(dy, cache)
        self.weight.accumulate(dk)
        return dx


class BatchNorm:
    def __init__(self, channels: int, dtype, name: str):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), "backbone", name + ".gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), "backbone", name + ".beta")
        self.state = nn.BNState.fresh(channels, dtype)
        self.name = name

    @property
    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, train: bool):
        return nn.batch_norm_forward(x, self.gamma.data, self.beta.data, self.state, train)

    def backward(self, dy, cache):
        dx, dg, db = nn.batch_norm_backward(dy, cache)
        if dg is not None:
            self.gamma.accumulate(dg)
            self.beta.accumulate(db)
        return dx


def _act_forward(name: str, x):
    if name == "relu":
        return nn.relu_forward(x)
    return nn.sigmoid_forward(x)


def _act_backward(name: str, dy, cache):
    if name == "relu":
        return nn.relu_backward(dy, cache)
    return nn.sigmoid_backward(dy, cache)


# ---------------------------------------------------------------- blocks


class Stem:
    def __init__(self, cin, cout, rng, dtype):
        self.conv = Conv3x3(cin, cout, rng, dtype, "stem.conv")
        self.bn = BatchNorm(cout, dtype, "stem.bn")
        self.layers = [self.conv, self.bn]

    @property
    def params(self):
        return self.conv.params + self.bn.params

    def forward(self, x, train, act):
        h, c1 = self.conv.forward(x)
        h, c2 = self.bn.forward(h, train)
        y, c3 = _act_forward(act, h)
        return y, (c1, c2, c3, act)

    def backward(self, dy, cache):
        c1, c2, c3, act = cache
        d = _act_backward(act, dy, c3)
        d = self.bn.backward(d, c2)
        return self.conv.backward(d, c1)


class PlainResidual:
    """Equal-width residual block: two 3x3 conv+BN with an identity shortcut."""

    def __init__(self, n, rng, dtype, name):
        self.conv1 = Conv3x3(n, n, rng, dtype, name + ".conv1")
        self.bn1 = BatchNorm(n, dtype, name + ".bn1")
        self.conv2 = Conv3x3(n, n, rng, dtype, name + ".conv2")
        self.bn2 = BatchNorm(n, dtype, name + ".bn2")
        self.layers = [self.conv1, self.bn1, self.conv2, self.bn2]

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def forward(self, x, train, act):
        h, c1 = self.conv1.forward(x)
        h, c2 = self.bn1.forward(h, train)
        a, c3 = nn.relu_forward(h)
        h, c4 = self.conv2.forward(a)
        v, c5 = self.bn2.forward(h, train)
        y, c6 = _act_forward(act, nn.add(v, x))
        return y, (c1, c2, c3, c4, c5, c6, act)

    def backward(self, dy, cache):
        c1, c2, c3, c4, c5, c6, act = cache
        dsum = _act_backward(act, dy, c6)
        d = self.bn2.backward(dsum, c5)
        d = self.conv2.backward(d, c4)
        d = nn.relu_backward(d, c3)
        d = self.bn1.backward(d, c2)
        return self.conv1.backward(d, c1) + dsum


class LEResExpand:
    """Width-doubling block built only from equal-width convolutions.

    ``a = relu(bn1(conv1(x)))`` (n -> n); ``u = [a, dw(a)]`` (2n);
    ``y = act(bn2(conv2(u)) + [x, a])``.
    """

    def __init__(self, n, rng, dtype, name):
        self.n = n
        self.conv1 = Conv3x3(n, n, rng, dtype, name + ".conv1")
        self.bn1 = BatchNorm(n, dtype, name + ".bn1")
        self.ghost = Depthwise3x3(n, rng, dtype, name + ".ghost")
        self.conv2 = Conv3x3(2 * n, 2 * n, rng, dtype, name + ".conv2")
        self.bn2 = BatchNorm(2 * n, dtype, name + ".bn2")
        self.layers = [self.conv1, self.bn1, self.ghost, self.conv2, self.bn2]

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def forward(self, x, train, act):
        if x.shape[-1] != self.n:
            raise DimensionError(f"LERes block expects {self.n} channels, got {x.shape[-1]}")
        h, c1 = self.conv1.forward(x)
        h, c2 = self.bn1.forward(h, train)
        a, c3 = nn.relu_forward(h)
        g, c4 = self.ghost.forward(a)
        h, c5 = self.conv2.forward(nn.concat_channels(a, g))
        v, c6 = self.bn2.forward(h, train)
        y, c7 = _act_forward(act, nn.add(v, nn.concat_channels(x, a)))
        return y, (c1, c2, c3, c4, c5, c6, c7, act)

    def backward(self, dy, cache):
        c1, c2, c3, c4, c5, c6, c7, act = cache
        n = self.n
        dsum = _act_backward(act, dy, c7)
        dx_short, da_short = nn.split_channels(dsum, n)
        d = self.bn2.backward(dsum, c6)
        d = self.conv2.backward(d, c5)
        da_main, dg = nn.split_channels(d, n)
        da = da_main + da_short + self.ghost.backward(dg, c4)
        d = nn.relu_backward(da, c3)
        d = self.bn1.backward(d, c2)
        return self.conv1.backward(d, c1) + dx_short


class StandardResExpand:
    """Classic widening residual block with a 1x1 conv+BN projection shortcut."""

    def __init__(self, n, rng, dtype, name):
        self.n = n
        self.conv1 = Conv3x3(n, 2 * n, rng, dtype, name + ".conv1")
        self.bn1 = BatchNorm(2 * n, dtype, name + ".bn1")
        self.conv2 = Conv3x3(2 * n, 2 * n, rng, dtype, name + ".conv2")
        self.bn2 = BatchNorm(2 * n, dtype, name + ".bn2")
        self.proj = Conv1x1(n, 2 * n, rng, dtype, name + ".proj")
        self.bn3 = BatchNorm(2 * n, dtype, name + ".bn3")
        self.layers = [self.conv1, self.bn1, self.conv2, self.bn2, self.proj, self.bn3]

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def forward(self, x, train, act):
        if x.shape[-1] != self.n:
            raise DimensionError(f"residual block expects {self.n} channels, got {x.shape[-1]}")
        h, c1 = self.conv1.forward(x)
        h, c2 = self.bn1.forward(h, train)
        a, c3 = nn.relu_forward(h)
        h, c4 = self.conv2.forward(a)
        v, c5 = self.bn2.forward(h, train)
        s, c6 = self.proj.forward(x)
        s, c7 = self.bn3.forward(s, train)
        y, c8 = _act_forward(act, nn.add(v, s))
        return y, (c1, c2, c3, c4, c5, c6, c7, c8, act)

    def backward(self, dy, cache):
        c1, c2, c3, c4, c5, c6, c7, c8, act = cache
        dsum = _act_backward(act, dy, c8)
        ds = self.bn3.backward(dsum, c7)
        dx_short = self.proj.backward(ds, c6)
        d = self.bn2.backward(dsum, c5)
        d = self.conv2.backward(d, c4)
        d = nn.relu_backward(d, c3)
        d = self.bn1.backward(d, c2)
        return self.conv1.backward(d, c1) + dx_short


def make_block(spec: BlockSpec, rng, dtype, name: str):
    if not spec.expands:
        return PlainResidual(spec.in_channels, rng, dtype, name)
    if spec.kind == "leres":
        return LEResExpand(spec.in_channels, rng, dtype, name)
    return StandardResExpand(spec.in_channels, rng, dtype, name)


# ---------------------------------------------------------------- backbone


class Backbone:
    def __init__(self, config: BackboneConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        self.dtype = dtype
        self.stem = Stem(config.input_shape[0], config.stem_channels, rng, dtype)
        self.blocks = [make_block(b, rng, dtype, f"block{i + 1}") for i, b in enumerate(config.blocks)]

    @property
    def params(self) -> list[Parameter]:
        return self.stem.params + [p for b in self.blocks for p in b.params]

    @property
    def bn_layers(self) -> list[BatchNorm]:
        out = [self.stem.bn]
        for b in self.blocks:
            out += [layer for layer in b.layers if isinstance(layer, BatchNorm)]
        return out

    def _acts(self) -> list[str]:
        n = 1 + len(self.blocks)
        return ["relu"] * (n - 1) + [self.config.final_activation]

    def forward(self, x: np.ndarray, train: bool = False):
        """``x`` is (B, 1, 20, 2); returns the channels-last (B, 20, 2, D) latent map and a cache."""
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise DimensionError(f"backbone expects (B, {self.config.input_shape}), got {x.shape}")
        acts = self._acts()
        caches = []
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        h, c = self.stem.forward(h, train, acts[0])
        caches.append(c)
        for block, act in zip(self.blocks, acts[1:]):
            h, c = block.forward(h, train, act)
            caches.append(c)
        return h, caches

    def backward(self, dlatent: np.ndarray, caches) -> np.ndarray:
        """Accumulate parameter gradients; returns d(input) in (B, 1, 20, 2) order."""
        d = dlatent
        for block, c in zip(reversed(self.blocks), reversed(caches[1:])):
            d = block.backward(d, c)
        return self.stem.backward(d, caches[0]).transpose(0, 3, 1, 2)

    def cumulative_params(self) -> list[tuple[str, int, int]]:
        """Rows of (operator, out channels, cumulative parameter count)."""
        rows = []
        total = sum(p.size for p in self.stem.params)
        rows.append(("Conv3x3+BN", self.config.stem_channels, total))
        for spec, block in zip(self.config.blocks, self.blocks):
            total += sum(p.size for p in block.params)
            label = "LERes Block" if spec.kind == "leres" else "Res Block"
            rows.append((label, spec.out_channels, total))
        return rows

    def count_params(self) -> int:
        return sum(p.size for p in self.params)


def block_param_count(spec: BlockSpec) -> int:
    block = make_block(spec, np.random.default_rng(0), np.float32, "probe")
    return sum(p.size for p in block.params)
