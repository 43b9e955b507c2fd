"""Declarative construction of U-Net and Contextual U-Net topologies.

Stage addressing for contextual links: every feature map is identified by its
downscale exponent. Encoder stage outputs live at scales 0..depth-1, the
bottleneck at scale `depth`, decoder stage outputs at scales depth-1..0.
A link (source, target) connects the feature map at scale `source` (encoder
output, or bottleneck when source == depth) into the decoder stage at scale
`target`; it is valid when source >= target, i.e. the source is spatially
no larger than the target.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Variable
from .errors import ConfigError, ShapeError
from .ops import (ContextLink, ConvFilter, concat_channels, contextual_conv,
                  conv2d_same, make_conv_filter, maxpool2, selu,
                  transposed_conv2d)
from .tensor import SINGLE, seeded_rng

CONV_KERNEL = 3
UP_KERNEL = 2
UP_STRIDE = 2

HEAD_SEGMENTATION = "softmax-segmentation"
HEAD_DENSITY = "linear-density"
_HEADS = (HEAD_SEGMENTATION, HEAD_DENSITY)


@dataclass
class HourglassConfig:
    """Topology description for hourglass networks.

    Channels start at base_filters and double at every encode stage down to
    the bottleneck, then halve back up. contextual_links uses the scale
    addressing described in the module docstring; None means "builder
    default" (bottleneck into every decoder stage for the contextual
    builder, no links for the plain U-Net).
    """

    depth: int
    base_filters: int
    in_channels: int
    out_channels: int
    mirror_shortcuts: bool = True
    contextual_links: list | None = None
    head: str = HEAD_SEGMENTATION

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            raise ConfigError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("in_channels and out_channels must be >= 1")
        if self.head not in _HEADS:
            raise ConfigError(f"unknown head {self.head!r}, expected one of {_HEADS}")
        if self.contextual_links is not None:
            seen_targets = set()
            for link in self.contextual_links:
                if len(link) != 2:
                    raise ConfigError(f"contextual link must be a (source, target) pair, got {link}")
                src, dst = int(link[0]), int(link[1])
                if not (0 <= dst < self.depth):
                    raise ConfigError(f"link target {dst} outside decoder scales 0..{self.depth - 1}")
                if not (0 <= src <= self.depth):
                    raise ConfigError(f"link source {src} outside scales 0..{self.depth}")
                if src < dst:
                    raise ConfigError(
                        f"link source scale {src} is spatially larger than target scale {dst}"
                    )
                if dst in seen_targets:
                    raise ConfigError(f"decoder scale {dst} has more than one contextual link")
                seen_targets.add(dst)

    def stage_filters(self, scale):
        """Channel count of the feature map at the given downscale exponent."""
        return self.base_filters * (2 ** scale)

    def to_dict(self):
        return {
            "depth": self.depth,
            "base_filters": self.base_filters,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "mirror_shortcuts": self.mirror_shortcuts,
            "contextual_links": None if self.contextual_links is None
            else [[int(s), int(t)] for s, t in self.contextual_links],
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, d):
        links = d.get("contextual_links")
        cfg = cls(
            depth=int(d["depth"]),
            base_filters=int(d["base_filters"]),
            in_channels=int(d["in_channels"]),
            out_channels=int(d["out_channels"]),
            mirror_shortcuts=bool(d.get("mirror_shortcuts", True)),
            contextual_links=None if links is None else [(int(s), int(t)) for s, t in links],
            head=d.get("head", HEAD_SEGMENTATION),
        )
        cfg.validate()
        return cfg


@dataclass
class _EncoderStage:
    conv1: ConvFilter
    conv2: ConvFilter


@dataclass
class _DecoderStage:
    up: ConvFilter
    conv1: ConvFilter
    conv2: ConvFilter | None = None        # plain second conv ...
    ctx: ContextLink | None = None         # ... or a contextual replacement
    ctx_source: int | None = None


class Network:
    """An hourglass network: stages plus a flat parameter registry.

    Parameter names are stable across builds and checkpoint round-trips.
    Weights are shared read-only during inference; training updates require
    exclusive access between optimizer steps.
    """

    def __init__(self, config, dtype=SINGLE):
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.params = {}
        self.encoders = []
        self.bottleneck = None
        self.decoders = {}       # scale -> _DecoderStage
        self.head = None
        self.last_stage_shapes = None

    def _register(self, name, filt):
        self.params[f"{name}.weight"] = filt.weights
        self.params[f"{name}.bias"] = filt.bias
        return filt

    def parameter_count(self):
        return sum(v.value.size for v in self.params.values())

    def zero_grads(self):
        for v in self.params.values():
            v.zero_grad()

    def state_arrays(self):
        """Snapshot of all parameter values (copies), keyed by name."""
        return {name: v.value.copy() for name, v in self.params.items()}

    def load_state_arrays(self, state):
        for name, v in self.params.items():
            arr = np.asarray(state[name], dtype=v.value.dtype)
            if arr.shape != v.value.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != {v.value.shape}")
            v.value = arr.copy()

    def _check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"input must be rank-4 (n, c, h, w), got shape {x.shape}")
        cfg = self.config
        if x.shape[1] != cfg.in_channels:
            raise ShapeError(f"input has {x.shape[1]} channels, expected {cfg.in_channels}")
        div = 2 ** cfg.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(
                f"input spatial size {x.shape[2]}x{x.shape[3]} not divisible by 2^depth={div}"
            )

    def forward(self, x):
        """Run the network; returns the head output Variable.

        The segmentation head emits raw logits (softmax lives in the loss);
        the density head emits unbounded reals.
        """
        if not isinstance(x, Variable):
            x = Variable(np.ascontiguousarray(x, dtype=self.dtype))
        self._check_input(x.value)
        cfg = self.config
        shapes = []

        sources = {}
        cur = x
        for scale, stage in enumerate(self.encoders):
            cur = selu(conv2d_same(cur, stage.conv1))
            cur = selu(conv2d_same(cur, stage.conv2))
            sources[scale] = cur
            shapes.append((f"enc{scale}", cur.value.shape))
            cur = maxpool2(cur)
        cur = selu(conv2d_same(cur, self.bottleneck.conv1))
        cur = selu(conv2d_same(cur, self.bottleneck.conv2))
        sources[cfg.depth] = cur
        shapes.append(("bottleneck", cur.value.shape))

        for scale in range(cfg.depth - 1, -1, -1):
            stage = self.decoders[scale]
            cur = transposed_conv2d(cur, stage.up, stride=UP_STRIDE)
            if cfg.mirror_shortcuts:
                cur = concat_channels(cur, sources[scale])
            cur = selu(conv2d_same(cur, stage.conv1))
            if stage.ctx is not None:
                cur = contextual_conv(sources[stage.ctx_source], cur, stage.ctx)
            else:
                cur = selu(conv2d_same(cur, stage.conv2))
            shapes.append((f"dec{scale}", cur.value.shape))

        out = conv2d_same(cur, self.head)
        shapes.append(("head", out.value.shape))
        self.last_stage_shapes = shapes
        return out


def shape_program(config, input_shape):
    """Predicted stage output shapes for a given input, from config alone."""
    n, c, h, w = input_shape
    shapes = []
    for scale in range(config.depth):
        f = config.stage_filters(scale)
        shapes.append((f"enc{scale}", (n, f, h >> scale, w >> scale)))
    shapes.append(("bottleneck",
                   (n, config.stage_filters(config.depth),
                    h >> config.depth, w >> config.depth)))
    for scale in range(config.depth - 1, -1, -1):
        shapes.append((f"dec{scale}", (n, config.stage_filters(scale), h >> scale, w >> scale)))
    shapes.append(("head", (n, config.out_channels, h, w)))
    return shapes


def _resolve_links(config, default_all):
    if config.contextual_links is not None:
        return [(int(s), int(t)) for s, t in config.contextual_links]
    if default_all:
        return [(config.depth, t) for t in range(config.depth)]
    return []


def _build(config, links, rng, dtype, init):
    net = Network(config, dtype=dtype)
    link_by_target = {t: s for s, t in links}
    d = config.depth

    in_c = config.in_channels
    for scale in range(d):
        f = config.stage_filters(scale)
        stage = _EncoderStage(
            conv1=net._register(f"enc{scale}.conv1",
                                make_conv_filter(in_c, f, CONV_KERNEL, rng, dtype, init)),
            conv2=net._register(f"enc{scale}.conv2",
                                make_conv_filter(f, f, CONV_KERNEL, rng, dtype, init)),
        )
        net.encoders.append(stage)
        in_c = f

    fb = config.stage_filters(d)
    net.bottleneck = _EncoderStage(
        conv1=net._register("bottleneck.conv1",
                            make_conv_filter(in_c, fb, CONV_KERNEL, rng, dtype, init)),
        conv2=net._register("bottleneck.conv2",
                            make_conv_filter(fb, fb, CONV_KERNEL, rng, dtype, init)),
    )

    for scale in range(d - 1, -1, -1):
        f = config.stage_filters(scale)
        f_below = config.stage_filters(scale + 1)
        up = net._register(f"dec{scale}.up",
                           make_conv_filter(f_below, f, UP_KERNEL, rng, dtype, init))
        conv1_in = 2 * f if config.mirror_shortcuts else f
        conv1 = net._register(f"dec{scale}.conv1",
                              make_conv_filter(conv1_in, f, CONV_KERNEL, rng, dtype, init))
        stage = _DecoderStage(up=up, conv1=conv1)
        if scale in link_by_target:
            src = link_by_target[scale]
            src_channels = config.stage_filters(src)
            stage.ctx = ContextLink(
                bank_small=net._register(
                    f"dec{scale}.ctx.small",
                    make_conv_filter(src_channels, f, CONV_KERNEL, rng, dtype, init)),
                bank_large=net._register(
                    f"dec{scale}.ctx.large",
                    make_conv_filter(f, f, CONV_KERNEL, rng, dtype, init)),
            )
            stage.ctx_source = src
        else:
            stage.conv2 = net._register(f"dec{scale}.conv2",
                                        make_conv_filter(f, f, CONV_KERNEL, rng, dtype, init))
        net.decoders[scale] = stage

    net.head = net._register(
        "head", make_conv_filter(config.stage_filters(0), config.out_channels, 1,
                                 rng, dtype, init))
    return net


def _as_rng(rng):
    if rng is None or isinstance(rng, np.random.Generator):
        return rng
    return seeded_rng(int(rng), "init")


def build_unet(config, rng, dtype=SINGLE, init="xavier"):
    """Plain U-Net: mirror shortcuts only; contextual_links must be empty."""
    config.validate()
    if config.contextual_links:
        raise ConfigError("build_unet requires empty contextual_links; "
                          "use build_contextual_unet")
    resolved = replace(config, contextual_links=[])
    return _build(resolved, [], _as_rng(rng), dtype, init)


def build_contextual_unet(config, rng, dtype=SINGLE, init="xavier"):
    """Contextual U-Net: decoder stages with a link get their second
    convolution replaced by a contextual convolution from the link source
    (default: bottleneck into every decoder stage)."""
    config.validate()
    links = _resolve_links(config, default_all=True)
    resolved = replace(config, contextual_links=[list(l) for l in links])
    return _build(resolved, links, _as_rng(rng), dtype, init)


def build_from_config(config, rng=None, dtype=SINGLE, init="xavier"):
    """Build whichever topology the (resolved) config describes.

    rng=None produces zero weights; checkpoint loading overwrites them.
    """
    config.validate()
    links = _resolve_links(config, default_all=False)
    resolved = replace(config, contextual_links=[list(l) for l in links])
    return _build(resolved, links, _as_rng(rng), dtype, init)
