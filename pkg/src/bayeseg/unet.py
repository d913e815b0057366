"""Attention U-Net with a partially variational decoder.

Topology: `depth` encoder stages (two 3x3 convs, each group-normalized and
ReLU-activated, then 2x2 max pool), a bottleneck of two convs gated by a
channel+spatial attention block, and a mirrored decoder (nearest upsample +
3x3 projection, skip concatenation, two 3x3 convs). Decoder convolutions
are variational except the last `deterministic_tail_convs`; the 1x1 output
head is deterministic and emits two channels: segmentation logit and
log-variance.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .layers import Conv2D, GroupNorm, PriorSpec, VariationalConv2D
from .rng import RngStream
from .tensor import ShapeError, Tensor, concat, global_pool, pool2d, upsample2d

IN_CHANNELS = 1
INIT_STREAM_ID = 0xA11C


@dataclass
class ArchConfig:
    base_filters: int = 32
    depth: int = 4
    variational_decoder: bool = True
    deterministic_tail_convs: int = 2
    attention_placement: str = "bottleneck_only"  # or "central_layers"
    groupnorm_group_size: int = 32
    cbam_reduction: int = 8
    input_size: int = 256
    prior_std: float = 1.0
    sigma_init: float = 0.05
    # head biases start at the foreground log-odds and a small noise scale,
    # which keeps the early background-suppression phase from starving the
    # gradient signal on sparse masks
    head_logit_bias: float = -2.5
    head_logvar_bias: float = -2.0

    def __post_init__(self):
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.attention_placement not in ("bottleneck_only", "central_layers"):
            raise ValueError(f"unknown attention_placement: {self.attention_placement!r}")
        if not 0 <= self.deterministic_tail_convs <= 3 * self.depth:
            raise ValueError(
                f"deterministic_tail_convs must be in [0, {3 * self.depth}], "
                f"got {self.deterministic_tail_convs}")
        if self.cbam_reduction < 1 or self.groupnorm_group_size < 1:
            raise ValueError("cbam_reduction and groupnorm_group_size must be >= 1")
        if self.sigma_init <= 0:
            raise ValueError(f"sigma_init must be positive, got {self.sigma_init}")
        if self.input_size % (1 << self.depth) != 0:
            raise ShapeError(
                f"input_size {self.input_size} not divisible by 2^depth = {1 << self.depth}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


class ChannelAttention:
    """Per-channel gate: sigmoid(MLP(global_avg) + MLP(global_max)).

    The two pooled vectors share one bottleneck MLP (1x1 convs, no bias,
    `channels / reduction` hidden units).
    """

    def __init__(self, channels: int, reduction: int, rng: RngStream, dtype=np.float32):
        if channels < reduction:
            raise ShapeError(
                f"channel attention needs channels >= reduction, got {channels} < {reduction}")
        hidden = channels // reduction
        self.fc1 = Conv2D(channels, hidden, 1, rng, bias=False, dtype=dtype)
        self.fc2 = Conv2D(hidden, channels, 1, rng, bias=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        avg = self._mlp(global_pool(x, "avg", "spatial"))
        mx = self._mlp(global_pool(x, "max", "spatial"))
        return (avg + mx).sigmoid()

    def _mlp(self, v: Tensor) -> Tensor:
        return self.fc2.forward(self.fc1.forward(v).relu())

    def params(self) -> dict[str, Tensor]:
        return {"fc1.weight": self.fc1.weight, "fc2.weight": self.fc2.weight}


class SpatialAttention:
    """Per-pixel gate: sigmoid(7x7 conv over [channel_avg; channel_max])."""

    def __init__(self, rng: RngStream, dtype=np.float32):
        self.conv = Conv2D(2, 1, 7, rng, bias=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        pooled = concat([global_pool(x, "avg", "channel"),
                         global_pool(x, "max", "channel")], axis=1)
        return self.conv.forward(pooled).sigmoid()

    def params(self) -> dict[str, Tensor]:
        return {"conv.weight": self.conv.weight}


class CBAM:
    """Channel gate first, then spatial gate, both multiplicative."""

    def __init__(self, channels: int, reduction: int, rng: RngStream, dtype=np.float32):
        self.channel = ChannelAttention(channels, reduction, rng, dtype=dtype)
        self.spatial = SpatialAttention(rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = x * self.channel.forward(x)
        return x * self.spatial.forward(x)

    def params(self) -> dict[str, Tensor]:
        out = {f"channel.{k}": v for k, v in self.channel.params().items()}
        out.update({f"spatial.{k}": v for k, v in self.spatial.params().items()})
        return out


class ModelGraph:
    """The wired network plus a registry of named layers and parameters."""

    def __init__(self, cfg: ArchConfig, rng: RngStream, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self._layers: dict[str, object] = {}
        bf, depth = cfg.base_filters, cfg.depth
        gs = cfg.groupnorm_group_size
        prior = PriorSpec(std=cfg.prior_std)

        def reg(name, layer):
            self._layers[name] = layer
            return layer

        self.encoder = []
        cin = IN_CHANNELS
        for i in range(depth):
            cout = bf << i
            stage = {
                "conv1": reg(f"enc{i}.conv1", Conv2D(cin, cout, 3, rng, dtype=dtype)),
                "gn1": reg(f"enc{i}.gn1", GroupNorm(cout, gs, dtype=dtype)),
                "conv2": reg(f"enc{i}.conv2", Conv2D(cout, cout, 3, rng, dtype=dtype)),
                "gn2": reg(f"enc{i}.gn2", GroupNorm(cout, gs, dtype=dtype)),
                "attn": None,
            }
            if cfg.attention_placement == "central_layers" and i == depth - 1:
                stage["attn"] = reg(f"enc{i}.attn", CBAM(cout, cfg.cbam_reduction, rng, dtype=dtype))
            self.encoder.append(stage)
            cin = cout

        cb = bf << depth
        self.bottleneck = {
            "conv1": reg("bottleneck.conv1", Conv2D(cin, cb, 3, rng, dtype=dtype)),
            "gn1": reg("bottleneck.gn1", GroupNorm(cb, gs, dtype=dtype)),
            "conv2": reg("bottleneck.conv2", Conv2D(cb, cb, 3, rng, dtype=dtype)),
            "gn2": reg("bottleneck.gn2", GroupNorm(cb, gs, dtype=dtype)),
            "attn": reg("bottleneck.attn", CBAM(cb, cfg.cbam_reduction, rng, dtype=dtype)),
        }

        # Decoder convs run deepest stage first; the last `tail` of them
        # stay deterministic to keep the segmentation head precise.
        total_dec_convs = 3 * depth
        tail = cfg.deterministic_tail_convs if cfg.variational_decoder else total_dec_convs
        conv_index = 0

        def dec_conv(name, c_in, c_out):
            nonlocal conv_index
            variational = conv_index < total_dec_convs - tail
            conv_index += 1
            if variational:
                return reg(name, VariationalConv2D(
                    c_in, c_out, 3, rng, prior=prior, sigma_init=cfg.sigma_init, dtype=dtype))
            return reg(name, Conv2D(c_in, c_out, 3, rng, dtype=dtype))

        self.decoder = []
        for j in range(depth - 1, -1, -1):
            c_skip = bf << j
            c_in = c_skip * 2
            stage = {
                "up": dec_conv(f"dec{j}.up", c_in, c_skip),
                "gn_up": reg(f"dec{j}.gn_up", GroupNorm(c_skip, gs, dtype=dtype)),
                "conv_a": dec_conv(f"dec{j}.conv_a", c_in, c_skip),
                "gn_a": reg(f"dec{j}.gn_a", GroupNorm(c_skip, gs, dtype=dtype)),
                "conv_b": dec_conv(f"dec{j}.conv_b", c_skip, c_skip),
                "gn_b": reg(f"dec{j}.gn_b", GroupNorm(c_skip, gs, dtype=dtype)),
                "attn": None,
            }
            if cfg.attention_placement == "central_layers" and j == depth - 1:
                stage["attn"] = reg(f"dec{j}.attn", CBAM(c_skip, cfg.cbam_reduction, rng, dtype=dtype))
            self.decoder.append(stage)

        self.head = reg("head", Conv2D(bf, 2, 1, rng, dtype=dtype))
        self.head.bias.data[:] = [cfg.head_logit_bias, cfg.head_logvar_bias]

    # ---- introspection ----------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for lname, layer in self._layers.items():
            for pname, tensor in layer.params().items():
                out[f"{lname}.{pname}"] = tensor
        return out

    def variational_layers(self) -> dict[str, VariationalConv2D]:
        return {n: l for n, l in self._layers.items() if isinstance(l, VariationalConv2D)}

    def param_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def kl_total(self) -> Tensor:
        total = None
        for layer in self.variational_layers().values():
            term = layer.kl()
            total = term if total is None else total + term
        if total is None:
            return Tensor(np.zeros((), dtype=self.dtype))
        return total

    def zero_grad(self):
        for t in self.parameters().values():
            t.grad = None

    # ---- forward -----------------------------------------------------------

    def forward(self, x: Tensor, mode: str = "frozen", rng: RngStream = None) -> Tensor:
        n, c, h, w = (x.data.shape if x.data.ndim == 4 else (None,) * 4)
        if n is None:
            raise ShapeError(f"forward expects [N,C,H,W], got shape {x.data.shape}")
        if c != IN_CHANNELS:
            raise ShapeError(f"forward expects {IN_CHANNELS} input channel(s), got {c}")
        div = 1 << self.cfg.depth
        if h % div or w % div:
            raise ShapeError(f"spatial dims {h}x{w} must be divisible by {div}")
        if mode not in ("train", "sample", "frozen"):
            raise ValueError(f"unknown forward mode: {mode!r}")

        def block(stage, prefix_keys, t):
            for conv_key, gn_key in prefix_keys:
                t = stage[conv_key].forward(t, rng, mode)
                t = stage[gn_key].forward(t)
                t = t.relu()
            return t

        skips = []
        t = x
        for stage in self.encoder:
            t = block(stage, [("conv1", "gn1"), ("conv2", "gn2")], t)
            if stage["attn"] is not None:
                t = stage["attn"].forward(t)
            skips.append(t)
            t = pool2d(t, "max", 2, 2)

        t = block(self.bottleneck, [("conv1", "gn1"), ("conv2", "gn2")], t)
        t = self.bottleneck["attn"].forward(t)

        for stage, skip in zip(self.decoder, reversed(skips)):
            t = upsample2d(t, 2)
            t = stage["up"].forward(t, rng, mode)
            t = stage["gn_up"].forward(t)
            t = t.relu()
            t = concat([skip, t], axis=1)
            t = block(stage, [("conv_a", "gn_a"), ("conv_b", "gn_b")], t)
            if stage["attn"] is not None:
                t = stage["attn"].forward(t)

        return self.head.forward(t)


def build_model(cfg: ArchConfig, seed: int = 0) -> ModelGraph:
    """Construct the network with reproducible parameter initialization."""
    return ModelGraph(cfg, RngStream(seed, INIT_STREAM_ID))
