"""Two-stream boundary-aware segmentation network.

Main stream: residual encoder/decoder with skip connections. Shape stream:
three attention gates tapping encoder levels 1-3, linked by strided
connection residual blocks. The last gate's output joins the encoder
bottleneck through dilated spatial pyramid pooling before decoding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import blocks
from .autodiff import ParameterStore, Tensor
from .blocks import AttentionGateSpec, DsppSpec, ResidualBlockSpec

N_GATES = 3
MAX_BOTTLENECK_CHANNELS = 512


@dataclass(frozen=True)
class NetworkSpec:
    levels: int = 4
    base_channels: int = 16
    shape_channels: int = 8
    dilation_rates: tuple = (1, 2, 4)
    in_channels: int = 1
    out_classes: int = 1
    dspp_channels: Optional[int] = None  # defaults to the bottleneck width

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(int(r) for r in self.dilation_rates))
        if self.levels < N_GATES:
            raise ValueError(f"need at least {N_GATES} encoder levels, got {self.levels}")
        if self.base_channels < 1 or self.shape_channels < 1:
            raise ValueError("channel widths must be positive")
        if self.channels(self.levels) > MAX_BOTTLENECK_CHANNELS:
            raise ValueError(f"bottleneck width {self.channels(self.levels)} exceeds {MAX_BOTTLENECK_CHANNELS}")
        if self.in_channels != 1 or self.out_classes != 1:
            raise ValueError("only single-channel input and a single output class are supported")
        self.dspp  # validates the dilation rates

    def channels(self, level: int) -> int:
        """Main-stream width at 1-based encoder ``level``."""
        return self.base_channels * 2 ** (level - 1)

    @property
    def dspp(self) -> DsppSpec:
        return DsppSpec(self.dilation_rates, self.dspp_channels or self.channels(self.levels))

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass
class ForwardOutput:
    y_logits: Tensor
    s_logits: Tensor
    alphas: list = field(default_factory=list)


def _enc_block(spec: NetworkSpec, level: int) -> ResidualBlockSpec:
    c = spec.channels(level)
    return ResidualBlockSpec(c, c)


def _dec_block(spec: NetworkSpec, level: int) -> ResidualBlockSpec:
    return ResidualBlockSpec(spec.channels(level + 1) + spec.channels(level), spec.channels(level))


def _conn_block(spec: NetworkSpec) -> ResidualBlockSpec:
    return ResidualBlockSpec(spec.shape_channels, spec.shape_channels, stride=2)


@lru_cache(maxsize=32)
def param_layout(spec: NetworkSpec) -> tuple:
    """Ordered ``(name, shape, kind)`` for every parameter of the network."""
    s = spec.shape_channels
    layout = blocks.conv_layout("stem", spec.in_channels, spec.channels(1), 3)
    for level in range(1, spec.levels + 1):
        for b in range(2):
            layout += blocks.residual_layout(f"enc{level}.block{b}", _enc_block(spec, level))
        if level < spec.levels:
            layout += blocks.conv_layout(f"down{level}", spec.channels(level), spec.channels(level + 1), 3)
    layout += blocks.conv_layout("shape.entry", spec.channels(1), s, 1)
    for i in range(1, N_GATES + 1):
        layout += blocks.conv_layout(f"shape.tap{i}", spec.channels(i), s, 1)
        layout += blocks.gate_layout(f"shape.gate{i}", AttentionGateSpec(s, s))
        if i < N_GATES:
            layout += blocks.residual_layout(f"shape.conn{i}", _conn_block(spec))
    layout += blocks.dspp_layout("dspp", spec.dspp, spec.channels(spec.levels) + s)
    for level in range(spec.levels - 1, 0, -1):
        layout += blocks.residual_layout(f"dec{level}", _dec_block(spec, level))
    layout += blocks.norm_layout("head.norm", spec.channels(1))
    layout += blocks.conv_layout("head.seg", spec.channels(1), spec.out_classes, 1)
    layout += blocks.conv_layout("head.edge", s, 1, 1)
    return tuple(layout)


def init_parameters(spec: NetworkSpec, seed: int) -> ParameterStore:
    """He-normal kernels, zero biases/shifts, unit norm scales; deterministic in ``seed``."""
    return blocks.build_store(list(param_layout(spec)), np.random.default_rng(seed))


def check_parameters(spec: NetworkSpec, params: ParameterStore) -> None:
    expected = param_layout(spec)
    names = [name for name, _, _ in expected]
    if params.names() != names:
        missing = sorted(set(names) - set(params.names()))
        extra = sorted(set(params.names()) - set(names))
        raise ValueError(f"parameter store does not match spec (missing={missing[:5]}, extra={extra[:5]})")
    for name, shape, _ in expected:
        if params[name].shape != shape:
            raise ValueError(f"parameter '{name}' has shape {params[name].shape}, spec needs {shape}")


def _conv(x, params, prefix, **kw):
    return ad.conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], **kw)


def forward(x: Tensor, spec: NetworkSpec, params: ParameterStore, validate: bool = True) -> ForwardOutput:
    """Segmentation logits, edge logits and the three attention maps for ``x`` ``[N,1,H,W]``."""
    if x.data.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"expected input [N,{spec.in_channels},H,W], got {x.shape}")
    n, _, h, w = x.shape
    f = spec.downsample_factor
    if h % f or w % f:
        raise ValueError(f"input size {h}x{w} is not divisible by {f}")
    if validate:
        check_parameters(spec, params)

    z = _conv(x, params, "stem", padding=1)
    feats = []
    for level in range(1, spec.levels + 1):
        for b in range(2):
            z = blocks.residual_block(z, _enc_block(spec, level), params, f"enc{level}.block{b}")
        feats.append(z)
        if level < spec.levels:
            z = _conv(z, params, f"down{level}", stride=2, padding=1)

    s = _conv(feats[0], params, "shape.entry")
    alphas = []
    for i in range(1, N_GATES + 1):
        m = _conv(feats[i - 1], params, f"shape.tap{i}")
        o, alpha = blocks.attention_gate(s, m, params, f"shape.gate{i}")
        alphas.append(alpha)
        if i < N_GATES:
            s = blocks.residual_block(o, _conn_block(spec), params, f"shape.conn{i}")

    bottleneck = feats[-1]
    bh, bw = bottleneck.shape[2:]
    z = ad.concat_channels(bottleneck, ad.resize_bilinear(o, bh, bw))
    z = blocks.dspp(z, spec.dspp, params, "dspp")
    for level in range(spec.levels - 1, 0, -1):
        skip = feats[level - 1]
        z = ad.resize_bilinear(z, *skip.shape[2:])
        z = blocks.residual_block(ad.concat_channels(z, skip), _dec_block(spec, level), params, f"dec{level}")

    # pre-activation blocks leave the residual sum unnormalized; without this
    # the initial logits are large enough to saturate the sigmoid
    z = ad.relu(ad.instance_norm(z, params["head.norm.scale"], params["head.norm.shift"]))
    y_logits = _conv(z, params, "head.seg")
    s_logits = ad.resize_bilinear(_conv(o, params, "head.edge"), h, w)
    return ForwardOutput(y_logits, s_logits, alphas)


def predict(images: np.ndarray, spec: NetworkSpec, params: ParameterStore, batch_size: int = 8):
    """Sigmoid probabilities ``(y_prob, s_prob, alphas)`` without recording a tape.

    ``images`` is ``[N,1,H,W]``; alphas is a list of three ``[N,1,h,w]`` arrays.
    """
    images = np.asarray(images, dtype=np.float64)
    check_parameters(spec, params)
    ys, ss, als = [], [], [[] for _ in range(N_GATES)]
    for start in range(0, len(images), batch_size):
        out = forward(Tensor(images[start:start + batch_size]), spec, params, validate=False)
        ys.append(ad.sigmoid(out.y_logits).data)
        ss.append(ad.sigmoid(out.s_logits).data)
        for k, a in enumerate(out.alphas):
            als[k].append(a.data)
    return np.concatenate(ys), np.concatenate(ss), [np.concatenate(a) for a in als]
