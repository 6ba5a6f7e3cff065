"""Composite layers: pre-activation residual block, attention gate, dilated
spatial pyramid pooling, and the parameter layouts/initialization they need.

Blocks read their weights from any mapping ``name -> Tensor`` (usually a
:class:`~boundaryseg.autodiff.ParameterStore`) under a dotted ``prefix``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

# (name, shape, kind) where kind is one of "kernel", "bias", "scale", "shift"
ParamLayout = list


@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.stride not in (1, 2):
            raise ValueError("residual block stride must be 1 or 2")

    @property
    def projected(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass(frozen=True)
class AttentionGateSpec:
    channels: int
    gate_channels: int


@dataclass(frozen=True)
class DsppSpec:
    dilation_rates: tuple = (1, 2, 4)
    out_channels: int = 128

    def __post_init__(self):
        rates = tuple(int(r) for r in self.dilation_rates)
        object.__setattr__(self, "dilation_rates", rates)
        if not rates or rates[0] != 1 or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"dilation rates must start at 1 and strictly increase, got {rates}")
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")


def _j(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def conv_layout(prefix: str, cin: int, cout: int, k: int) -> ParamLayout:
    return [(_j(prefix, "w"), (cout, cin, k, k), "kernel"), (_j(prefix, "b"), (cout,), "bias")]


def norm_layout(prefix: str, c: int) -> ParamLayout:
    return [(_j(prefix, "scale"), (c,), "scale"), (_j(prefix, "shift"), (c,), "shift")]


def residual_layout(prefix: str, spec: ResidualBlockSpec) -> ParamLayout:
    layout = (norm_layout(_j(prefix, "norm1"), spec.in_channels)
              + conv_layout(_j(prefix, "conv1"), spec.in_channels, spec.out_channels, 3)
              + norm_layout(_j(prefix, "norm2"), spec.out_channels)
              + conv_layout(_j(prefix, "conv2"), spec.out_channels, spec.out_channels, 3))
    if spec.projected:
        layout += conv_layout(_j(prefix, "proj"), spec.in_channels, spec.out_channels, 1)
    return layout


def gate_layout(prefix: str, spec: AttentionGateSpec) -> ParamLayout:
    return conv_layout(prefix, spec.channels + spec.gate_channels, 1, 1)


def dspp_layout(prefix: str, spec: DsppSpec, in_channels: int) -> ParamLayout:
    layout: ParamLayout = []
    for r in spec.dilation_rates:
        layout += conv_layout(_j(prefix, f"rate{r}"), in_channels, spec.out_channels, 3)
    layout += conv_layout(_j(prefix, "pool"), in_channels, spec.out_channels, 1)
    n_branches = len(spec.dilation_rates) + 1
    layout += conv_layout(_j(prefix, "fuse"), n_branches * spec.out_channels, spec.out_channels, 1)
    return layout


def init_value(shape: tuple, kind: str, rng: np.random.Generator) -> np.ndarray:
    """He (fan-in) normal for kernels, zeros for biases/shifts, ones for scales."""
    if kind == "kernel":
        fan_in = int(np.prod(shape[1:]))
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    if kind == "scale":
        return np.ones(shape)
    return np.zeros(shape)


def build_store(layout: ParamLayout, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    for name, shape, kind in layout:
        store.add(name, init_value(shape, kind, rng))
    return store


# ---------------------------------------------------------------------------
# forward passes


def _conv(x: Tensor, params: Mapping[str, Tensor], prefix: str, **kw) -> Tensor:
    return ad.conv2d(x, params[_j(prefix, "w")], params[_j(prefix, "b")], **kw)


def _norm_relu(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return ad.relu(ad.instance_norm(x, params[_j(prefix, "scale")], params[_j(prefix, "shift")]))


def residual_block(x: Tensor, spec: ResidualBlockSpec, params: Mapping[str, Tensor], prefix: str = "") -> Tensor:
    """norm -> relu -> conv3x3 -> norm -> relu -> conv3x3, plus the skip path.

    The skip is the identity when shapes allow it, otherwise a strided 1x1
    projection.
    """
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"residual block expects {spec.in_channels} channels, got {x.shape[1]}")
    h = _norm_relu(x, params, _j(prefix, "norm1"))
    h = _conv(h, params, _j(prefix, "conv1"), stride=spec.stride, padding=1)
    h = _norm_relu(h, params, _j(prefix, "norm2"))
    h = _conv(h, params, _j(prefix, "conv2"), padding=1)
    skip = _conv(x, params, _j(prefix, "proj"), stride=spec.stride) if spec.projected else x
    return ad.add(h, skip)


def attention_gate(s: Tensor, m: Tensor, params: Mapping[str, Tensor], prefix: str = ""):
    """Gate shape-stream features ``s`` with a map computed from ``[s, m]``.

    Returns ``(o, alpha)`` where ``alpha = sigmoid(conv1x1(concat(s, m)))`` is a
    single-channel map and ``o = s * alpha`` (alpha repeated over channels).
    """
    if s.shape[2:] != m.shape[2:] or s.shape[0] != m.shape[0]:
        raise ValueError(f"attention gate inputs differ in batch/spatial size: {s.shape} vs {m.shape}")
    alpha = ad.sigmoid(_conv(ad.concat_channels(s, m), params, prefix))
    o = ad.eltwise_mul(s, ad.expand_channels(alpha, s.shape[1]))
    return o, alpha


def dspp(x: Tensor, spec: DsppSpec, params: Mapping[str, Tensor], prefix: str = "") -> Tensor:
    """Dilated 3x3 branches plus an image-pooling branch, fused by a 1x1 conv."""
    h, w = x.shape[2:]
    branches = [_conv(x, params, _j(prefix, f"rate{r}"), dilation=r, padding=r) for r in spec.dilation_rates]
    pooled = _conv(ad.global_avg_pool(x), params, _j(prefix, "pool"))
    branches.append(ad.resize_bilinear(pooled, h, w))
    cat = branches[0]
    for b in branches[1:]:
        cat = ad.concat_channels(cat, b)
    return _conv(cat, params, _j(prefix, "fuse"))
