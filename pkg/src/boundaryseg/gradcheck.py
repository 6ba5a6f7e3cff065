"""Finite-difference gradient checking for every primitive and composite block."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

# Entries whose analytic and numeric magnitudes both stay below this are held
# to an absolute error of ZERO_FLOOR * tol instead of a relative one: a true
# zero (a bias feeding a normalization, say) only shows finite-difference
# roundoff, which is ~1e-11 .. 1e-10.
ZERO_FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ZERO_FLOOR) -> float:
    """Max over elements of ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numerical_gradient(f: Callable[[], np.ndarray], arr: np.ndarray, h: float = 1e-5,
                       indices: Sequence[tuple] | None = None,
                       weights: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``arr`` (perturbed in place).

    ``f`` may return an array; it is contracted with ``weights`` *after*
    differencing, so output elements the perturbation does not touch cancel
    exactly. With ``indices`` only those entries are estimated.
    """
    grad = np.zeros_like(arr)
    it = indices if indices is not None else list(np.ndindex(arr.shape))
    for idx in it:
        old = arr[idx]
        arr[idx] = old + h
        fp = np.asarray(f(), dtype=np.float64)
        arr[idx] = old - h
        fm = np.asarray(f(), dtype=np.float64)
        arr[idx] = old
        diff = fp - fm
        grad[idx] = (np.sum(diff * weights) if weights is not None else float(np.sum(diff))) / (2.0 * h)
    return grad


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    seed: int = 0, max_entries: int | None = None) -> float:
    """Compare tape gradients of ``fn(*inputs)`` against central differences.

    Non-scalar outputs are contracted with a fixed random weighting so every
    output element contributes. Returns the worst relative error over all
    inputs that require gradients. ``max_entries`` subsamples entries of large
    inputs.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    weights = None if out.size == 1 else rng.standard_normal(out.shape)

    def value() -> np.ndarray:
        return fn(*inputs).data

    for t in inputs:
        t.grad = None
    with Tape() as tape:
        y = fn(*inputs)
    tape.backward(y, None if weights is None else weights)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if max_entries is not None and t.size > max_entries:
            flat = np.sort(rng.choice(t.size, size=max_entries, replace=False))
            idx = [np.unravel_index(i, t.shape) for i in flat]
            numeric = numerical_gradient(value, t.data, h, idx, weights)
            worst = max(worst, relative_error(analytic.ravel()[flat], numeric.ravel()[flat]))
        else:
            numeric = numerical_gradient(value, t.data, h, weights=weights)
            worst = max(worst, relative_error(analytic, numeric))
    return worst


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    trials: int

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_rel_error < tol


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _away_from_zero(rng, *shape, margin=0.05):
    """Random values kept at least ``margin`` away from 0 (relu kink)."""
    v = rng.standard_normal(shape)
    v = np.where(np.abs(v) < margin, np.sign(v + 1e-300) * margin, v)
    return Tensor(v, requires_grad=True)


def _block_case(rng, layout, apply, data_inputs):
    """Random values for every parameter in ``layout`` so scales/shifts are exercised too."""
    names = [name for name, _, _ in layout]
    params = [Tensor(rng.standard_normal(shape) * (0.5 if kind == "kernel" else 0.3)
                     + (1.0 if kind == "scale" else 0.0), requires_grad=True)
              for _, shape, kind in layout]
    n = len(data_inputs)

    def fn(*ts):
        return apply(*ts[:n], dict(zip(names, ts[n:])))
    return fn, [*data_inputs, *params]


def _op_cases():
    """(name, builder) pairs; a builder takes an rng and returns (fn, inputs)."""
    from . import blocks, losses
    from .network import ForwardOutput

    def conv(rng):
        return (lambda x, k, b: ad.conv2d(x, k, b, stride=1, dilation=1, padding=1),
                [_param(rng, 1, 2, 5, 5), _param(rng, 3, 2, 3, 3), _param(rng, 3)])

    def conv_strided(rng):
        return (lambda x, k, b: ad.conv2d(x, k, b, stride=2, dilation=1, padding=1),
                [_param(rng, 2, 2, 6, 6), _param(rng, 2, 2, 3, 3), _param(rng, 2)])

    def conv_dilated(rng):
        return (lambda x, k, b: ad.conv2d(x, k, b, stride=1, dilation=2, padding=2),
                [_param(rng, 1, 2, 6, 5), _param(rng, 2, 2, 3, 3), _param(rng, 2)])

    def conv_pointwise(rng):
        return (lambda x, k, b: ad.conv2d(x, k, b), [_param(rng, 2, 3, 4, 4), _param(rng, 2, 3, 1, 1), _param(rng, 2)])

    def relu(rng):
        return ad.relu, [_away_from_zero(rng, 2, 2, 3, 3)]

    def sigmoid(rng):
        return ad.sigmoid, [_param(rng, 2, 2, 3, 3, scale=3.0)]

    def add(rng):
        return ad.add, [_param(rng, 1, 2, 3, 3), _param(rng, 1, 2, 3, 3)]

    def mul(rng):
        return ad.eltwise_mul, [_param(rng, 1, 2, 3, 3), _param(rng, 1, 2, 3, 3)]

    def expand(rng):
        return (lambda a: ad.expand_channels(a, 3)), [_param(rng, 2, 1, 3, 3)]

    def concat(rng):
        return ad.concat_channels, [_param(rng, 1, 2, 3, 3), _param(rng, 1, 3, 3, 3)]

    def resize_up(rng):
        return (lambda a: ad.resize_bilinear(a, 7, 6)), [_param(rng, 1, 2, 3, 4)]

    def resize_down(rng):
        return (lambda a: ad.resize_bilinear(a, 2, 3)), [_param(rng, 1, 2, 5, 6)]

    def gap(rng):
        return ad.global_avg_pool, [_param(rng, 2, 3, 4, 5)]

    def sum_(rng):
        return ad.sum_all, [_param(rng, 2, 3, 4)]

    def mean_(rng):
        return ad.mean_all, [_param(rng, 2, 3, 4)]

    def inorm(rng):
        return (ad.instance_norm,
                [_param(rng, 2, 3, 4, 4), Tensor(1.0 + 0.3 * rng.standard_normal(3), requires_grad=True),
                 _param(rng, 3)])

    def dice(rng):
        p = Tensor(rng.uniform(0.05, 0.95, (1, 1, 4, 4)), requires_grad=True)
        t = Tensor((rng.random((1, 1, 4, 4)) < 0.5).astype(float))
        return (lambda a: losses.dice_loss(a, t)), [p]

    def edge(rng):
        p = Tensor(rng.uniform(0.05, 0.95, (1, 1, 5, 5)), requires_grad=True)
        target = losses.extract_edge_target((rng.random((1, 1, 5, 5)) < 0.6).astype(float))
        return (lambda a: losses.edge_loss(a, target)), [p]

    def total(rng):
        y = _param(rng, 1, 1, 6, 6)
        s = _param(rng, 1, 1, 6, 6)
        mask = (rng.random((1, 1, 6, 6)) < 0.5).astype(float)
        w = losses.LossWeights()
        return (lambda a, b: losses.total_loss(ForwardOutput(a, b, []), mask, w).total), [y, s]

    def resblock(rng):
        spec = blocks.ResidualBlockSpec(2, 3, stride=2)
        return _block_case(rng, blocks.residual_layout("", spec),
                           lambda x, p: blocks.residual_block(x, spec, p), [_param(rng, 1, 2, 6, 6)])

    def resblock_identity(rng):
        spec = blocks.ResidualBlockSpec(3, 3)
        return _block_case(rng, blocks.residual_layout("", spec),
                           lambda x, p: blocks.residual_block(x, spec, p), [_param(rng, 2, 3, 4, 4)])

    def gate(rng):
        spec = blocks.AttentionGateSpec(2, 3)
        return _block_case(rng, blocks.gate_layout("", spec),
                           lambda s, m, p: blocks.attention_gate(s, m, p)[0],
                           [_param(rng, 1, 2, 4, 4), _param(rng, 1, 3, 4, 4)])

    def dspp(rng):
        spec = blocks.DsppSpec((1, 2), 2)
        return _block_case(rng, blocks.dspp_layout("", spec, 2),
                           lambda x, p: blocks.dspp(x, spec, p), [_param(rng, 1, 2, 5, 5)])

    return [
        ("conv2d", conv), ("conv2d_stride2", conv_strided), ("conv2d_dilated", conv_dilated),
        ("conv2d_1x1", conv_pointwise), ("relu", relu), ("sigmoid", sigmoid), ("add", add),
        ("eltwise_mul", mul), ("expand_channels", expand), ("concat_channels", concat),
        ("resize_bilinear_up", resize_up), ("resize_bilinear_down", resize_down),
        ("global_avg_pool", gap), ("sum", sum_), ("mean", mean_), ("instance_norm", inorm),
        ("dice_loss", dice), ("edge_loss", edge), ("total_loss", total),
        ("residual_block", resblock), ("residual_block_identity_skip", resblock_identity),
        ("attention_gate", gate), ("dspp", dspp),
    ]


def run_suite(trials: int = 5, seed: int = 0, h: float = 1e-5) -> list[GradcheckResult]:
    """Finite-difference check of every op and block on ``trials`` random inputs each."""
    results = []
    for k, (name, build) in enumerate(_op_cases()):
        worst = 0.0
        for trial in range(trials):
            rng = np.random.default_rng([seed, k, trial])
            fn, inputs = build(rng)
            worst = max(worst, check_gradients(fn, inputs, h=h, seed=trial))
        results.append(GradcheckResult(name, worst, trials))
    return results
