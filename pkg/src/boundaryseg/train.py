"""Adam with polynomial learning-rate decay, mini-batch training and binary checkpoints.

Checkpoint layout (little-endian)::

    b"BCKP" | u32 version=1 | u32 epoch | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims... | float64 payload

Adam moments are stored as ``<param>.m`` / ``<param>.v``; the Adam step
counter is a rank-0 tensor named ``__adam_step__``.
"""
from __future__ import annotations

import logging
import os
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import losses, metrics, network
from .autodiff import NonFiniteError, ParameterStore, Tape, Tensor
from .data import FormatError, Sample, stack
from .losses import LossWeights
from .network import NetworkSpec

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"BCKP"
CKPT_VERSION = 1
STEP_TENSOR = "__adam_step__"
LR_POWER = 0.9


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    alpha0: float = 1e-3
    epochs: int = 300
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0  # parameter init
    shuffle_seed: int = 1  # batch order, independent of init
    eval_every: int = 0  # 0: evaluate only after the last epoch
    checkpoint_path: Optional[str] = None
    per_image_beta: bool = False
    objective: str = "total"  # "total" or "dice" (plain main-stream Dice)
    hd95: bool = False

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        if self.objective not in ("total", "dice"):
            raise ValueError(f"unknown objective '{self.objective}'")


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """``alpha0 * (1 - epoch / epochs) ** 0.9`` for ``0 <= epoch <= epochs``."""
    if not 0 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    return config.alpha0 * (1.0 - epoch / config.epochs) ** LR_POWER


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParameterStore) -> "AdamState":
        return cls({n: np.zeros(t.shape) for n, t in params.items()},
                   {n: np.zeros(t.shape) for n, t in params.items()})

    def equals(self, other: "AdamState") -> bool:
        return (self.step == other.step and list(self.m) == list(other.m)
                and all(np.array_equal(self.m[k], other.m[k]) and np.array_equal(self.v[k], other.v[k])
                        for k in self.m))


def adam_step(params: ParameterStore, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every parameter, in place.

    Gradients are checked first; a non-finite one aborts the step before
    anything is modified.
    """
    for name, t in params.items():
        if t.grad is None or not np.isfinite(t.grad).all():
            raise NonFiniteError(f"non-finite or missing gradient for parameter '{name}'")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoints


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())


def encode_checkpoint(params: ParameterStore, state: AdamState, epoch: int) -> bytes:
    tensors = [(n, t.data) for n, t in params.items()]
    tensors += [(f"{n}.m", state.m[n]) for n in params]
    tensors += [(f"{n}.v", state.v[n]) for n in params]
    tensors.append((STEP_TENSOR, np.array(float(state.step))))
    body = b"".join(_pack_tensor(n, a) for n, a in tensors)
    return struct.pack("<4sIII", CKPT_MAGIC, CKPT_VERSION, epoch, len(tensors)) + body


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def decode_checkpoint(buf: bytes):
    """``(epoch, [(name, array), ...])`` in file order."""
    r = _Reader(buf)
    magic, version, epoch, count = struct.unpack("<4sIII", r.take(16, "header"))
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = []
    for k in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, f"name length of tensor #{k}"))
        name = r.take(nlen, f"name of tensor #{k}").decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1, f"rank of tensor '{name}'"))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of tensor '{name}'"))
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(8 * n, f"payload of tensor '{name}'")
        tensors.append((name, np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after {count} tensors")
    return epoch, tensors


def save_checkpoint(path, params: ParameterStore, state: AdamState, epoch: int) -> None:
    """Write atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(params, state, epoch))
    os.replace(tmp, path)


def load_checkpoint(path, spec: Optional[NetworkSpec] = None):
    """``(params, adam_state, epoch)``; validated against ``spec`` when given."""
    epoch, tensors = decode_checkpoint(Path(path).read_bytes())
    by_name = dict(tensors)
    if len(by_name) != len(tensors):
        raise FormatError("duplicate tensor names in checkpoint")
    step = by_name.pop(STEP_TENSOR, None)
    if step is None:
        raise FormatError(f"checkpoint lacks '{STEP_TENSOR}'")
    moment_names = {n for n in by_name if n[-2:] in (".m", ".v") and n[:-2] in by_name}
    params = ParameterStore()
    for name, arr in tensors:
        if name != STEP_TENSOR and name not in moment_names:
            params.add(name, arr)
    m, v = {}, {}
    for name in params:
        for suffix, dest in ((".m", m), (".v", v)):
            arr = by_name.get(name + suffix)
            if arr is None:
                raise FormatError(f"checkpoint lacks moment tensor '{name}{suffix}'")
            if arr.shape != params[name].shape:
                raise FormatError(f"moment '{name}{suffix}' shape {arr.shape} != parameter {params[name].shape}")
            dest[name] = arr.copy()
    if spec is not None:
        network.check_parameters(spec, params)
    return params, AdamState(m, v, step=int(step)), epoch


# ---------------------------------------------------------------------------
# training loop


@dataclass
class LogRow:
    epoch: int
    lr: float
    total: float
    dice_main: float
    dice_edge: float
    edge: float
    dice: Optional[float] = None
    jaccard: Optional[float] = None
    hausdorff: Optional[float] = None
    seconds: float = 0.0


@dataclass
class TrainResult:
    params: ParameterStore
    state: AdamState
    log: list
    epochs_done: int


def evaluate_model(samples: Sequence[Sample], spec: NetworkSpec, params: ParameterStore,
                   hd95: bool = False) -> metrics.MetricSummary:
    images, masks = stack(samples)
    y_prob, _, _ = network.predict(images, spec, params)
    return metrics.evaluate(metrics.binarize(y_prob), masks > 0.5, hd95=hd95)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_step(images: np.ndarray, masks: np.ndarray, spec: NetworkSpec, params: ParameterStore,
               state: AdamState, lr: float, config: TrainConfig) -> dict:
    """One forward/backward/Adam update; returns the loss components."""
    params.zero_grad()
    with Tape() as tape:
        out = network.forward(Tensor(images), spec, params, validate=False)
        terms = losses.total_loss(out, masks, config.weights, per_image_beta=config.per_image_beta)
        objective = terms.total if config.objective == "total" else terms.dice_main
    tape.backward(objective)
    adam_step(params, state, lr)
    return terms.as_floats()


def train(dataset: Sequence[Sample], config: TrainConfig, spec: NetworkSpec,
          eval_set: Optional[Sequence[Sample]] = None, params: Optional[ParameterStore] = None,
          state: Optional[AdamState] = None, start_epoch: int = 0, stop_epoch: Optional[int] = None,
          on_epoch: Optional[Callable[[LogRow], None]] = None) -> TrainResult:
    """Train for epochs ``start_epoch .. stop_epoch-1`` (default: to ``config.epochs``).

    Batch order in epoch ``e`` depends only on ``(shuffle_seed, e)``, so a run
    resumed from a checkpoint replays exactly what an uninterrupted run does.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    stop = config.epochs if stop_epoch is None else stop_epoch
    if not 0 <= start_epoch <= stop <= config.epochs:
        raise ValueError(f"invalid epoch range [{start_epoch}, {stop})")
    if params is None:
        params = network.init_parameters(spec, config.seed)
    network.check_parameters(spec, params)
    if state is None:
        state = AdamState.zeros_like(params)
    images, masks = stack(dataset)
    log = []
    for epoch in range(start_epoch, stop):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config)
        sums = {"total": 0.0, "dice_main": 0.0, "dice_edge": 0.0, "edge": 0.0}
        batches = _batches(len(dataset), config.batch_size, np.random.default_rng([config.shuffle_seed, epoch]))
        try:
            for idx in batches:
                comps = train_step(images[idx], masks[idx], spec, params, state, lr, config)
                for k in sums:
                    sums[k] += comps[k]
        except NonFiniteError as exc:
            raise TrainingAborted(f"epoch {epoch}: {exc}; last good checkpoint kept") from exc
        row = LogRow(epoch, lr, *(sums[k] / len(batches) for k in ("total", "dice_main", "dice_edge", "edge")))
        last = epoch == config.epochs - 1
        if eval_set and ((config.eval_every and (epoch + 1) % config.eval_every == 0) or last):
            means = evaluate_model(eval_set, spec, params, config.hd95).means()
            row.dice, row.jaccard, row.hausdorff = means["dice"], means["jaccard"], means["hausdorff"]
        row.seconds = time.perf_counter() - t0
        log.append(row)
        logger.info("epoch %d lr %.3e loss %.5f dice_main %.5f", epoch, lr, row.total, row.dice_main)
        if config.checkpoint_path and config.eval_every and (epoch + 1) % config.eval_every == 0:
            save_checkpoint(config.checkpoint_path, params, state, epoch + 1)
        if on_epoch is not None:
            on_epoch(row)
    if config.checkpoint_path and log:
        save_checkpoint(config.checkpoint_path, params, state, stop)
    return TrainResult(params, state, log, stop)


def ablation_config(config: TrainConfig) -> TrainConfig:
    """Same run without edge supervision (``lambda2 = lambda3 = 0``)."""
    return replace(config, weights=replace(config.weights, lambda2=0.0, lambda3=0.0))
