"""Training objective: soft Dice on both heads plus class-balanced edge BCE."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_CLAMP = 1e-7

ArrayLike = Union[np.ndarray, Tensor]


def _array(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError("epsilon must be positive")

    @property
    def is_no_edge_ablation(self) -> bool:
        return self.lambda2 == 0 and self.lambda3 == 0


@dataclass
class EdgeTarget:
    """Binary boundary map and the non-edge fraction used to weight edge pixels.

    ``beta`` is a float (per batch) or an ``[N,1,1,1]`` array (per image).
    """

    s_true: np.ndarray
    beta: Union[float, np.ndarray]


def dice_loss(y_pred: Tensor, y_true: ArrayLike, epsilon: float = 1e-5) -> Tensor:
    """``1 - 2*sum(t*p) / (sum(t^2) + sum(p^2) + eps)``, summed over every element."""
    t = _array(y_true)
    p = y_pred.data
    if t.shape != p.shape:
        raise ValueError(f"dice_loss: shape mismatch {p.shape} vs {t.shape}")
    inter = float(np.sum(t * p))
    denom = float(np.sum(t * t)) + float(np.sum(p * p)) + epsilon
    value = 1.0 - 2.0 * inter / denom

    def backward(g):
        grad = -2.0 * (t * denom - inter * 2.0 * p) / (denom * denom)
        return (float(g) * grad,)

    return ad.record("dice_loss", np.array(value), (y_pred,), backward)


def extract_edge_target(y_true: ArrayLike, per_image: bool = False) -> EdgeTarget:
    """Inner 4-neighbour boundary of a binary ``[N,1,H,W]`` mask.

    A pixel is an edge when it is foreground and at least one of its four
    neighbours is background; pixels outside the image count as background.
    """
    y = _array(y_true)
    if y.ndim != 4:
        raise ValueError(f"expected a [N,1,H,W] mask, got shape {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("edge extraction needs a binary mask (values 0/1)")
    fg = y > 0.5
    padded = np.pad(fg, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=False)
    interior = (padded[:, :, :-2, 1:-1] & padded[:, :, 2:, 1:-1]
                & padded[:, :, 1:-1, :-2] & padded[:, :, 1:-1, 2:])
    s_true = (fg & ~interior).astype(np.float64)
    if per_image:
        beta = (s_true == 0).mean(axis=(1, 2, 3), keepdims=True)
    else:
        beta = float((s_true == 0).mean())
    return EdgeTarget(s_true, beta)


def edge_loss(s_pred: Tensor, target: EdgeTarget) -> Tensor:
    """``-beta * sum_edge log p - (1 - beta) * sum_nonedge log(1 - p)``.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before the log; the
    clamp passes no gradient.
    """
    e = target.s_true
    p = s_pred.data
    if e.shape != p.shape:
        raise ValueError(f"edge_loss: shape mismatch {p.shape} vs {e.shape}")
    beta = target.beta
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    w_edge = beta * e
    w_bg = (1.0 - beta) * (1.0 - e)
    value = -float(np.sum(w_edge * np.log(pc))) - float(np.sum(w_bg * np.log1p(-pc)))

    def backward(g):
        inside = (p >= PROB_CLAMP) & (p <= 1.0 - PROB_CLAMP)
        grad = (-w_edge / pc + w_bg / (1.0 - pc)) * inside
        return (float(g) * grad,)

    return ad.record("edge_loss", np.array(value), (s_pred,), backward)


@dataclass
class LossTerms:
    total: Tensor
    dice_main: Tensor
    dice_edge: Tensor
    edge: Tensor

    def as_floats(self) -> dict:
        return {"total": self.total.item(), "dice_main": self.dice_main.item(),
                "dice_edge": self.dice_edge.item(), "edge": self.edge.item()}


def total_loss(out, y_true: ArrayLike, weights: LossWeights = LossWeights(),
               per_image_beta: bool = False) -> LossTerms:
    """Weighted sum of main Dice, edge-head Dice and edge BCE.

    ``out`` is anything with ``y_logits`` and ``s_logits`` tensors (a
    :class:`~boundaryseg.network.ForwardOutput`). Terms whose weight is zero
    are still evaluated for logging but never enter the total, so with
    ``lambda2 = lambda3 = 0`` the total is exactly ``lambda1 * dice_main``.
    """
    y = _array(y_true)
    if out.y_logits.shape != y.shape or out.s_logits.shape != y.shape:
        raise ValueError(f"total_loss: logits {out.y_logits.shape}/{out.s_logits.shape} vs labels {y.shape}")
    target = extract_edge_target(y, per_image=per_image_beta)
    y_pred = ad.sigmoid(out.y_logits)
    s_pred = ad.sigmoid(out.s_logits)
    d_main = dice_loss(y_pred, y, weights.epsilon)
    d_edge = dice_loss(s_pred, target.s_true, weights.epsilon)
    e_bce = edge_loss(s_pred, target)

    total = None
    for lam, term in ((weights.lambda1, d_main), (weights.lambda2, d_edge), (weights.lambda3, e_bce)):
        if lam == 0:
            continue
        scaled = term if lam == 1.0 else ad.scale(term, lam)
        total = scaled if total is None else ad.add(total, scaled)
    if total is None:
        total = Tensor(0.0)
    return LossTerms(total, d_main, d_edge, e_bce)
