"""Hard-mask evaluation metrics: Dice score, Jaccard index, Hausdorff distance.

Masks are 2D arrays; anything ``> 0.5`` counts as foreground. Distances are in
pixel units with unit spacing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class UndefinedMetricError(ValueError):
    """Hausdorff distance between an empty and a non-empty mask."""


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) > threshold


def _pair(a, b):
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice_score(a, b) -> float:
    """``2|A & B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def jaccard(a, b) -> float:
    """``|A & B| / |A | B|``; 1.0 when both masks are empty."""
    a, b = _pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every foreground pixel of ``a`` to the nearest one of ``b``."""
    dist_to_b = ndimage.distance_transform_edt(~b)
    return dist_to_b[a]


def hausdorff(a, b, hd95: bool = False) -> float:
    """Symmetric Hausdorff distance between the foreground pixel sets.

    With ``hd95`` each directed distance is the 95th percentile instead of the
    maximum. Both empty gives 0; exactly one empty raises
    :class:`UndefinedMetricError`.
    """
    a, b = _pair(a, b)
    na, nb = bool(a.any()), bool(b.any())
    if not na and not nb:
        return 0.0
    if na != nb:
        raise UndefinedMetricError("Hausdorff distance is undefined when exactly one mask is empty")
    d_ab = _directed(a, b)
    d_ba = _directed(b, a)
    if hd95:
        return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))
    return float(max(d_ab.max(), d_ba.max()))


@dataclass
class MetricSummary:
    """Per-sample metric lists and their mean/std aggregates."""

    dice: list
    jaccard: list
    hausdorff: list  # None where undefined

    def _stats(self, values):
        vals = np.array([v for v in values if v is not None], dtype=np.float64)
        if vals.size == 0:
            return float("nan"), float("nan")
        return float(vals.mean()), float(vals.std())

    @property
    def n_undefined_hausdorff(self) -> int:
        return sum(v is None for v in self.hausdorff)

    def means(self) -> dict:
        return {"dice": self._stats(self.dice)[0], "jaccard": self._stats(self.jaccard)[0],
                "hausdorff": self._stats(self.hausdorff)[0]}

    def table(self) -> str:
        """Rows formatted as ``mean±std`` with three decimals."""
        lines = []
        for name, values in (("Dice", self.dice), ("Jaccard", self.jaccard), ("Hausdorff", self.hausdorff)):
            m, s = self._stats(values)
            lines.append(f"{name}\t{m:.3f}±{s:.3f}")
        if self.n_undefined_hausdorff:
            lines.append(f"Hausdorff undefined for {self.n_undefined_hausdorff} sample(s)")
        return "\n".join(lines)


def evaluate(pred_masks, true_masks, hd95: bool = False) -> MetricSummary:
    """Metrics for paired stacks of 2D masks (extra singleton axes are squeezed)."""
    pred_masks = np.asarray(pred_masks)
    true_masks = np.asarray(true_masks)
    if pred_masks.shape != true_masks.shape:
        raise ValueError(f"prediction stack {pred_masks.shape} vs label stack {true_masks.shape}")
    dices, jacs, hds = [], [], []
    for p, t in zip(pred_masks, true_masks):
        p = np.squeeze(p)
        t = np.squeeze(t)
        dices.append(dice_score(p, t))
        jacs.append(jaccard(p, t))
        try:
            hds.append(hausdorff(p, t, hd95=hd95))
        except UndefinedMetricError:
            hds.append(None)
    return MetricSummary(dices, jacs, hds)
