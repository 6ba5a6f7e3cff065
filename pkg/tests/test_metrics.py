import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from boundaryseg.metrics import UndefinedMetricError, dice_score, evaluate, hausdorff, jaccard

import oracles


def random_pairs(n=50, size=16, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        density = rng.uniform(0.05, 0.6, 2)
        a = rng.random((size, size)) < density[0]
        b = rng.random((size, size)) < density[1]
        a[rng.integers(size), rng.integers(size)] = True
        b[rng.integers(size), rng.integers(size)] = True
        pairs.append((a, b))
    return pairs


masks = arrays(bool, (6, 6))


class TestDice:
    def test_identical(self):
        m = np.eye(4, dtype=bool)
        assert dice_score(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = a.copy()
        a[0, 0] = b[3, 3] = True
        assert dice_score(a, b) == 0.0

    def test_counting_example(self):
        a = np.zeros((3, 3), bool)
        a[0, :2] = a[1, :2] = True
        b = np.zeros((3, 3), bool)
        b[0, :2] = True
        assert dice_score(a, b) == pytest.approx(2 / 3, abs=1e-15)
        assert jaccard(a, b) == 0.5

    def test_both_empty(self):
        z = np.zeros((3, 3))
        assert dice_score(z, z) == 1.0 and jaccard(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_score(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            jaccard(np.zeros((2, 2)), np.zeros((3, 2)))


class TestHausdorff:
    def test_identical(self):
        m = np.zeros((5, 5))
        m[1:3, 2:4] = 1
        assert hausdorff(m, m) == 0.0

    def test_pythagorean_pair(self):
        a = np.zeros((5, 5))
        b = np.zeros((5, 5))
        a[0, 0] = b[3, 4] = 1
        assert hausdorff(a, b) == 5.0

    def test_empty_conventions(self):
        z = np.zeros((4, 4))
        one = z.copy()
        one[1, 1] = 1
        assert hausdorff(z, z) == 0.0
        with pytest.raises(UndefinedMetricError):
            hausdorff(z, one)
        with pytest.raises(UndefinedMetricError):
            hausdorff(one, z)

    def test_hd95_not_above_max(self):
        for a, b in random_pairs(10, seed=3):
            assert hausdorff(a, b, hd95=True) <= hausdorff(a, b)

    def test_hd95_ignores_single_outlier(self):
        a = np.zeros((40, 40), bool)
        a[5:25, 5:25] = True
        b = a.copy()
        b[39, 39] = True
        assert hausdorff(a, b) == pytest.approx(np.hypot(15, 15))
        assert hausdorff(a, b, hd95=True) == 0.0

    def test_translation_invariant(self):
        a = np.zeros((12, 12), bool)
        b = a.copy()
        a[2:5, 3:6] = True
        b[4:6, 2:7] = True
        shifted = hausdorff(np.roll(a, (3, 2), (0, 1)), np.roll(b, (3, 2), (0, 1)))
        assert shifted == hausdorff(a, b)


def test_agreement_with_brute_force():
    """Exact equality on 50 random 16x16 pairs."""
    for a, b in random_pairs(50):
        assert dice_score(a, b) == oracles.dice_score(a, b)
        assert jaccard(a, b) == oracles.jaccard(a, b)
        assert hausdorff(a, b) == oracles.hausdorff(a, b)


@settings(max_examples=100, deadline=None)
@given(masks, masks)
def test_symmetry_and_identity(a, b):
    d, j = dice_score(a, b), jaccard(a, b)
    assert d == dice_score(b, a) and j == jaccard(b, a)
    assert j <= d
    assert abs(d - 2 * j / (1 + j)) < 1e-12
    if a.any() == b.any():
        assert hausdorff(a, b) == hausdorff(b, a)
        assert hausdorff(a, a) == 0.0


class TestEvaluate:
    def test_perfect_table(self):
        m = np.zeros((3, 1, 8, 8))
        m[:, :, 2:5, 3:6] = 1
        summary = evaluate(m > 0.5, m > 0.5)
        assert summary.table().splitlines() == ["Dice\t1.000±0.000", "Jaccard\t1.000±0.000",
                                                "Hausdorff\t0.000±0.000"]

    def test_undefined_hausdorff_counted(self):
        t = np.zeros((2, 4, 4), bool)
        t[:, 1, 1] = True
        p = t.copy()
        p[1] = False
        summary = evaluate(p, t)
        assert summary.hausdorff == [0.0, None]
        assert summary.n_undefined_hausdorff == 1
        assert summary.means()["dice"] == 0.5
        assert "undefined for 1" in summary.table()
