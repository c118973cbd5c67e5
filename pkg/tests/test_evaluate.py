import itertools
import math

import numpy as np
import pytest

from oracles import mae_rmse_reference, topk_reference
from repcount.evaluate import fast_count, mae_rmse, pearson, topk_count_estimate
from repcount.geometry import box_iou
from repcount.reprpn import Proposal

GT = [[0, 0, 10, 10]]


def strip(iou):
    """A box whose IoU with GT is exactly ``iou`` (0 means disjoint)."""
    return [0, 0, 10, 10 * iou] if iou > 0 else [50, 50, 60, 60]


def test_strip_helper():
    for v in (0.1, 0.35, 0.4, 0.5, 0.8, 0.9):
        assert box_iou(strip(v), GT)[0, 0] == pytest.approx(v)


@pytest.mark.parametrize(
    "counts,ious,k,expected",
    [
        ([9, 12, 100], [0.5, 0.4, 0.1], 3, 10.5),
        ([4, 6], [0.1, 0.2], 2, 5.0),
        ([7], [0.9], 1, 7.0),
        ([30, 10, 2], [0.4, 0.35, 0.0], 3, 20.0),
    ],
)
def test_hand_traces(counts, ious, k, expected):
    assert topk_count_estimate([strip(v) for v in ious], counts, GT, k) == expected


def test_fast_count():
    p = Proposal(np.array(strip(0.8), float), 0.9, 14.0, 0)
    assert fast_count([p], GT) == 14.0
    props = [Proposal(np.array(strip(v), float), 0.5, c, i)
             for i, (c, v) in enumerate(zip([30, 10, 2], [0.4, 0.35, 0.0]))]
    assert fast_count(props, GT, k=3) == 20.0
    assert fast_count(props, GT, k=3) == topk_count_estimate([p.box for p in props], [30, 10, 2], GT, 3)


def test_k_truncates():
    assert topk_count_estimate([strip(0.1), strip(0.9)], [4, 100], GT, 1) == 4


def test_no_gt_falls_back():
    assert topk_count_estimate([strip(0.9), strip(0.9)], [4, 6], [], 2) == 5


def test_permutation_invariant(rng):
    boxes = [strip(v) for v in (0.5, 0.2, 0.7, 0.31)]
    counts = [3, 8, 11, 6]
    ref = topk_count_estimate(boxes, counts, GT, 4)
    for perm in itertools.permutations(range(4)):
        assert topk_count_estimate([boxes[i] for i in perm], [counts[i] for i in perm], GT, 4) == pytest.approx(ref)


def test_random_against_reference(rng):
    for _ in range(100):
        n = rng.integers(1, 8)
        ious = rng.choice([0.0, 0.1, 0.25, 0.3, 0.45, 0.9], n)
        counts = rng.integers(0, 50, n).astype(float)
        k = int(rng.integers(1, 8))
        got = topk_count_estimate([strip(v) for v in ious], counts, GT, k)
        assert got == pytest.approx(topk_reference(counts, ious, k))


def test_bad_inputs():
    with pytest.raises(ValueError):
        topk_count_estimate([strip(0.5)], [1], GT, 0)
    with pytest.raises(ValueError):
        topk_count_estimate(np.zeros((0, 4)), [], GT, 1)
    with pytest.raises(ValueError):
        mae_rmse([])


class TestMaeRmse:
    def test_single(self):
        assert mae_rmse([(10, 12)]) == (2.0, 2.0)

    def test_two(self):
        mae, rmse = mae_rmse([(0, 3), (0, 4)])
        assert mae == 3.5
        assert rmse == pytest.approx(math.sqrt(12.5))

    def test_perfect(self):
        assert mae_rmse([(3, 3), (7, 7)]) == (0.0, 0.0)

    def test_random_records(self, rng):
        for _ in range(100):
            pairs = [tuple(p) for p in rng.uniform(0, 100, (int(rng.integers(1, 30)), 2))]
            mae, rmse = mae_rmse(pairs)
            ref_mae, ref_rmse = mae_rmse_reference(pairs)
            assert mae == pytest.approx(ref_mae, rel=1e-12)
            assert rmse == pytest.approx(ref_rmse, rel=1e-12)
            assert rmse >= mae - 1e-12


def test_pearson():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 1, 1], [1, 2, 3]) == 0.0
