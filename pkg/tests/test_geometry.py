import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ioucal.data import Box, Detection
from ioucal.exceptions import ContractError
from ioucal.geometry import (iou, jaccard_summaries, jaccard_summary_array, pairwise_iou,
                             pairwise_jaccard_matrix)

from conftest import random_boxes
from oracles import grid_iou_batch, loop_summaries

coord = st.integers(0, 64)


@st.composite
def int_boxes(draw):
    x1, x2 = sorted((draw(coord), draw(coord)))
    y1, y2 = sorted((draw(coord), draw(coord)))
    return Box(x1, y1, x2, y2)


def test_iou_examples():
    assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0
    assert iou(Box(4, 5, 9, 7), Box(4, 5, 9, 7)) == 1.0


def test_zero_area_has_zero_iou_with_itself():
    b = Box(3, 3, 3, 8)
    assert iou(b, b) == 0.0
    assert pairwise_iou([[3, 3, 3, 8]])[0, 0] == 0.0


@settings(max_examples=300, deadline=None)
@given(int_boxes(), int_boxes())
def test_iou_matches_grid_oracle(a, b):
    expected = grid_iou_batch(np.array([[a.x1, a.y1, a.x2, a.y2]]), np.array([[b.x1, b.y1, b.x2, b.y2]]))[0]
    assert iou(a, b) == expected
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


def test_jaccard_matrix_examples():
    assert pairwise_jaccard_matrix([Box(0, 0, 1, 1)]).tolist() == [[0.0]]
    m = pairwise_jaccard_matrix([Box(0, 0, 1, 1), Box(2, 2, 3, 3)])
    assert m[0, 1] == m[1, 0] == 1.0
    m = pairwise_jaccard_matrix([Box(0, 0, 2, 2), Box(1, 1, 3, 3)])
    assert m[0, 1] == pytest.approx(6 / 7, abs=1e-15)


def _det(box, s, cat=1, i=0):
    return Detection(Box(*box), s, cat, 1, i)


def test_summary_examples():
    # 0.7 and 0.3 Jaccard distance from the two more confident boxes
    a = _det((0, 0, 10, 10), 0.9, i=0)
    b = _det((0, 0, 10, 3), 0.8, i=1)      # IoU 0.3 with c
    c = _det((0, 0, 10, 10), 0.7, i=2)     # IoU 1.0 with a
    top = jaccard_summaries([a, b, c])[0]
    assert top.j_min_suppressing == 1.0 and top.j_prod_suppressing == 1.0

    ref = _det((0, 0, 10, 10), 0.5, i=3)
    p = _det((0, 0, 10, 7), 0.9, i=0)      # IoU 0.7 -> distance 0.3
    q = _det((0, 0, 10, 3), 0.8, i=1)      # IoU 0.3 -> distance 0.7
    s = jaccard_summaries([p, q, ref])[2]
    assert s.j_min_suppressing == pytest.approx(0.3, abs=1e-12)
    assert s.j_prod_suppressing == pytest.approx(0.21, abs=1e-12)

    other = jaccard_summaries([_det((0, 0, 10, 7), 0.9, cat=2, i=0), _det((0, 0, 10, 3), 0.8, cat=2, i=1),
                               ref])[2]
    assert other.j_min_suppressing == 1.0
    agnostic = jaccard_summaries([_det((0, 0, 10, 7), 0.9, cat=2, i=0), ref], class_agnostic=True)[1]
    assert agnostic.j_min_suppressing == pytest.approx(0.3, abs=1e-12)


def test_summary_rejects_unsorted():
    with pytest.raises(ContractError):
        jaccard_summaries([_det((0, 0, 1, 1), 0.2, i=0), _det((0, 0, 1, 1), 0.9, i=1)])
    with pytest.raises(ContractError):
        jaccard_summary_array(np.zeros((2, 4)), [0.5, 0.5], [1, 1], [3, 1])


def test_summary_rejects_mixed_images():
    with pytest.raises(ContractError):
        jaccard_summaries([_det((0, 0, 1, 1), 0.9), Detection(Box(0, 0, 1, 1), 0.5, 1, 2, 1)])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 25), st.integers(1, 3), st.booleans(), st.integers(0, 2**32 - 1))
def test_vectorized_summaries_match_loop(n, n_cat, agnostic, seed):
    rng = np.random.default_rng(seed)
    boxes = random_boxes(rng, n)
    cats = rng.integers(1, n_cat + 1, size=n)
    fast = jaccard_summary_array(boxes, np.linspace(1, 0, n), cats, np.arange(n), agnostic)
    slow = loop_summaries(boxes, cats, agnostic)
    np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)
    assert np.all((fast >= 0) & (fast <= 1))
    assert np.all(fast[:, 1] <= fast[:, 0] + 1e-15)
    assert np.all(fast[:, 3] <= fast[:, 2] + 1e-15)
