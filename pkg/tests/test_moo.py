import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmnas import moo
from oracles import brute_force_eval_order, brute_force_fronts

# three multimodal rows reported for the high-end device: (accuracy %, latency ms, energy mJ)
AGX_ROWS = [(94.22, 6.95, 37.17), (95.33, 7.26, 38.24), (95.11, 7.19, 38.14)]


def dominates(a, b, maximize=moo.DIRECTIONS):
    better_or_equal = all((x >= y) if mx else (x <= y) for x, y, mx in zip(a, b, maximize))
    strictly = any((x > y) if mx else (x < y) for x, y, mx in zip(a, b, maximize))
    return better_or_equal and strictly


def oracle_fronts(values, maximize=moo.DIRECTIONS):
    remaining = list(range(len(values)))
    fronts = []
    while remaining:
        front = [i for i in remaining if not any(dominates(values[j], values[i], maximize) for j in remaining)]
        fronts.append(sorted(front))
        remaining = [i for i in remaining if i not in front]
    return fronts


def test_two_point_example():
    assert moo.non_dominated_sort([(0.9, 5.0, 1.0), (0.8, 6.0, 1.0)]) == [[0], [1]]


def test_agx_rows_form_single_front():
    assert moo.non_dominated_sort(AGX_ROWS) == [[0, 1, 2]]


def test_duplicates_share_front():
    assert moo.non_dominated_sort([(1.0, 1.0, 1.0)] * 3) == [[0, 1, 2]]


def test_empty_and_errors():
    assert moo.non_dominated_sort(np.zeros((0, 3))) == []
    with pytest.raises(ValueError):
        moo.non_dominated_sort([(np.nan, 1.0, 1.0)])
    with pytest.raises(ValueError):
        moo.non_dominated_sort([(1.0, 1.0)])
    with pytest.raises(ValueError):
        moo.crowding_distance(np.zeros((0, 3)))


points = st.lists(st.tuples(*[st.integers(0, 6).map(float)] * 3), min_size=1, max_size=40)


@settings(max_examples=60, deadline=None)
@given(points)
def test_sort_matches_oracle(vals):
    assert [sorted(f) for f in moo.non_dominated_sort(vals)] == oracle_fronts(vals)
    assert [sorted(f) for f in moo.non_dominated_sort(vals)] == brute_force_fronts(vals)


@settings(max_examples=60, deadline=None)
@given(points)
def test_eval_order_matches_oracle(vals):
    assert moo.eval_order(vals) == brute_force_eval_order(np.array(vals))


@settings(max_examples=60, deadline=None)
@given(points)
def test_front_properties(vals):
    fronts = moo.non_dominated_sort(vals)
    assert sorted(itertools.chain(*fronts)) == list(range(len(vals)))
    for f in fronts:
        for i, j in itertools.permutations(f, 2):
            assert not dominates(vals[i], vals[j])
    for r in range(1, len(fronts)):
        for j in fronts[r]:
            assert any(dominates(vals[i], vals[j]) for i in fronts[r - 1])


@settings(max_examples=40, deadline=None)
@given(points, st.floats(0.1, 10), st.floats(-5, 5))
def test_fronts_invariant_under_monotone_rescaling(vals, a, b):
    v = np.array(vals)
    assert moo.non_dominated_sort(a * v + b) == moo.non_dominated_sort(v)


def test_crowding_example():
    d = moo.crowding_distance(np.array([[0.0, 4.0], [1.0, 2.0], [3.0, 0.0]]))
    assert np.isinf(d[0]) and np.isinf(d[2])
    assert d[1] == pytest.approx(3 / 3 + 4 / 4)


def test_crowding_small_and_flat_fronts():
    assert np.all(np.isinf(moo.crowding_distance(np.ones((2, 3)))))
    d = moo.crowding_distance(np.array([[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]]))
    assert d[1] == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(points)
def test_eval_order_is_rank_then_crowding_then_id(vals):
    v = np.array(vals)
    ranks, crowd = moo.rank_and_crowding(v)
    order = moo.eval_order(v)
    keys = [(ranks[i], -crowd[i], i) for i in order]
    assert keys == sorted(keys)


def test_score_orders_candidates():
    pts = [moo.ObjectivePoint(v, pid) for pid, v in enumerate([(0.5, 9, 9), (0.9, 1, 1), (0.8, 2, 2)])]
    scored = moo.score(pts)
    assert [s.point.payload_id for s in scored][0] == 1
    assert [(s.point.payload_id, s.rank) for s in scored] == [(1, 0), (2, 1), (0, 2)]
    assert moo.score([]) == []


def test_select_fraction():
    assert moo.select_fraction(list(range(10)), 0.25) == [0, 1, 2]
    assert moo.select_fraction([7], 0.01) == [7]
    with pytest.raises(ValueError):
        moo.select_fraction([], 0.5)
    with pytest.raises(ValueError):
        moo.select_fraction([1], 0.0)


def test_hypervolume_examples():
    # single point, 2 minimised objectives
    assert moo.hypervolume([(1.0, 1.0)], (3.0, 3.0), (False, False)) == pytest.approx(4.0)
    # union of two boxes
    hv = moo.hypervolume([(1.0, 2.0), (2.0, 1.0)], (3.0, 3.0), (False, False))
    assert hv == pytest.approx(2 + 2 - 1)
    assert moo.hypervolume([(0.5, 1.0, 1.0)], (0.0, 2.0, 2.0)) == pytest.approx(0.5)


@settings(max_examples=30, deadline=None)
@given(points)
def test_hypervolume_depends_only_on_front(vals):
    v = np.array(vals)
    ref = (-1.0, 7.0, 7.0)
    front = v[moo.non_dominated_sort(v)[0]]
    assert moo.hypervolume(v, ref) == pytest.approx(moo.hypervolume(front, ref))
