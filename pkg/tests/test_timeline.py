import numpy as np

from timeline import contiguous_steps, find_runs, split_segments


def test_find_runs():
    assert find_runs(np.array([True, True, False, True, False, False, True])) == [(0, 2), (3, 4), (6, 7)]
    assert find_runs(np.array([], dtype=bool)) == []


def test_contiguous_steps_tolerance():
    np.testing.assert_array_equal(contiguous_steps([0.0, 30.0, 60.4, 91.0], 30.0), [True, True, False])


def test_split_segments():
    assert split_segments(np.array([0.0, 30.0, 60.0, 200.0, 230.0]), 30.0) == [(0, 3), (3, 5)]
    assert split_segments(np.array([5.0]), 30.0) == [(0, 1)]
    assert split_segments(np.array([]), 30.0) == []
