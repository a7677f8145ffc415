"""Run-length and time-gap helpers shared by the windowing, smoothing and correction stages."""
import numpy as np

GAP_TOLERANCE_S = 0.5


def find_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Returns [start, stop) index pairs of maximal runs of True in a boolean array."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return []
    padded = np.concatenate(([False], mask, [False]))
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(start), int(stop)) for start, stop in zip(edges[::2], edges[1::2])]


def contiguous_steps(times: np.ndarray, expected_gap_s: float, tolerance_s: float = GAP_TOLERANCE_S) -> np.ndarray:
    """Boolean per consecutive pair: does times[t+1] - times[t] meet the expected gap?"""
    times = np.asarray(times, dtype=float)
    if times.size < 2:
        return np.zeros(0, dtype=bool)
    return np.abs(np.diff(times) - expected_gap_s) <= tolerance_s


def split_segments(times: np.ndarray, expected_gap_s: float, tolerance_s: float = GAP_TOLERANCE_S) -> list[tuple[int, int]]:
    """Splits a time axis into [start, stop) segments wherever the gap is not the expected one."""
    n = len(times)
    if n == 0:
        return []
    breaks = np.flatnonzero(~contiguous_steps(times, expected_gap_s, tolerance_s)) + 1
    bounds = np.concatenate(([0], breaks, [n]))
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
