"""Sleep-block correction: sleep must come in blocks of at least an hour."""
import logging
from dataclasses import replace
from typing import Optional

import numpy as np

from hmm import LabeledSequence
from labels import IntensityLabel
from timeline import GAP_TOLERANCE_S, find_runs, split_segments

logger = logging.getLogger(__name__)

MIN_SLEEP_BLOCK_S = 3600.0


def sleep_block_correction(labels: np.ndarray, window_duration_s: float = 30.0,
                           min_block_s: float = MIN_SLEEP_BLOCK_S, times: Optional[np.ndarray] = None,
                           tolerance_s: float = GAP_TOLERANCE_S) -> np.ndarray:
    """Relabels sleep runs shorter than ``min_block_s`` as sedentary.

    With ``times`` given, runs do not continue across gaps other than ``window_duration_s``.
    """
    if window_duration_s <= 0:
        raise ValueError("window_duration_s must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    out = labels.copy()
    segments = [(0, len(labels))] if times is None else split_segments(times, window_duration_s, tolerance_s)
    rewritten = 0
    for a, b in segments:
        for start, stop in find_runs(labels[a:b] == IntensityLabel.SLEEP):
            if (stop - start) * window_duration_s < min_block_s - 1e-9:
                out[a + start:a + stop] = IntensityLabel.SEDENTARY
                rewritten += stop - start
    if rewritten:
        logger.debug(f"sleep correction: {rewritten} window(s) relabeled sedentary")
    return out


def correct_sequence(seq: LabeledSequence, window_duration_s: float = 30.0,
                     min_block_s: float = MIN_SLEEP_BLOCK_S) -> LabeledSequence:
    corrected = sleep_block_correction(seq.pred_labels, window_duration_s, min_block_s, times=seq.times)
    return replace(seq, pred_labels=corrected)
