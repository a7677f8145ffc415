"""Per-window class probabilities produced outside this pipeline.

Any upstream classifier can feed the HMM, correction and evaluation stages by writing
a CSV with ``pid,time,p_sleep,p_sedentary,p_light,p_mvpa``. The forest's own output
can be exported in the same format.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from errors import AlignmentError, EmptyInputError, PredictionValidationError, SchemaError
from hmm import LabeledSequence
from ingest import format_times, parse_times
from labels import LABEL_NAMES, argmax_labels
from preprocess import Window
from timeline import GAP_TOLERANCE_S

logger = logging.getLogger(__name__)

PROB_COLUMNS = [f"p_{name}" for name in LABEL_NAMES]
ROW_SUM_TOLERANCE = 1e-2


@dataclass(frozen=True)
class ExternalPredictions:
    participant_id: str
    times: np.ndarray
    probs: np.ndarray
    source_tag: str = "external"

    def __len__(self) -> int:
        return len(self.times)


def validate_probabilities(probs: np.ndarray, where: str = "") -> np.ndarray:
    """Rejects negative rows and rows summing outside 1 ± 1e-2; renormalizes the rest."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or probs.shape[1] != len(PROB_COLUMNS):
        raise SchemaError(f"{where}expected {len(PROB_COLUMNS)} probability columns, got shape {probs.shape}")
    if not np.all(np.isfinite(probs)):
        row = int(np.flatnonzero(~np.all(np.isfinite(probs), axis=1))[0])
        raise PredictionValidationError(f"{where}row {row}: non-numeric probability")
    negative = np.any(probs < 0, axis=1)
    if negative.any():
        row = int(np.flatnonzero(negative)[0])
        raise PredictionValidationError(f"{where}row {row}: negative probability {probs[row].tolist()}")
    sums = probs.sum(axis=1)
    off = np.abs(sums - 1.0) > ROW_SUM_TOLERANCE
    if off.any():
        row = int(np.flatnonzero(off)[0])
        raise PredictionValidationError(f"{where}row {row}: probabilities sum to {sums[row]:.6g}")
    # rows summing to 1 up to rounding pass through unchanged
    scale = np.where(np.abs(sums - 1.0) <= 1e-12, 1.0, sums)
    return probs / scale[:, None]


def from_probabilities(participant_id: str, times: np.ndarray, probs: np.ndarray,
                       source_tag: str = "external") -> ExternalPredictions:
    return ExternalPredictions(
        participant_id=participant_id,
        times=np.asarray(times, dtype=float),
        probs=validate_probabilities(probs, f"{participant_id}: "),
        source_tag=source_tag,
    )


def load_external_predictions(path, time_format: str = "iso", source_tag: str = "external") -> ExternalPredictions:
    """Reads one participant's prediction CSV; rows are sorted by time."""
    path = Path(path)
    frame = pd.read_csv(path, dtype={"pid": str, "time": str}, keep_default_na=False,
                        float_precision="round_trip")
    missing = [column for column in ["pid", "time"] + PROB_COLUMNS if column not in frame.columns]
    if missing:
        raise SchemaError(f"{path} is missing column(s): {', '.join(missing)}")
    if frame.empty:
        raise EmptyInputError(f"{path} has no prediction rows")
    pids = frame["pid"].unique()
    if len(pids) != 1:
        raise SchemaError(f"{path} holds {len(pids)} participants; expected exactly one per file")
    probs = frame[PROB_COLUMNS].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    times = parse_times(frame["time"], time_format)
    order = np.argsort(times, kind="stable")
    return ExternalPredictions(
        participant_id=str(pids[0]),
        times=times[order],
        probs=validate_probabilities(probs, f"{path}: ")[order],
        source_tag=source_tag,
    )


def write_external_predictions(preds: ExternalPredictions, path, time_format: str = "iso") -> None:
    """Writes predictions in the format load_external_predictions reads back exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(preds.probs, columns=PROB_COLUMNS)
    if time_format == "epoch_ms":
        frame.insert(0, "time", np.round(preds.times * 1000).astype(np.int64))
    else:
        frame.insert(0, "time", format_times(preds.times))
    frame.insert(0, "pid", preds.participant_id)
    frame.to_csv(path, index=False, float_format="%.17g")


def align_predictions(preds: ExternalPredictions, windows: list[Window],
                      tolerance_s: float = GAP_TOLERANCE_S) -> LabeledSequence:
    """Joins predictions to windows by start time within ``tolerance_s``.

    Windows without a matching prediction are left out of the returned sequence, so
    they show up as a time gap to smoothing.
    """
    windows = [w for w in windows if w.participant_id == preds.participant_id]
    starts = np.array([w.start_time for w in windows], dtype=float)
    if len(preds) == 0 or len(starts) == 0:
        raise AlignmentError(f"No predictions or windows to align for participant '{preds.participant_id}'")
    right = np.clip(np.searchsorted(preds.times, starts), 1, max(len(preds) - 1, 1))
    left = right - 1
    candidates = np.column_stack([left, np.minimum(right, len(preds) - 1)])
    distance = np.abs(preds.times[candidates] - starts[:, None])
    nearest = candidates[np.arange(len(starts)), np.argmin(distance, axis=1)]
    matched = np.abs(preds.times[nearest] - starts) <= tolerance_s
    if not matched.any():
        raise AlignmentError(f"None of {len(preds)} predictions for '{preds.participant_id}' match a window start")
    if not matched.all():
        logger.info(f"{preds.participant_id}: {int((~matched).sum())} window(s) without an external prediction")

    keep = np.flatnonzero(matched)
    probs = preds.probs[nearest[keep]]
    return LabeledSequence(
        participant_id=preds.participant_id,
        times=starts[keep],
        pred_labels=argmax_labels(probs),
        true_labels=np.array([windows[i].label_index for i in keep], dtype=np.int64),
        pred_probs=probs,
    )
