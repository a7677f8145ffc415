"""Signal conditioning: low-pass filter, non-wear removal, auto-calibration, windowing."""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy import signal

from errors import FilterDesignError, IntervalError, SchemaError, WindowConfigError
from ingest import Recording, format_times, parse_times
from labels import MISSING, N_CLASSES, IntensityLabel, label_to_name, names_to_labels
from timeline import find_runs

logger = logging.getLogger(__name__)

COVERAGE_THRESHOLD = 0.5


class FilterSpec(BaseModel):
    cutoff_hz: float = Field(20.0, gt=0, description="Low-pass cutoff frequency.")
    order: int = Field(4, ge=1, le=12, description="Butterworth order (per pass).")


class NonwearRule(BaseModel):
    sd_threshold_g: float = Field(0.015, gt=0, description="Per-axis SD below which a chunk is stationary.")
    min_duration_s: float = Field(5400.0, gt=0, description="Shortest stationary run reported as non-wear.")
    window_s: float = Field(10.0, gt=0, description="Chunk length for the SD test.")

    @model_validator(mode="after")
    def _duration_covers_window(self):
        if self.min_duration_s < self.window_s:
            raise ValueError("min_duration_s must be >= window_s")
        return self


class Interval(NamedTuple):
    """[start, end) in epoch seconds."""
    start: float
    end: float


class CalibrationReport(BaseModel):
    gain: list[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    offset: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    iterations: int = 0
    initial_residual: float = 0.0
    final_residual: float = 0.0
    applied: bool = False
    n_stationary: int = 0
    reason: str = ""


@dataclass(frozen=True)
class Window:
    participant_id: str
    start_time: float
    duration_s: float
    sample_rate_hz: float
    samples: np.ndarray
    label: Optional[IntensityLabel]
    label_coverage: float

    @property
    def label_index(self) -> int:
        return MISSING if self.label is None else int(self.label)


def lowpass(recording: Recording, spec: FilterSpec = FilterSpec()) -> Recording:
    """Zero-phase Butterworth low-pass, each axis independently, length preserved."""
    nyquist = recording.sample_rate_hz / 2
    if spec.cutoff_hz >= nyquist:
        raise FilterDesignError(
            f"Cutoff {spec.cutoff_hz} Hz is not below the Nyquist frequency {nyquist} Hz of '{recording.participant_id}'"
        )
    sos = signal.butter(spec.order, spec.cutoff_hz, btype="lowpass", fs=recording.sample_rate_hz, output="sos")
    padlen = min(3 * spec.order, recording.n_samples - 1)
    filtered = signal.sosfiltfilt(sos, recording.samples, axis=0, padtype="odd", padlen=padlen)
    return replace(recording, samples=filtered)


def _chunk_stats(samples: np.ndarray, sample_rate_hz: float, window_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis mean and SD of consecutive non-overlapping chunks; the trailing partial chunk is ignored."""
    chunk = int(round(window_s * sample_rate_hz))
    n_chunks = len(samples) // chunk
    chunks = samples[: n_chunks * chunk].reshape(n_chunks, chunk, 3)
    return chunks.mean(axis=1), chunks.std(axis=1)


def _stationary_chunks(recording: Recording, rule: NonwearRule) -> tuple[np.ndarray, np.ndarray]:
    means, stds = _chunk_stats(recording.samples, recording.sample_rate_hz, rule.window_s)
    return np.all(stds < rule.sd_threshold_g, axis=1), means


def detect_nonwear(recording: Recording, rule: NonwearRule = NonwearRule()) -> list[Interval]:
    """Maximal runs of stationary 10 s chunks lasting at least ``rule.min_duration_s``."""
    stationary, _ = _stationary_chunks(recording, rule)
    chunk = int(round(rule.window_s * recording.sample_rate_hz))
    chunk_s = chunk / recording.sample_rate_hz
    intervals = []
    for start, stop in find_runs(stationary):
        if (stop - start) * chunk_s >= rule.min_duration_s - 1e-9:
            intervals.append(Interval(recording.t0 + start * chunk_s, recording.t0 + stop * chunk_s))
    logger.debug(f"{recording.participant_id}: {len(intervals)} non-wear interval(s)")
    return intervals


def remove_nonwear(recording: Recording, intervals: list[Interval]) -> Recording:
    """Marks samples inside the intervals as excluded."""
    if not intervals:
        return recording
    ordered = sorted(Interval(*interval) for interval in intervals)
    for previous, current in zip(ordered, ordered[1:]):
        if current.start < previous.end:
            raise IntervalError(f"Overlapping non-wear intervals {tuple(previous)} and {tuple(current)}")
    if any(interval.end <= interval.start for interval in ordered):
        raise IntervalError("Non-wear interval with end <= start")
    absolute = recording.t0 + recording.times_s
    excluded = recording.excluded_mask.copy()
    for interval in ordered:
        excluded |= (absolute >= interval.start) & (absolute < interval.end)
    return replace(recording, excluded=excluded)


def _sphere_residual(points: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.linalg.norm(points, axis=1) - 1.0) ** 2)))


def fit_calibration(points: np.ndarray, max_iter: int = 1000, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray, int, float]:
    """Fits per-axis gain/offset so that ``offset + gain * points`` lies on the unit sphere.

    Alternates projecting the calibrated points onto the sphere with a per-axis
    least-squares fit of those targets on the raw points. Returns the best
    (gain, offset, iterations, residual) seen.
    """
    gain = np.ones(3)
    offset = np.zeros(3)
    best = (gain.copy(), offset.copy(), 0, _sphere_residual(points))
    residual = best[3]
    design = [np.column_stack([np.ones(len(points)), points[:, axis]]) for axis in range(3)]
    iteration = 0
    for iteration in range(1, max_iter + 1):
        calibrated = offset + gain * points
        norms = np.linalg.norm(calibrated, axis=1, keepdims=True)
        target = calibrated / np.where(norms == 0, 1.0, norms)
        for axis in range(3):
            (offset[axis], gain[axis]), *_ = np.linalg.lstsq(design[axis], target[:, axis], rcond=None)
        new_residual = _sphere_residual(offset + gain * points)
        if new_residual < best[3]:
            best = (gain.copy(), offset.copy(), iteration, new_residual)
        if residual - new_residual < tol:
            break
        residual = new_residual
    return best[0], best[1], iteration, best[3]


def autocalibrate(recording: Recording, rule: NonwearRule = NonwearRule(), min_points: int = 10,
                  min_axis_extent_g: float = 0.3) -> tuple[Recording, CalibrationReport]:
    """Gain/offset calibration from stationary chunk means (applied only when well-posed)."""
    # includes chunks inside non-wear intervals
    stationary, means = _stationary_chunks(recording, rule)
    points = means[stationary]
    report = CalibrationReport(n_stationary=int(len(points)))
    if len(points):
        report.initial_residual = report.final_residual = _sphere_residual(points)

    if len(points) < min_points:
        report.reason = f"only {len(points)} stationary chunk(s), need {min_points}"
        logger.info(f"{recording.participant_id}: calibration skipped ({report.reason})")
        return recording, report
    diverse = np.all(points.max(axis=0) > min_axis_extent_g) and np.all(points.min(axis=0) < -min_axis_extent_g)
    if not diverse:
        report.reason = "stationary orientations do not span every axis"
        logger.info(f"{recording.participant_id}: calibration skipped ({report.reason})")
        return recording, report

    gain, offset, iterations, residual = fit_calibration(points)
    report.gain, report.offset = gain.tolist(), offset.tolist()
    report.iterations = iterations
    if np.any((gain < 0.5) | (gain > 1.5)) or np.any(np.abs(offset) > 0.5):
        report.reason = "fitted parameters outside accepted bounds"
        logger.warning(f"{recording.participant_id}: calibration rejected, gain={gain}, offset={offset}")
        return recording, report

    report.final_residual = residual
    report.applied = True
    logger.debug(f"{recording.participant_id}: calibrated in {iterations} iterations, residual {residual:.2e} g")
    return replace(recording, samples=offset + gain * recording.samples), report


def make_windows(recording: Recording, duration_s: float = 30.0,
                 coverage_threshold: float = COVERAGE_THRESHOLD) -> list[Window]:
    """Non-overlapping windows aligned to the recording start, labeled by majority.

    Windows touching excluded samples and the trailing partial window are dropped.
    Windows whose annotated fraction is below ``coverage_threshold`` get no label.
    """
    per_window = duration_s * recording.sample_rate_hz
    n_per = int(round(per_window))
    if duration_s <= 0 or n_per < 1 or abs(per_window - n_per) > 1e-6:
        raise WindowConfigError(
            f"Window of {duration_s} s is not a positive multiple of the sample period at {recording.sample_rate_hz} Hz"
        )
    n_windows = recording.n_samples // n_per
    excluded = recording.excluded_mask
    labels = recording.labels
    windows = []
    for i in range(n_windows):
        lo, hi = i * n_per, (i + 1) * n_per
        if excluded[lo:hi].any():
            continue
        label, coverage = None, 0.0
        if labels is not None:
            block = labels[lo:hi]
            annotated = block[block != MISSING]
            if len(annotated):
                counts = np.bincount(annotated, minlength=N_CLASSES)
                majority = int(np.argmax(counts))
                coverage = counts[majority] / n_per
                if len(annotated) / n_per >= coverage_threshold:
                    label = IntensityLabel(majority)
        windows.append(Window(
            participant_id=recording.participant_id,
            start_time=recording.t0 + i * duration_s,
            duration_s=duration_s,
            sample_rate_hz=recording.sample_rate_hz,
            samples=recording.samples[lo:hi],
            label=label,
            label_coverage=float(coverage),
        ))
    return windows


def preprocess_recording(recording: Recording, filter_spec: FilterSpec = FilterSpec(),
                         nonwear_rule: NonwearRule = NonwearRule(), duration_s: float = 30.0,
                         calibrate: bool = True) -> tuple[list[Window], dict]:
    """Runs filter -> non-wear -> calibration -> windowing; returns windows and a log entry."""
    filtered = lowpass(recording, filter_spec)
    intervals = detect_nonwear(filtered, nonwear_rule)
    cleaned = remove_nonwear(filtered, intervals)
    report = CalibrationReport(reason="disabled")
    if calibrate:
        cleaned, report = autocalibrate(cleaned, nonwear_rule)
    windows = make_windows(cleaned, duration_s)
    log_entry = {
        "participant_id": recording.participant_id,
        "sample_rate_hz": recording.sample_rate_hz,
        "n_samples": recording.n_samples,
        "nonwear_intervals": [format_times([i.start, i.end]) for i in intervals],
        "calibration": report.model_dump(),
        "n_windows": len(windows),
        "n_labeled_windows": sum(w.label is not None for w in windows),
    }
    logger.info(f"{recording.participant_id}: {len(windows)} windows, {len(intervals)} non-wear interval(s), "
                f"calibration {'applied' if report.applied else 'not applied'}")
    return windows, log_entry


def save_windows(windows: list[Window], path) -> None:
    """Writes ``<path>.csv`` (one row per window) and ``<path>.npy`` (sample blocks, float32)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = pd.DataFrame({
        "participant_id": [w.participant_id for w in windows],
        "start_time": format_times([w.start_time for w in windows]),
        "label": [label_to_name(w.label_index) for w in windows],
        "coverage": [w.label_coverage for w in windows],
        "duration_s": [w.duration_s for w in windows],
        "sample_rate_hz": [w.sample_rate_hz for w in windows],
    })
    index.to_csv(path.with_suffix(".csv"), index=False, float_format="%.10g")
    blocks = np.stack([w.samples for w in windows]) if windows else np.empty((0, 0, 3))
    np.save(path.with_suffix(".npy"), blocks.astype(np.float32))


def load_windows(path) -> list[Window]:
    """Reads windows written by ``save_windows``."""
    path = Path(path)
    index = pd.read_csv(path.with_suffix(".csv"), dtype={"participant_id": str, "label": str},
                        keep_default_na=False, float_precision="round_trip")
    required = {"participant_id", "start_time", "label", "coverage", "duration_s", "sample_rate_hz"}
    if not required.issubset(index.columns):
        raise SchemaError(f"{path.with_suffix('.csv')} is missing window columns {sorted(required - set(index.columns))}")
    if index.empty:
        return []
    blocks = np.load(path.with_suffix(".npy")).astype(float)
    if len(blocks) != len(index):
        raise SchemaError(f"{path}: {len(index)} index rows but {len(blocks)} sample blocks")
    starts = parse_times(index["start_time"], "iso")
    labels = names_to_labels(index["label"].tolist())
    return [
        Window(
            participant_id=row.participant_id,
            start_time=float(start),
            duration_s=float(row.duration_s),
            sample_rate_hz=float(row.sample_rate_hz),
            samples=block,
            label=None if label == MISSING else IntensityLabel(int(label)),
            label_coverage=float(row.coverage),
        )
        for row, start, label, block in zip(index.itertuples(index=False), starts, labels, blocks)
    ]
