"""Reading recordings, annotation mappings and subject metadata; resampling.

A Recording keeps its time axis as float seconds relative to ``t0`` (itself epoch
seconds, UTC). Everything downstream works on that representation and formats
timestamps back to ISO-8601 only when writing files.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from errors import (
    EmptyInputError,
    InsufficientDataError,
    IrregularSamplingError,
    MappingConflictError,
    MetadataError,
    OrderingError,
    SchemaError,
    UnmappedAnnotationError,
)
from labels import MISSING, IntensityLabel

logger = logging.getLogger(__name__)

RATE_TOLERANCE = 0.01


class CsvSchema(BaseModel):
    """Column names and time encoding of a recording CSV."""
    time_column: str = Field("time", description="Timestamp column.")
    x_column: str = Field("x", description="X acceleration in g.")
    y_column: str = Field("y", description="Y acceleration in g.")
    z_column: str = Field("z", description="Z acceleration in g.")
    annotation_column: str = Field("annotation", description="Optional free-text annotation column.")
    time_format: Literal["iso", "epoch_ms"] = Field("epoch_ms", description="'iso' for ISO-8601 strings, 'epoch_ms' for epoch milliseconds.")


class SubjectMeta(BaseModel):
    participant_id: str
    age_band: Literal["18-29", "30-37", "37-52", "53+"]
    sex: Literal["female", "male"]


@dataclass(frozen=True)
class Recording:
    """Tri-axial acceleration for one participant.

    ``annotations`` holds raw strings (None = missing) as read from file; after
    ``map_annotations`` it is None and ``labels`` holds label indices (MISSING = -1).
    ``excluded`` marks samples removed as non-wear.
    """
    participant_id: str
    sample_rate_hz: float
    t0: float
    times_s: np.ndarray
    samples: np.ndarray
    annotations: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    excluded: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        n = len(self.samples)
        if n == 0:
            raise EmptyInputError(f"Recording '{self.participant_id}' has no samples")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.samples.ndim != 2 or self.samples.shape[1] != 3:
            raise ValueError(f"samples must be (n, 3), got {self.samples.shape}")
        for name in ("times_s", "annotations", "labels", "excluded"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise ValueError(f"{name} has length {len(value)}, expected {n}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    @property
    def excluded_mask(self) -> np.ndarray:
        if self.excluded is None:
            return np.zeros(self.n_samples, dtype=bool)
        return self.excluded


@dataclass(frozen=True)
class LabelMapping:
    """Normalized annotation string -> intensity label."""
    table: dict[str, IntensityLabel]

    @staticmethod
    def normalize(raw: str) -> str:
        return str(raw).strip().casefold()

    def lookup(self, raw: str) -> IntensityLabel:
        key = self.normalize(raw)
        if key not in self.table:
            raise UnmappedAnnotationError(f"Annotation '{raw}' has no entry in the label mapping")
        return self.table[key]

    def __len__(self) -> int:
        return len(self.table)


def _parse_times_ns(values: pd.Series, time_format: str) -> np.ndarray:
    if time_format == "epoch_ms":
        stamps = pd.to_datetime(pd.to_numeric(values), unit="ms", utc=True)
    else:
        stamps = pd.to_datetime(values, utc=True, format="ISO8601")
    return stamps.to_numpy(dtype="datetime64[ns]").astype(np.int64)


def read_recording_csv(path, schema: CsvSchema = CsvSchema(), participant_id: Optional[str] = None,
                       resample_hz: Optional[float] = None) -> Recording:
    """Reads a recording CSV.

    The sample rate is the reciprocal of the median inter-sample gap. Gaps more than 1%
    away from the median raise IrregularSamplingError, unless ``resample_hz`` is given, in
    which case the recording is resampled onto a uniform grid at that rate.
    """
    path = Path(path)
    pid = participant_id or path.stem
    try:
        frame = pd.read_csv(path, dtype={schema.annotation_column: str}, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise EmptyInputError(f"{path} is empty")
    required = [schema.time_column, schema.x_column, schema.y_column, schema.z_column]
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise SchemaError(f"{path} is missing column(s): {', '.join(missing)}")
    if frame.empty:
        raise EmptyInputError(f"{path} has a header but no rows")

    try:
        times_ns = _parse_times_ns(frame[schema.time_column], schema.time_format)
    except (ValueError, TypeError) as e:
        raise SchemaError(f"{path}: cannot parse column '{schema.time_column}' as {schema.time_format} timestamps: {e}")
    if len(times_ns) < 2:
        raise InsufficientDataError(f"{path}: at least 2 samples are needed to infer the sample rate")
    gaps_ns = np.diff(times_ns)
    if np.any(gaps_ns <= 0):
        row = int(np.flatnonzero(gaps_ns <= 0)[0]) + 1
        raise OrderingError(f"{path}: timestamps not strictly increasing at data row {row}")

    axes = frame[[schema.x_column, schema.y_column, schema.z_column]].apply(pd.to_numeric, errors="coerce")
    if axes.isna().any().any():
        row = int(np.flatnonzero(axes.isna().any(axis=1).to_numpy())[0]) + 1
        raise SchemaError(f"{path}: non-numeric or empty acceleration value at data row {row}")
    samples = axes.to_numpy(dtype=float)
    times_s = (times_ns - times_ns[0]) / 1e9
    annotations = None
    if schema.annotation_column in frame.columns:
        raw = frame[schema.annotation_column].to_numpy(dtype=object)
        annotations = np.array([value if isinstance(value, str) and value.strip() else None for value in raw], dtype=object)

    median_gap = float(np.median(gaps_ns)) / 1e9
    sample_rate_hz = 1.0 / median_gap
    irregular = np.abs(gaps_ns / 1e9 - median_gap) > RATE_TOLERANCE * median_gap

    if np.any(irregular) and resample_hz is None:
        row = int(np.flatnonzero(irregular)[0]) + 1
        raise IrregularSamplingError(
            f"{path}: {int(irregular.sum())} gap(s) deviate more than 1% from the median "
            f"(first at data row {row}); request resampling to accept irregular input"
        )

    recording = Recording(
        participant_id=pid,
        sample_rate_hz=sample_rate_hz,
        t0=times_ns[0] / 1e9,
        times_s=times_s,
        samples=samples,
        annotations=annotations,
    )
    logger.debug(f"Read {pid}: {len(recording)} samples at {sample_rate_hz:.4f} Hz")
    if resample_hz is not None:
        recording = resample(recording, resample_hz)
    return recording


def load_label_mapping(path) -> LabelMapping:
    """Loads an ``annotation,label`` CSV into a LabelMapping."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [column for column in ("annotation", "label") if column not in frame.columns]
    if missing:
        raise SchemaError(f"{path} is missing column(s): {', '.join(missing)}")
    table: dict[str, IntensityLabel] = {}
    for raw, name in zip(frame["annotation"], frame["label"]):
        key = LabelMapping.normalize(raw)
        label = IntensityLabel.parse(name)
        if key in table and table[key] != label:
            raise MappingConflictError(
                f"Annotation '{raw}' maps to both {table[key].label_name} and {label.label_name}"
            )
        table[key] = label
    return LabelMapping(table)


def map_annotations(recording: Recording, mapping: LabelMapping) -> Recording:
    """Replaces raw annotation strings by label indices; missing stays MISSING."""
    if recording.annotations is None:
        raise SchemaError(f"Recording '{recording.participant_id}' has no annotations to map")
    cache: dict[str, int] = {}
    labels = np.full(recording.n_samples, MISSING, dtype=np.int8)
    for i, raw in enumerate(recording.annotations):
        if raw is None:
            continue
        if raw not in cache:
            cache[raw] = int(mapping.lookup(raw))
        labels[i] = cache[raw]
    return replace(recording, annotations=None, labels=labels)


def resample(recording: Recording, target_hz: float) -> Recording:
    """Linear interpolation onto a uniform grid at ``target_hz`` spanning [t0, last sample].

    Annotations and labels follow the nearest original sample in time.
    """
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    if recording.n_samples < 2:
        raise InsufficientDataError(f"Recording '{recording.participant_id}' needs at least 2 samples to resample")
    times = recording.times_s
    n_out = int(np.floor(times[-1] * target_hz + 1e-9)) + 1
    grid = np.arange(n_out) / target_hz
    samples = np.column_stack([np.interp(grid, times, recording.samples[:, axis]) for axis in range(3)])

    # nearest original sample for every grid point
    right = np.clip(np.searchsorted(times, grid), 1, len(times) - 1)
    left = right - 1
    nearest = np.where(grid - times[left] <= times[right] - grid, left, right)

    return replace(
        recording,
        sample_rate_hz=float(target_hz),
        times_s=grid,
        samples=samples,
        annotations=None if recording.annotations is None else recording.annotations[nearest],
        labels=None if recording.labels is None else recording.labels[nearest],
        excluded=None if recording.excluded is None else recording.excluded[nearest],
    )


def load_subject_meta(path) -> dict[str, SubjectMeta]:
    """Loads a ``pid,age_band,sex`` CSV keyed by participant id."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [column for column in ("pid", "age_band", "sex") if column not in frame.columns]
    if missing:
        raise SchemaError(f"{path} is missing column(s): {', '.join(missing)}")
    meta: dict[str, SubjectMeta] = {}
    for row in frame.itertuples(index=False):
        try:
            meta[row.pid] = SubjectMeta(participant_id=row.pid, age_band=row.age_band.strip(), sex=row.sex.strip().lower())
        except ValidationError as e:
            raise MetadataError(f"Invalid metadata for participant '{row.pid}': {e.errors()}")
    return meta


def format_times(epoch_s: np.ndarray) -> list[str]:
    """Epoch seconds -> ISO-8601 strings with millisecond precision."""
    stamps = pd.to_datetime(np.round(np.asarray(epoch_s, dtype=float) * 1000).astype(np.int64), unit="ms", utc=True)
    return [stamp.isoformat(timespec="milliseconds") for stamp in stamps]


def parse_times(values, time_format: str = "iso") -> np.ndarray:
    """Parses a column of timestamps into epoch seconds."""
    return _parse_times_ns(pd.Series(values), time_format) / 1e9
