"""Synthetic labeled cohorts for tests and desk-scale end-to-end runs.

Every participant starts with a sleep block (several motionless postures), followed by a
short unannotated stretch and then awake segments of sedentary, light and mvpa
behaviour. Classes are generated from clearly different signal regimes, so a working
pipeline separates them well.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from ingest import LabelMapping, Recording, SubjectMeta
from labels import IntensityLabel

logger = logging.getLogger(__name__)

EPOCH_2024_S = 1704067200.0
AGE_BANDS = ["18-29", "30-37", "37-52", "53+"]
SEXES = ["female", "male"]

# free-text annotations, as a diary or camera annotator would write them
ANNOTATIONS = {
    IntensityLabel.SLEEP: ["7030 sleeping", "sleeping"],
    IntensityLabel.SEDENTARY: ["sitting desk work", "watching television", "7030 sitting quietly"],
    IntensityLabel.LIGHT: ["walking slowly household chores", "standing cooking"],
    IntensityLabel.MVPA: ["running", "cycling moderate effort", "brisk walking uphill"],
}

_SIGNED_AXES = np.vstack([np.eye(3), -np.eye(3)])


class ClassProfile(BaseModel):
    sleep_min_s: float = Field(3900.0, gt=0, description="Shortest sleep block.")
    sleep_max_s: float = Field(5100.0, gt=0, description="Longest sleep block.")
    gap_after_sleep_s: float = Field(120.0, ge=0, description="Unannotated stretch after sleep.")
    segment_min_s: float = Field(180.0, gt=0, description="Shortest awake segment.")
    segment_max_s: float = Field(900.0, gt=0, description="Longest awake segment.")
    awake_weights: dict[str, float] = Field(
        default_factory=lambda: {"sedentary": 0.55, "light": 0.3, "mvpa": 0.15},
        description="Relative frequency of each awake class.")
    sleep_noise_g: float = Field(0.003, ge=0)
    awake_noise_g: float = Field(0.008, ge=0)
    sedentary_tilt_rad: float = Field(0.35, ge=0)
    sedentary_freq_hz: tuple[float, float] = (0.05, 0.1)
    light_amplitude_g: float = Field(0.1, ge=0)
    light_freq_hz: tuple[float, float] = (1.0, 2.0)
    mvpa_amplitude_g: float = Field(0.6, ge=0)
    mvpa_freq_hz: tuple[float, float] = (2.0, 4.0)
    n_sleep_postures: int = Field(6, ge=1, le=6)


@dataclass(frozen=True)
class Segment:
    label: IntensityLabel
    start: int
    stop: int
    annotated: bool = True


@dataclass(frozen=True)
class SyntheticCohort:
    recordings: list[Recording]
    mapping: LabelMapping
    meta: dict[str, SubjectMeta]
    schedules: dict[str, list[Segment]]

    def mapping_frame(self) -> pd.DataFrame:
        rows = [{"annotation": text, "label": label.label_name}
                for label, texts in ANNOTATIONS.items() for text in texts]
        return pd.DataFrame(rows, columns=["annotation", "label"])


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _schedule(rng: np.random.Generator, n_samples: int, rate: float, window_samples: int,
              profile: ClassProfile) -> list[Segment]:
    def whole_windows(seconds: float) -> int:
        return max(1, int(round(seconds * rate / window_samples))) * window_samples

    segments = []
    sleep = min(n_samples, whole_windows(rng.uniform(profile.sleep_min_s, profile.sleep_max_s)))
    segments.append(Segment(IntensityLabel.SLEEP, 0, sleep))
    cursor = sleep
    if profile.gap_after_sleep_s > 0 and cursor < n_samples:
        gap = min(n_samples - cursor, whole_windows(profile.gap_after_sleep_s))
        segments.append(Segment(IntensityLabel.SEDENTARY, cursor, cursor + gap, annotated=False))
        cursor += gap
    classes = [IntensityLabel.parse(name) for name in profile.awake_weights]
    weights = np.array(list(profile.awake_weights.values()), dtype=float)
    weights /= weights.sum()
    while cursor < n_samples:
        label = classes[int(rng.choice(len(classes), p=weights))]
        length = min(n_samples - cursor, whole_windows(rng.uniform(profile.segment_min_s, profile.segment_max_s)))
        segments.append(Segment(label, cursor, cursor + length))
        cursor += length
    return segments


def _segment_signal(rng: np.random.Generator, segment: Segment, rate: float, profile: ClassProfile) -> np.ndarray:
    n = segment.stop - segment.start
    t = np.arange(n) / rate
    if segment.label == IntensityLabel.SLEEP:
        # one motionless posture per part of the block, cycling through all six orientations
        postures = _SIGNED_AXES[rng.permutation(6)[:profile.n_sleep_postures]]
        bounds = np.linspace(0, n, len(postures) + 1).astype(int)
        gravity = np.repeat(postures, np.diff(bounds), axis=0)
        return gravity + rng.normal(0, profile.sleep_noise_g, size=(n, 3))

    direction = _random_unit(rng)
    noise = rng.normal(0, profile.awake_noise_g, size=(n, 3))
    if segment.label == IntensityLabel.SEDENTARY:
        axis = np.cross(direction, _random_unit(rng))
        axis /= np.linalg.norm(axis)
        freq = rng.uniform(*profile.sedentary_freq_hz)
        angles = profile.sedentary_tilt_rad * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        cos, sin = np.cos(angles)[:, None], np.sin(angles)[:, None]
        # direction is perpendicular to axis, so the Rodrigues term along the axis vanishes
        gravity = direction * cos + np.cross(axis, direction) * sin
        return gravity + noise

    if segment.label == IntensityLabel.LIGHT:
        amplitude, band = profile.light_amplitude_g, profile.light_freq_hz
    else:
        amplitude, band = profile.mvpa_amplitude_g, profile.mvpa_freq_hz
    freq = rng.uniform(*band)
    swing = 1.0 + amplitude * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return swing[:, None] * direction + noise


def generate_synthetic_cohort(n_participants: int, seed: int = 42, class_profile: ClassProfile = ClassProfile(),
                              hours: float = 2.0, sample_rate_hz: float = 50.0,
                              window_duration_s: float = 30.0) -> SyntheticCohort:
    """Deterministic given ``seed``."""
    if n_participants < 1:
        raise ValueError("n_participants must be at least 1")
    rng = np.random.default_rng(seed)
    n_samples = int(round(hours * 3600 * sample_rate_hz))
    window_samples = int(round(window_duration_s * sample_rate_hz))
    mapping = LabelMapping({LabelMapping.normalize(text): label for label, texts in ANNOTATIONS.items() for text in texts})

    recordings, meta, schedules = [], {}, {}
    for i in range(n_participants):
        pid = f"P{i + 1:03d}"
        segments = _schedule(rng, n_samples, sample_rate_hz, window_samples, class_profile)
        samples = np.vstack([_segment_signal(rng, segment, sample_rate_hz, class_profile) for segment in segments])
        annotations = np.full(n_samples, None, dtype=object)
        for segment in segments:
            if segment.annotated:
                choices = ANNOTATIONS[segment.label]
                annotations[segment.start:segment.stop] = choices[int(rng.integers(len(choices)))]
        recordings.append(Recording(
            participant_id=pid,
            sample_rate_hz=sample_rate_hz,
            t0=EPOCH_2024_S + i * 86400.0,
            times_s=np.arange(n_samples) / sample_rate_hz,
            samples=samples,
            annotations=annotations,
        ))
        meta[pid] = SubjectMeta(participant_id=pid, age_band=AGE_BANDS[int(rng.integers(len(AGE_BANDS)))],
                                sex=SEXES[int(rng.integers(len(SEXES)))])
        schedules[pid] = segments
        logger.debug(f"{pid}: {len(segments)} segments")
    return SyntheticCohort(recordings, mapping, meta, schedules)


def write_synthetic_cohort(cohort: SyntheticCohort, outdir) -> list[Path]:
    """Writes ``recordings/<pid>.csv`` (epoch-ms times), ``label_mapping.csv`` and ``metadata.csv``."""
    outdir = Path(outdir)
    (outdir / "recordings").mkdir(parents=True, exist_ok=True)
    written = []
    for recording in cohort.recordings:
        t0_ms = int(round(recording.t0 * 1000))
        frame = pd.DataFrame({
            "time": t0_ms + np.round(recording.times_s * 1000).astype(np.int64),
            "x": recording.samples[:, 0],
            "y": recording.samples[:, 1],
            "z": recording.samples[:, 2],
            "annotation": ["" if a is None else a for a in recording.annotations],
        })
        path = outdir / "recordings" / f"{recording.participant_id}.csv"
        frame.to_csv(path, index=False, float_format="%.5f")
        written.append(path)

    path = outdir / "label_mapping.csv"
    cohort.mapping_frame().to_csv(path, index=False)
    written.append(path)
    path = outdir / "metadata.csv"
    pd.DataFrame([{"pid": m.participant_id, "age_band": m.age_band, "sex": m.sex} for m in cohort.meta.values()],
                 columns=["pid", "age_band", "sex"]).to_csv(path, index=False)
    written.append(path)
    logger.info(f"Wrote {len(cohort.recordings)} synthetic recording(s) to {outdir}")
    return written
