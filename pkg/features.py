"""Handcrafted per-window features.

The ordered feature list is frozen in FEATURE_NAMES and mirrored in
docs/feature_manifest.md; any change to names, order or definitions must bump
FEATURE_MANIFEST_VERSION, which is stored in trained models and checked on load.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import fft, signal, stats

from errors import SchemaError
from ingest import format_times
from labels import label_to_name
from preprocess import Window

logger = logging.getLogger(__name__)

FEATURE_MANIFEST_VERSION = "1"

SPECTRAL_BANDS = [(0.3, 1.0), (1.0, 3.0), (3.0, 5.0), (5.0, 8.0), (8.0, 15.0)]
_EPS = 1e-12


def _band_name(lo: float, hi: float) -> str:
    return f"fft_band_{lo:g}_{hi:g}hz".replace(".", "p")


FEATURE_NAMES = (
    [f"{s}_{stat}" for s in ("x", "y", "z", "v") for stat in ("mean", "std", "skew", "kurt", "min", "max")]
    + ["v_q25", "v_median", "v_q75"]
    + ["corr_xy", "corr_xz", "corr_yz", "autocorr_x", "autocorr_y", "autocorr_z", "autocorr_v"]
    + ["roll_mean", "roll_std", "pitch_mean", "pitch_std", "yaw_mean", "yaw_std"]
    + ["fft_f1", "fft_p1", "fft_f2", "fft_p2", "fft_entropy", "fft_total_power"]
    + [_band_name(lo, hi) for lo, hi in SPECTRAL_BANDS]
    + ["peaks_count", "peaks_mean_prominence"]
    + ["v_mad", "v_iqr", "v_range", "v_mean_crossings", "x_power", "y_power", "z_power",
       "enmo_mean", "enmo_std", "sma"]
)
N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 63


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray

    @property
    def names(self) -> list[str]:
        return FEATURE_NAMES

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values.tolist()))


def _is_flat(x: np.ndarray) -> bool:
    return float(np.std(x)) < _EPS


def _moments(x: np.ndarray) -> list[float]:
    if _is_flat(x):
        skew = kurt = 0.0
    else:
        skew = float(stats.skew(x))
        kurt = float(stats.kurtosis(x))
    return [float(np.mean(x)), float(np.std(x)), skew, kurt, float(np.min(x)), float(np.max(x))]


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if _is_flat(a) or _is_flat(b):
        return 0.0
    return float(np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0))


def _spectral(v: np.ndarray, sample_rate_hz: float) -> list[float]:
    """Dominant frequencies, entropy, total and band powers of the norm's Hann-tapered spectrum."""
    n_out = 6 + len(SPECTRAL_BANDS)
    if _is_flat(v):
        return [0.0] * n_out
    n = len(v)
    tapered = (v - v.mean()) * signal.windows.hann(n, sym=False)
    power = np.abs(fft.rfft(tapered)) ** 2 / n
    freqs = fft.rfftfreq(n, d=1.0 / sample_rate_hz)
    power, freqs = power[1:], freqs[1:]
    total = float(power.sum())
    if total < _EPS:
        return [0.0] * n_out

    top = int(np.argmax(power))
    f1, p1 = float(freqs[top]), float(power[top])
    # second: strongest interior local maximum other than the dominant bin
    peaks, _ = signal.find_peaks(power)
    others = peaks[peaks != top]
    if len(others):
        second = others[int(np.argmax(power[others]))]
        f2, p2 = float(freqs[second]), float(power[second])
    else:
        f2, p2 = 0.0, 0.0

    entropy = float(stats.entropy(power / total) / np.log(len(power))) if len(power) > 1 else 0.0
    bands = [float(power[(freqs >= lo) & (freqs < hi)].sum()) for lo, hi in SPECTRAL_BANDS]
    return [f1, p1, f2, p2, entropy, total] + bands


def _peaks(v: np.ndarray) -> list[float]:
    if _is_flat(v):
        return [0.0, 0.0]
    peaks, props = signal.find_peaks(v, height=v.mean() + v.std(), prominence=0)
    if len(peaks) == 0:
        return [0.0, 0.0]
    return [float(len(peaks)), float(np.mean(props["prominences"]))]


def extract_features(window: Window) -> FeatureVector:
    """The 63-value feature vector of one window, in FEATURE_NAMES order."""
    xyz = np.asarray(window.samples, dtype=float)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    v = np.linalg.norm(xyz, axis=1)
    enmo = np.maximum(v - 1.0, 0.0)

    values = []
    for s in (x, y, z, v):
        values += _moments(s)

    q25, median, q75 = np.percentile(v, [25, 50, 75])
    values += [float(q25), float(median), float(q75)]

    values += [_pearson(x, y), _pearson(x, z), _pearson(y, z)]
    values += [_pearson(s[:-1], s[1:]) for s in (x, y, z, v)]

    roll = np.degrees(np.arctan2(y, z))
    pitch = np.degrees(np.arctan2(x, np.sqrt(y ** 2 + z ** 2)))
    yaw = np.degrees(np.arctan2(y, x))
    for angle in (roll, pitch, yaw):
        values += [float(np.mean(angle)), float(np.std(angle))]

    values += _spectral(v, window.sample_rate_hz)
    values += _peaks(v)

    centered = v - v.mean()
    mean_crossings = int(np.count_nonzero(centered[:-1] * centered[1:] < 0))
    values += [
        float(np.mean(np.abs(centered))),
        float(q75 - q25),
        float(np.ptp(v)),
        float(mean_crossings),
        float(np.mean(x ** 2)), float(np.mean(y ** 2)), float(np.mean(z ** 2)),
        float(np.mean(enmo)), float(np.std(enmo)),
        float(np.mean(np.abs(x) + np.abs(y) + np.abs(z))),
    ]

    out = np.nan_to_num(np.asarray(values, dtype=float), nan=0.0, posinf=0.0, neginf=0.0)
    return FeatureVector(out)


def extract_feature_matrix(windows: list[Window], jobs: int = 1) -> np.ndarray:
    """Stacks extract_features over windows into an (n, 63) matrix."""
    if not windows:
        return np.zeros((0, N_FEATURES))
    if jobs == 1:
        rows = [extract_features(w).values for w in windows]
    else:
        rows = Parallel(n_jobs=jobs)(delayed(extract_features)(w) for w in windows)
        rows = [row.values for row in rows]
    return np.vstack(rows)


def save_feature_table(windows: list[Window], matrix: np.ndarray, path) -> None:
    """CSV with participant_id, start_time, label then one column per feature."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(matrix, columns=FEATURE_NAMES)
    frame.insert(0, "label", [label_to_name(w.label_index) for w in windows])
    frame.insert(0, "start_time", format_times([w.start_time for w in windows]))
    frame.insert(0, "participant_id", [w.participant_id for w in windows])
    frame.to_csv(path, index=False, float_format="%.17g")


def load_feature_table(path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"participant_id": str, "label": str}, keep_default_na=False,
                        float_precision="round_trip")
    missing = [name for name in FEATURE_NAMES if name not in frame.columns]
    if missing:
        raise SchemaError(f"{path} lacks feature column(s): {', '.join(missing[:5])}")
    return frame
