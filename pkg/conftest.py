import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from config import PipelineConfig  # noqa: E402
from ingest import Recording  # noqa: E402
from synthetic import generate_synthetic_cohort  # noqa: E402


@pytest.fixture(scope="session")
def small_cohort():
    return generate_synthetic_cohort(4, seed=7, hours=2.0, sample_rate_hz=50.0)


@pytest.fixture
def small_config(tmp_path) -> PipelineConfig:
    return PipelineConfig(n_trees=40, cv_folds=2, output_dir=str(tmp_path / "out"))


@pytest.fixture
def make_recording():
    def _make(samples, rate=100.0, pid="P1", t0=1_700_000_000.0, labels=None):
        samples = np.asarray(samples, dtype=float)
        return Recording(
            participant_id=pid,
            sample_rate_hz=rate,
            t0=t0,
            times_s=np.arange(len(samples)) / rate,
            samples=samples,
            labels=None if labels is None else np.asarray(labels, dtype=np.int8),
        )
    return _make
