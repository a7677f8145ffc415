import json
from dataclasses import replace

import numpy as np
import pytest

from config import PipelineConfig
from errors import DegenerateTrainingError
from external import from_probabilities, load_external_predictions, write_external_predictions
from features import extract_feature_matrix
from hmm import HmmParams
from ingest import map_annotations
from labels import MISSING
from pipeline import (
    forest_predictions,
    predict_sequence,
    run_pipeline_cv,
    train_models,
    window_labels,
    window_times,
    write_report_bundle,
)
from preprocess import preprocess_recording
from synthetic import generate_synthetic_cohort


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic_cohort(6, seed=11, hours=2.0, sample_rate_hz=50.0)


@pytest.fixture(scope="module")
def windows_by_pid(cohort):
    out = {}
    for recording in cohort.recordings:
        windows, _ = preprocess_recording(map_annotations(recording, cohort.mapping))
        out[recording.participant_id] = windows
    return out


@pytest.fixture(scope="module")
def features_by_pid(windows_by_pid):
    return {pid: extract_feature_matrix(windows) for pid, windows in windows_by_pid.items()}


@pytest.fixture(scope="module")
def config():
    return PipelineConfig(n_trees=100, cv_folds=3, subgroups=["sex"])


@pytest.fixture(scope="module")
def bundle(windows_by_pid, features_by_pid, config, cohort):
    return run_pipeline_cv(windows_by_pid, config, meta=cohort.meta, features_by_pid=features_by_pid)


def noisy_truth(windows, seed):
    """Probabilities that favour the true label, uniform where it is unknown."""
    rng = np.random.default_rng(seed)
    labels = window_labels(windows)
    probs = np.full((len(windows), 4), 0.25)
    known = labels != MISSING
    probs[known] = 0.1 / 3
    probs[known, labels[known]] = 0.9
    flip = known & (rng.random(len(windows)) < 0.1)
    probs[flip] = np.roll(probs[flip], 1, axis=1)
    return probs


class TestCrossValidation:
    def test_synthetic_cohort_is_separable(self, bundle):
        assert bundle.forest.metrics.mean("macro_f1") >= 0.9
        assert bundle.forest.metrics.n_participants == 6
        assert len(bundle.oob_accuracy) == 3
        assert min(bundle.oob_accuracy) > 0.8

    def test_every_participant_tested_once(self, bundle, windows_by_pid):
        test_sets = [set(bundle.folds.test_pids(f)) for f in range(3)]
        assert set().union(*test_sets) == set(windows_by_pid)
        assert sum(len(s) for s in test_sets) == 6
        assert set(bundle.forest.sequences) == set(windows_by_pid)

    def test_agreement_and_subgroups(self, bundle):
        sleep = bundle.forest.agreement.row("sleep")
        assert abs(sleep["mean_difference"]) < 0.25
        assert set(bundle.forest.subgroups["sex"]) <= {"female", "male"}

    def test_report_is_reproducible(self, bundle, windows_by_pid, features_by_pid, config, cohort, tmp_path):
        again = run_pipeline_cv(windows_by_pid, config, meta=cohort.meta, features_by_pid=features_by_pid)
        write_report_bundle(bundle, tmp_path / "a", cohort.meta)
        write_report_bundle(again, tmp_path / "b", cohort.meta)
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        assert (tmp_path / "a" / "folds.json").read_bytes() == (tmp_path / "b" / "folds.json").read_bytes()

    def test_report_files(self, bundle, cohort, tmp_path):
        written = {path.name for path in write_report_bundle(bundle, tmp_path, cohort.meta)}
        assert {"report.json", "folds.json", "per_participant_metrics.csv", "confusion_matrix.csv",
                "compositions.csv", "agreement.csv", "bland_altman.csv", "boxplot.csv",
                "subgroups_sex.csv"} <= written
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["forest"]["metrics"]["macro_f1"]["mean"] >= 0.9
        assert "external" not in report

    def test_external_model(self, windows_by_pid, features_by_pid, config, cohort):
        external = {
            pid: from_probabilities(pid, window_times(windows), noisy_truth(windows, i))
            for i, (pid, windows) in enumerate(sorted(windows_by_pid.items()))
        }
        both = run_pipeline_cv(windows_by_pid, config.model_copy(update={"subgroups": []}),
                               external=external, features_by_pid=features_by_pid)
        assert both.external.metrics.n_participants == 6
        assert both.external.metrics.mean("accuracy") > 0.85
        assert set(both.comparison["metric"]) == {"accuracy", "balanced_accuracy", "macro_f1", "cohen_kappa"}
        assert both.model_agreement is not None


class TestTrainAndPredict:
    def test_emission_from_out_of_bag(self, windows_by_pid, features_by_pid, config):
        forest, params = train_models(windows_by_pid, features_by_pid, config.model_copy(update={"n_trees": 30}))
        assert isinstance(params, HmmParams)
        assert forest.oob_valid.mean() > 0.9
        # a usable classifier puts most emission mass on the diagonal
        assert np.all(np.diag(params.emission) > 0.5)

    def test_file_and_in_process_paths_agree(self, windows_by_pid, features_by_pid, config, tmp_path):
        train = {pid: windows_by_pid[pid] for pid in list(windows_by_pid)[:4]}
        forest, params = train_models(train, {pid: features_by_pid[pid] for pid in train},
                                      config.model_copy(update={"n_trees": 30}))
        pid = list(windows_by_pid)[5]
        windows = windows_by_pid[pid]
        preds = forest_predictions(forest, pid, windows, features_by_pid[pid])
        write_external_predictions(preds, tmp_path / f"{pid}.csv")
        from_file = load_external_predictions(tmp_path / f"{pid}.csv")
        _, in_process = predict_sequence(preds, windows, params, config)
        _, via_file = predict_sequence(from_file, windows, params, config)
        np.testing.assert_array_equal(in_process.pred_labels, via_file.pred_labels)

    def test_unlabeled_training_data(self, windows_by_pid, features_by_pid, config):
        pid = next(iter(windows_by_pid))
        unlabeled = [replace(w, label=None, label_coverage=0.0) for w in windows_by_pid[pid]]
        with pytest.raises(DegenerateTrainingError):
            train_models({pid: unlabeled}, {pid: features_by_pid[pid]}, config)
