"""Training, prediction and cross-validated evaluation across participants.

The same two helpers, ``train_models`` and ``predict_sequence``, back the ``train`` and
``predict`` commands and every cross-validation fold.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from config import PipelineConfig
from errors import DegenerateTrainingError, InputError
from evaluate import (
    AgreementReport,
    Composition,
    ConfusionMatrix,
    FoldAssignment,
    MetricsReport,
    SubgroupReport,
    compare_metrics,
    composition,
    composition_agreement,
    compositions_frame,
    per_participant_metrics,
    stratified_group_kfold,
    subgroup_report,
)
from external import ExternalPredictions, align_predictions, from_probabilities
from features import FEATURE_MANIFEST_VERSION, FEATURE_NAMES, extract_feature_matrix
from forest import ForestModel, oob_accuracy, predict_proba, train_forest
from hmm import HmmParams, LabeledSequence, smooth_sequence, train_emission, train_prior, train_transition
from ingest import SubjectMeta
from labels import MISSING
from postprocess import correct_sequence
from preprocess import Window

logger = logging.getLogger(__name__)


def window_labels(windows: list[Window]) -> np.ndarray:
    return np.array([w.label_index for w in windows], dtype=np.int64)


def window_times(windows: list[Window]) -> np.ndarray:
    return np.array([w.start_time for w in windows], dtype=float)


def truth_sequence(pid: str, windows: list[Window]) -> LabeledSequence:
    """All windows of a participant with their true labels and no predictions."""
    return LabeledSequence(
        participant_id=pid,
        times=window_times(windows),
        pred_labels=np.full(len(windows), MISSING, dtype=np.int64),
        true_labels=window_labels(windows),
    )


def train_hmm_parts(windows_by_pid: dict[str, list[Window]], config: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Prior and transition matrix from the true labels of the given participants."""
    sequences = [truth_sequence(pid, windows) for pid, windows in windows_by_pid.items()]
    pooled = np.concatenate([seq.true_labels for seq in sequences])
    prior = train_prior(pooled, config.hmm_epsilon)
    transition = train_transition(sequences, config.window_duration_s, config.hmm_epsilon, config.gap_tolerance_s)
    return prior, transition


def train_models(windows_by_pid: dict[str, list[Window]], features_by_pid: dict[str, np.ndarray],
                 config: PipelineConfig, jobs: int = 1) -> tuple[ForestModel, HmmParams]:
    """Forest on every labeled window; HMM prior/transition from truth and emission from forest OOB."""
    pids = sorted(windows_by_pid)
    labels = np.concatenate([window_labels(windows_by_pid[pid]) for pid in pids])
    features = np.vstack([features_by_pid[pid] for pid in pids])
    labeled = labels != MISSING
    if not labeled.any():
        raise DegenerateTrainingError("forest: no labeled windows to train on")
    forest = train_forest(features[labeled], labels[labeled], config.forest_config(),
                          feature_names=FEATURE_NAMES, feature_manifest_version=FEATURE_MANIFEST_VERSION, jobs=jobs)
    if not forest.oob_valid.any():
        raise DegenerateTrainingError("hmm: no out-of-bag estimates to train the emission matrix (is bootstrap off?)")
    prior, transition = train_hmm_parts({pid: windows_by_pid[pid] for pid in pids}, config)
    emission = train_emission(labels[labeled][forest.oob_valid], forest.oob[forest.oob_valid], config.hmm_epsilon)
    return forest, HmmParams(prior=prior, transition=transition, emission=emission)


def decode(seq: LabeledSequence, params: Optional[HmmParams], config: PipelineConfig,
           use_hmm: bool = True, use_sleep_correction: bool = True) -> LabeledSequence:
    if use_hmm and params is not None:
        seq = smooth_sequence(seq, params, config.window_duration_s, config.gap_tolerance_s)
    if use_sleep_correction:
        seq = correct_sequence(seq, config.window_duration_s, config.min_sleep_block_s)
    return seq


def forest_predictions(forest: ForestModel, pid: str, windows: list[Window], features: np.ndarray) -> ExternalPredictions:
    return from_probabilities(pid, window_times(windows), predict_proba(forest, features), source_tag="forest")


def predict_sequence(preds: ExternalPredictions, windows: list[Window], params: Optional[HmmParams],
                     config: PipelineConfig, use_hmm: bool = True,
                     use_sleep_correction: bool = True) -> tuple[LabeledSequence, LabeledSequence]:
    """Aligns probabilities to windows and decodes; returns (raw argmax, final) sequences.

    In-process forest output and probabilities read from file take this same path.
    """
    raw = align_predictions(preds, windows, config.gap_tolerance_s)
    return raw, decode(raw, params, config, use_hmm, use_sleep_correction)


@dataclass
class ModelResults:
    """Evaluation of one model over all test folds."""
    name: str
    sequences: dict[str, LabeledSequence]
    raw_sequences: dict[str, LabeledSequence]
    metrics: MetricsReport
    raw_metrics: MetricsReport
    pooled: ConfusionMatrix
    true_compositions: list[Composition]
    pred_compositions: list[Composition]
    agreement: Optional[AgreementReport]
    subgroups: dict[str, dict[str, SubgroupReport]] = field(default_factory=dict)


@dataclass
class ReportBundle:
    folds: FoldAssignment
    forest: ModelResults
    external: Optional[ModelResults] = None
    comparison: Optional[pd.DataFrame] = None
    model_agreement: Optional[AgreementReport] = None
    oob_accuracy: list[float] = field(default_factory=list)


def _evaluated(seq: LabeledSequence) -> np.ndarray:
    return (seq.true_labels != MISSING) & (seq.pred_labels != MISSING)


def _summarize(name: str, sequences: dict[str, LabeledSequence], raw: dict[str, LabeledSequence],
               config: PipelineConfig, meta: Optional[dict[str, SubjectMeta]]) -> ModelResults:
    pids = [pid for pid in sorted(sequences) if _evaluated(sequences[pid]).any()]
    dropped = sorted(set(sequences) - set(pids))
    if dropped:
        logger.warning(f"{name}: no evaluated windows for {', '.join(dropped)}")
    if not pids:
        raise InputError(f"{name}: no participant has labeled windows to evaluate")
    truth = {pid: sequences[pid].true_labels for pid in pids}
    final = {pid: sequences[pid].pred_labels for pid in pids}
    metrics = per_participant_metrics(truth, final)
    raw_metrics = per_participant_metrics({pid: raw[pid].true_labels for pid in pids},
                                          {pid: raw[pid].pred_labels for pid in pids})
    pooled = ConfusionMatrix.from_labels(np.concatenate(list(truth.values())), np.concatenate(list(final.values())))

    true_comp, pred_comp = [], []
    for pid in pids:
        mask = _evaluated(sequences[pid])
        true_comp.append(composition(truth[pid][mask], config.window_duration_s, pid))
        pred_comp.append(composition(final[pid][mask], config.window_duration_s, pid))
    agreement = composition_agreement(true_comp, pred_comp) if len(pids) >= 2 else None

    results = ModelResults(name, sequences, raw, metrics, raw_metrics, pooled, true_comp, pred_comp, agreement)
    for grouping in config.subgroups:
        results.subgroups[grouping] = subgroup_report(metrics, meta or {}, grouping, true_comp, pred_comp)
    logger.info(f"{name}: macro F1 {metrics.mean('macro_f1'):.3f} ± {metrics.sd('macro_f1'):.3f}, "
                f"kappa {metrics.mean('cohen_kappa'):.3f} ± {metrics.sd('cohen_kappa'):.3f}")
    return results


def run_pipeline_cv(windows_by_pid: dict[str, list[Window]], config: PipelineConfig,
                    meta: Optional[dict[str, SubjectMeta]] = None,
                    external: Optional[dict[str, ExternalPredictions]] = None,
                    features_by_pid: Optional[dict[str, np.ndarray]] = None, jobs: int = 1) -> ReportBundle:
    """Stratified group k-fold evaluation of the forest (and optionally an external model).

    Per fold the forest trains on the training participants; the HMM prior and transition
    come from their true labels and the emission from forest OOB probabilities. An external
    model's emission is trained on its probabilities for the fold's inner validation
    participants instead.
    """
    pids = sorted(windows_by_pid)
    if features_by_pid is None:
        features_by_pid = {pid: extract_feature_matrix(windows_by_pid[pid], jobs) for pid in pids}
    folds = stratified_group_kfold({pid: window_labels(windows_by_pid[pid]) for pid in pids},
                                   config.cv_folds, config.seed, config.inner_validation_fraction)

    forest_final, forest_raw = {}, {}
    ext_final, ext_raw = {}, {}
    oob_accuracies = []
    for f in range(folds.k):
        train_pids, test_pids = folds.train_pids(f), folds.test_pids(f)
        train_windows = {pid: windows_by_pid[pid] for pid in train_pids}
        forest, params = train_models(train_windows, {pid: features_by_pid[pid] for pid in train_pids}, config, jobs)
        train_labels = np.concatenate([window_labels(train_windows[pid]) for pid in sorted(train_pids)])
        oob_accuracies.append(oob_accuracy(forest, train_labels[train_labels != MISSING]))
        logger.info(f"Fold {f + 1}/{folds.k}: {len(train_pids)} training, {len(test_pids)} test participants")

        for pid in test_pids:
            preds = forest_predictions(forest, pid, windows_by_pid[pid], features_by_pid[pid])
            forest_raw[pid], forest_final[pid] = predict_sequence(preds, windows_by_pid[pid], params, config)

        if external is not None:
            inner = [pid for pid in folds.inner_validation[f] if pid in external]
            if not inner:
                raise DegenerateTrainingError(f"hmm: fold {f}: no external predictions for the inner validation participants")
            aligned = [align_predictions(external[pid], windows_by_pid[pid], config.gap_tolerance_s) for pid in inner]
            ext_params = HmmParams(
                prior=params.prior,
                transition=params.transition,
                emission=train_emission(np.concatenate([s.true_labels for s in aligned]),
                                        np.vstack([s.pred_probs for s in aligned]), config.hmm_epsilon),
            )
            for pid in test_pids:
                if pid not in external:
                    logger.warning(f"No external predictions for test participant '{pid}'")
                    continue
                ext_raw[pid], ext_final[pid] = predict_sequence(external[pid], windows_by_pid[pid], ext_params, config)

    bundle = ReportBundle(folds=folds, forest=_summarize("forest", forest_final, forest_raw, config, meta),
                          oob_accuracy=oob_accuracies)
    if external is not None:
        bundle.external = _summarize("external", ext_final, ext_raw, config, meta)
        shared = sorted(set(bundle.forest.metrics.per_participant["participant_id"])
                        & set(bundle.external.metrics.per_participant["participant_id"]))
        if len(shared) >= 2:
            bundle.comparison = compare_metrics(_restrict(bundle.forest.metrics, shared),
                                                _restrict(bundle.external.metrics, shared))
            forest_comp = {c.participant_id: c for c in bundle.forest.pred_compositions}
            ext_comp = {c.participant_id: c for c in bundle.external.pred_compositions}
            bundle.model_agreement = composition_agreement([forest_comp[pid] for pid in shared],
                                                           [ext_comp[pid] for pid in shared])
    return bundle


def _restrict(report: MetricsReport, pids: list[str]) -> MetricsReport:
    frame = report.per_participant.set_index("participant_id").loc[pids].reset_index()
    return MetricsReport(frame)


# --- report bundle files ---

def _clean(value):
    """JSON-safe copy: numpy scalars to Python, NaN and infinities to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _model_summary(results: ModelResults) -> dict:
    summary = {
        "metrics": results.metrics.summary(),
        "metrics_before_smoothing": results.raw_metrics.summary(),
        "per_participant": results.metrics.per_participant.to_dict(orient="records"),
        "pooled_confusion_matrix": results.pooled.counts,
        "agreement": None if results.agreement is None else results.agreement.table.to_dict(orient="records"),
        "subgroups": {
            grouping: {
                value: {
                    "n_participants": report.metrics.n_participants,
                    "metrics": report.metrics.summary(),
                    "agreement": None if report.agreement is None else report.agreement.table.to_dict(orient="records"),
                }
                for value, report in groups.items()
            }
            for grouping, groups in results.subgroups.items()
        },
    }
    return summary


def _write_model_files(results: ModelResults, outdir: Path, prefix: str, meta: Optional[dict[str, SubjectMeta]]) -> None:
    per_participant = results.metrics.per_participant.copy()
    if meta:
        per_participant["age_band"] = [meta[pid].age_band if pid in meta else "" for pid in per_participant["participant_id"]]
        per_participant["sex"] = [meta[pid].sex if pid in meta else "" for pid in per_participant["participant_id"]]
    per_participant.to_csv(outdir / f"{prefix}per_participant_metrics.csv", index=False, float_format="%.17g")
    results.pooled.to_frame().to_csv(outdir / f"{prefix}confusion_matrix.csv")

    true_frame = compositions_frame(results.true_compositions)
    pred_frame = compositions_frame(results.pred_compositions)
    merged = true_frame.merge(pred_frame, on="participant_id", suffixes=("_true", "_pred"))
    merged.to_csv(outdir / f"{prefix}compositions.csv", index=False, float_format="%.17g")
    if results.agreement is not None:
        results.agreement.table.to_csv(outdir / f"{prefix}agreement.csv", index=False, float_format="%.17g")
        points = results.agreement.points
        points[["participant_id", "label", "mean", "difference"]].to_csv(
            outdir / f"{prefix}bland_altman.csv", index=False, float_format="%.17g")
        points[["participant_id", "label", "percentage_error"]].to_csv(
            outdir / f"{prefix}boxplot.csv", index=False, float_format="%.17g")
    for grouping, groups in results.subgroups.items():
        rows = [{"subgroup": value, **{f"{m}_{stat}": v for m, s in report.metrics.summary().items() for stat, v in s.items()},
                 "n_participants": report.metrics.n_participants}
                for value, report in groups.items()]
        pd.DataFrame(rows).to_csv(outdir / f"{prefix}subgroups_{grouping}.csv", index=False, float_format="%.17g")


def write_report_bundle(bundle: ReportBundle, outdir, meta: Optional[dict[str, SubjectMeta]] = None) -> list[Path]:
    """Writes report.json, folds.json and the CSV tables; returns the written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    report = {
        "feature_manifest_version": FEATURE_MANIFEST_VERSION,
        "folds": bundle.folds.to_dict(),
        "oob_accuracy_per_fold": bundle.oob_accuracy,
        "forest": _model_summary(bundle.forest),
    }
    if bundle.external is not None:
        report["external"] = _model_summary(bundle.external)
        report["comparison"] = None if bundle.comparison is None else bundle.comparison.to_dict(orient="records")
        report["model_agreement"] = None if bundle.model_agreement is None else bundle.model_agreement.table.to_dict(orient="records")
    with open(outdir / "report.json", "w") as f:
        json.dump(_clean(report), f, indent=2, sort_keys=True)
    with open(outdir / "folds.json", "w") as f:
        json.dump(_clean(bundle.folds.to_dict()), f, indent=2, sort_keys=True)

    _write_model_files(bundle.forest, outdir, "", meta)
    if bundle.external is not None:
        _write_model_files(bundle.external, outdir, "external_", meta)
        if bundle.comparison is not None:
            bundle.comparison.to_csv(outdir / "model_comparison.csv", index=False, float_format="%.17g")
        if bundle.model_agreement is not None:
            bundle.model_agreement.table.to_csv(outdir / "model_agreement.csv", index=False, float_format="%.17g")
    written = sorted(outdir.iterdir())
    logger.info(f"Wrote {len(written)} report file(s) to {outdir}")
    return written
