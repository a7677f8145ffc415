"""Command-line front end.

    python cli.py synth --n 20 --output run
    python cli.py preprocess --output run
    python cli.py train --output run
    python cli.py predict --output run
    python cli.py evaluate --output run --subgroups age_band,sex

Every command reads config.json (or --config / $ACTIVITY_CONFIG), applies the flags on
top, and writes below --output: preprocessed/, models/, predictions/, reports/ and
run-manifest.json.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import pandas as pd
from dotenv import load_dotenv
from joblib import Parallel, delayed

from config import PipelineConfig, config_hash, load_config
from errors import CompatibilityError, ConfigError, DegenerateTrainingError, InputError, MetadataError, PipelineError
from evaluate import composition, compositions_frame
from external import load_external_predictions, write_external_predictions
from features import (
    FEATURE_MANIFEST_VERSION,
    FEATURE_NAMES,
    extract_feature_matrix,
    load_feature_table,
    save_feature_table,
)
from forest import MODEL_FORMAT_VERSION, ForestModel, load_forest, save_forest
from hmm import PARAMS_FORMAT_VERSION, load_hmm, save_hmm
from ingest import format_times, load_label_mapping, load_subject_meta, map_annotations, read_recording_csv
from labels import label_to_name
from pipeline import forest_predictions, predict_sequence, run_pipeline_cv, train_models, write_report_bundle
from preprocess import load_windows, preprocess_recording, save_windows
from synthetic import generate_synthetic_cohort, write_synthetic_cohort

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_FATAL = 2


# --- output layout ---

def windows_dir(config: PipelineConfig) -> Path:
    return config.output_path / "preprocessed" / "windows"


def features_dir(config: PipelineConfig) -> Path:
    return config.output_path / "preprocessed" / "features"


def models_dir(config: PipelineConfig) -> Path:
    return config.output_path / "models"


def update_run_manifest(config: PipelineConfig, command: str, extra: Optional[dict] = None) -> None:
    """Records config hash, seed and artifact versions per command; no timestamps, so reruns match."""
    path = config.output_path / "run-manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest["versions"] = {
        "feature_manifest": FEATURE_MANIFEST_VERSION,
        "forest_format": MODEL_FORMAT_VERSION,
        "hmm_format": PARAMS_FORMAT_VERSION,
    }
    manifest.setdefault("commands", {})[command] = {
        "config_hash": config_hash(config),
        "seed": config.seed,
        **(extra or {}),
    }
    config.output_path.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def report_failures(failures: dict[str, str]) -> int:
    if not failures:
        return EXIT_OK
    for pid, message in sorted(failures.items()):
        logger.error(f"{pid}: {message}")
        print(f"FAILED {pid}: {message}", file=sys.stderr)
    return EXIT_PARTIAL


def load_preprocessed(config: PipelineConfig) -> tuple[dict, dict]:
    """Windows and feature matrices for every preprocessed participant."""
    paths = sorted(windows_dir(config).glob("*.csv"))
    if not paths:
        raise PipelineError(f"No preprocessed windows under {windows_dir(config)}; run 'preprocess' first")
    windows_by_pid, features_by_pid = {}, {}
    for path in paths:
        windows = load_windows(path)
        if not windows:
            continue
        pid = windows[0].participant_id
        table = features_dir(config) / f"{pid}.csv"
        if table.exists():
            features = load_feature_table(table)[FEATURE_NAMES].to_numpy(dtype=float)
        else:
            features = extract_feature_matrix(windows, config.jobs)
        windows_by_pid[pid] = windows
        features_by_pid[pid] = features
    return windows_by_pid, features_by_pid


# --- commands ---

def cmd_synth(config: PipelineConfig, args) -> int:
    cohort = generate_synthetic_cohort(args.n, seed=config.seed, hours=args.hours, sample_rate_hz=args.sample_rate,
                                       window_duration_s=config.window_duration_s)
    write_synthetic_cohort(cohort, config.output_path)
    update_run_manifest(config, "synth", {"n": args.n, "hours": args.hours, "sample_rate_hz": args.sample_rate})
    return EXIT_OK


def _preprocess_one(path: Path, config: PipelineConfig, mapping) -> tuple[str, Optional[dict], Optional[str]]:
    pid = path.stem
    try:
        recording = read_recording_csv(path, config.csv_schema(), participant_id=pid, resample_hz=config.target_rate_hz)
        if recording.annotations is not None and mapping is not None:
            recording = map_annotations(recording, mapping)
        windows, log_entry = preprocess_recording(recording, config.filter_spec(), config.nonwear_rule(),
                                                  config.window_duration_s, config.calibrate)
        save_windows(windows, windows_dir(config) / pid)
        # features from the stored precision, so later commands see identical values
        stored = load_windows(windows_dir(config) / pid)
        save_feature_table(stored, extract_feature_matrix(stored), features_dir(config) / f"{pid}.csv")
        return pid, log_entry, None
    except Exception as e:
        return pid, None, f"{type(e).__name__}: {e}"


def cmd_preprocess(config: PipelineConfig, args) -> int:
    paths = sorted(config.recordings_path.glob("*.csv"))
    if not paths:
        raise PipelineError(f"No recording CSVs in {config.recordings_path}")
    mapping = load_label_mapping(config.label_mapping_path) if config.label_mapping_path.exists() else None
    if mapping is None:
        logger.warning(f"No label mapping at {config.label_mapping_path}; annotations are ignored")
    if config.jobs == 1:
        results = [_preprocess_one(path, config, mapping) for path in paths]
    else:
        results = Parallel(n_jobs=config.jobs)(delayed(_preprocess_one)(path, config, mapping) for path in paths)

    entries = [entry for _, entry, _ in results if entry is not None]
    failures = {pid: error for pid, _, error in results if error is not None}
    log_path = config.output_path / "preprocessed" / "preprocess_log.json"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text(json.dumps({"participants": entries, "failed": failures}, indent=2, sort_keys=True) + "\n")
    logger.info(f"Preprocessed {len(entries)} of {len(paths)} recording(s)")
    update_run_manifest(config, "preprocess", {"n_ok": len(entries), "n_failed": len(failures)})
    return report_failures(failures)


def cmd_train(config: PipelineConfig, args) -> int:
    windows_by_pid, features_by_pid = load_preprocessed(config)
    forest, params = train_models(windows_by_pid, features_by_pid, config, config.jobs)
    save_forest(forest, models_dir(config) / "forest.npz")
    save_hmm(params, models_dir(config) / "hmm.txt", config.hmm_epsilon)
    update_run_manifest(config, "train", {"participants": sorted(windows_by_pid), "n_trees": forest.n_trees})
    logger.info(f"Saved models to {models_dir(config)}")
    return EXIT_OK


def check_compatibility(forest: ForestModel) -> None:
    if forest.feature_manifest_version != FEATURE_MANIFEST_VERSION or forest.feature_names != FEATURE_NAMES:
        raise CompatibilityError(
            f"Model was trained on feature manifest v{forest.feature_manifest_version}; "
            f"this build extracts v{FEATURE_MANIFEST_VERSION}"
        )


def cmd_predict(config: PipelineConfig, args) -> int:
    forest = load_forest(models_dir(config) / "forest.npz")
    check_compatibility(forest)
    params = None if args.no_hmm else load_hmm(models_dir(config) / "hmm.txt")
    windows_by_pid, features_by_pid = load_preprocessed(config)
    external_dir = Path(args.external_preds or config.external_preds_dir) if (args.external_preds or config.external_preds_dir) else None
    out = config.output_path / "predictions"
    out.mkdir(parents=True, exist_ok=True)

    compositions, failures = [], {}
    for pid, windows in windows_by_pid.items():
        try:
            if external_dir is not None:
                path = external_dir / f"{pid}.csv"
                if not path.exists():
                    raise InputError(f"No external predictions at {path}")
                preds = load_external_predictions(path, config.time_format)
            else:
                preds = forest_predictions(forest, pid, windows, features_by_pid[pid])
                if args.export_probs:
                    write_external_predictions(preds, out / "probs" / f"{pid}.csv", config.time_format)
            raw, final = predict_sequence(preds, windows, params, config, use_hmm=not args.no_hmm,
                                          use_sleep_correction=not args.no_sleep_correction)
        except Exception as e:
            failures[pid] = f"{type(e).__name__}: {e}"
            continue
        frame = pd.DataFrame({
            "time": format_times(final.times),
            "label": [label_to_name(v) for v in final.pred_labels],
            "raw_label": [label_to_name(v) for v in raw.pred_labels],
            "true_label": [label_to_name(v) for v in final.true_labels],
        })
        frame.to_csv(out / f"{pid}.csv", index=False)
        compositions.append(composition(final.pred_labels, config.window_duration_s, pid))

    compositions_frame(compositions).to_csv(out / "compositions.csv", index=False, float_format="%.17g")
    update_run_manifest(config, "predict", {
        "external_preds": str(external_dir) if external_dir else None,
        "hmm": not args.no_hmm,
        "sleep_correction": not args.no_sleep_correction,
    })
    return report_failures(failures)


def cmd_evaluate(config: PipelineConfig, args) -> int:
    windows_by_pid, features_by_pid = load_preprocessed(config)
    meta = load_subject_meta(config.metadata_path) if config.metadata_path.exists() else None
    if config.subgroups and meta is None:
        raise MetadataError(f"Subgroup reports need participant metadata; {config.metadata_path} does not exist")
    external = None
    external_dir = args.external_preds or config.external_preds_dir
    if external_dir:
        external = {}
        for pid in windows_by_pid:
            path = Path(external_dir) / f"{pid}.csv"
            if path.exists():
                external[pid] = load_external_predictions(path, config.time_format)
    bundle = run_pipeline_cv(windows_by_pid, config, meta=meta, external=external,
                             features_by_pid=features_by_pid, jobs=config.jobs)
    write_report_bundle(bundle, config.output_path / "reports", meta)
    update_run_manifest(config, "evaluate", {"k": config.cv_folds, "subgroups": list(config.subgroups),
                                             "external_preds": str(external_dir) if external_dir else None})
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="JSON config file (default: $ACTIVITY_CONFIG, else built-in defaults)")
    common.add_argument("--seed", type=int, help="Seed for synthesis, folds and forest training")
    common.add_argument("--jobs", type=int, help="Worker processes (default: $ACTIVITY_JOBS or 1)")
    common.add_argument("--output", type=str, help="Output directory")
    common.add_argument("--recordings", type=str, help="Directory of recording CSVs (default: <output>/recordings)")
    common.add_argument("--mapping", type=str, help="Annotation mapping CSV (default: <output>/label_mapping.csv)")
    common.add_argument("--metadata", type=str, help="Subject metadata CSV (default: <output>/metadata.csv)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(description="Wrist accelerometer activity-intensity pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Write a synthetic labeled cohort")
    synth.add_argument("--n", type=int, required=True, help="Number of participants")
    synth.add_argument("--hours", type=float, default=2.0, help="Hours per participant (default: 2)")
    synth.add_argument("--sample-rate", type=float, default=50.0, help="Sample rate in Hz (default: 50)")

    sub.add_parser("preprocess", parents=[common], help="Filter, clean, calibrate and window recordings")
    sub.add_parser("train", parents=[common], help="Train forest and HMM on all preprocessed windows")

    predict = sub.add_parser("predict", parents=[common], help="Label windows with the trained models")
    predict.add_argument("--external-preds", type=str, help="Directory of <pid>.csv probability files to use instead of the forest")
    predict.add_argument("--no-hmm", action="store_true", help="Skip HMM smoothing")
    predict.add_argument("--no-sleep-correction", action="store_true", help="Skip sleep-block correction")
    predict.add_argument("--export-probs", action="store_true", help="Also write forest probabilities to predictions/probs/")

    evaluate = sub.add_parser("evaluate", parents=[common], help="Cross-validated evaluation and report bundle")
    evaluate.add_argument("--k", type=int, help="Number of folds")
    evaluate.add_argument("--subgroups", type=str, help="Comma-separated groupings: age_band,sex")
    evaluate.add_argument("--external-preds", type=str, help="Directory of <pid>.csv probabilities of a second model")
    return parser


def overrides_from_args(args) -> dict:
    overrides = {
        "seed": args.seed,
        "jobs": args.jobs,
        "output_dir": args.output,
        "recordings_dir": args.recordings,
        "label_mapping": args.mapping,
        "metadata": args.metadata,
    }
    if getattr(args, "k", None) is not None:
        overrides["cv_folds"] = args.k
    if getattr(args, "subgroups", None):
        overrides["subgroups"] = [s.strip() for s in args.subgroups.split(",") if s.strip()]
    return overrides


def main(argv: Optional[list[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    if args.command == "synth" and args.n < 1:
        parser.error("--n must be at least 1")

    try:
        config = load_config(args.config, overrides_from_args(args))
        return COMMANDS[args.command](config, args)
    except (ConfigError, DegenerateTrainingError, CompatibilityError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FATAL
    except PipelineError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FATAL
    except Exception as e:
        logger.exception(f"'{args.command}' failed unexpectedly")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
