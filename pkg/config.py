"""Pipeline configuration.

``config.json`` holds flat upper-case keys; every key has a default here, so an absent
file or an absent key falls back to the published parameters. CLI flags are applied
as overrides on top of the file.
"""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError
from forest import ForestConfig
from ingest import CsvSchema
from preprocess import FilterSpec, NonwearRule

logger = logging.getLogger(__name__)

CONFIG_ENV = "ACTIVITY_CONFIG"
JOBS_ENV = "ACTIVITY_JOBS"


class PipelineConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    # inputs and outputs; unset inputs resolve against the output directory
    recordings_dir: Optional[str] = Field(None, alias="RECORDINGS_DIR", description="Directory of recording CSVs.")
    label_mapping: Optional[str] = Field(None, alias="LABEL_MAPPING", description="annotation,label CSV.")
    metadata: Optional[str] = Field(None, alias="METADATA", description="pid,age_band,sex CSV.")
    external_preds_dir: Optional[str] = Field(None, alias="EXTERNAL_PREDS_DIR", description="Directory of external prediction CSVs.")
    output_dir: str = Field("output", alias="OUTPUT_DIR")

    # recording CSV layout
    time_column: str = Field("time", alias="TIME_COLUMN")
    x_column: str = Field("x", alias="X_COLUMN")
    y_column: str = Field("y", alias="Y_COLUMN")
    z_column: str = Field("z", alias="Z_COLUMN")
    annotation_column: str = Field("annotation", alias="ANNOTATION_COLUMN")
    time_format: Literal["iso", "epoch_ms"] = Field("epoch_ms", alias="TIME_FORMAT")

    # preprocessing
    filter_cutoff_hz: float = Field(20.0, gt=0, alias="FILTER_CUTOFF_HZ")
    filter_order: int = Field(4, ge=1, le=10, alias="FILTER_ORDER")
    nonwear_sd_threshold_g: float = Field(0.015, gt=0, alias="NONWEAR_SD_THRESHOLD_G")
    nonwear_min_duration_s: float = Field(5400.0, gt=0, alias="NONWEAR_MIN_DURATION_S")
    nonwear_window_s: float = Field(10.0, gt=0, alias="NONWEAR_WINDOW_S")
    calibrate: bool = Field(True, alias="CALIBRATE")
    window_duration_s: float = Field(30.0, gt=0, alias="WINDOW_DURATION_S")
    target_rate_hz: Optional[float] = Field(None, gt=0, alias="TARGET_RATE_HZ", description="Resample every recording to this rate.")

    # forest
    n_trees: int = Field(1000, ge=1, alias="N_TREES")
    max_features: int = Field(7, ge=1, le=63, alias="MAX_FEATURES")
    max_depth: Optional[int] = Field(None, ge=1, alias="MAX_DEPTH")
    min_samples_leaf: int = Field(1, ge=1, alias="MIN_SAMPLES_LEAF")
    bootstrap: bool = Field(True, alias="BOOTSTRAP")

    # hmm and correction
    hmm_epsilon: float = Field(1e-6, gt=0, lt=0.25, alias="HMM_EPSILON")
    gap_tolerance_s: float = Field(0.5, ge=0, alias="GAP_TOLERANCE_S")
    min_sleep_block_s: float = Field(3600.0, ge=0, alias="MIN_SLEEP_BLOCK_S")

    # evaluation
    seed: int = Field(42, alias="SEED")
    cv_folds: int = Field(5, ge=2, alias="CV_FOLDS")
    inner_validation_fraction: float = Field(0.2, gt=0, lt=1, alias="INNER_VALIDATION_FRACTION")
    subgroups: list[Literal["age_band", "sex"]] = Field(default_factory=list, alias="SUBGROUPS")
    jobs: int = Field(1, ge=1, alias="JOBS")

    @model_validator(mode="after")
    def _nested_settings_are_valid(self):
        # surfaces cross-field errors (e.g. non-wear duration shorter than its chunk) at load time
        try:
            self.nonwear_rule()
            self.filter_spec()
            self.forest_config()
        except ValidationError as e:
            raise ValueError(str(e))
        return self

    def csv_schema(self) -> CsvSchema:
        return CsvSchema(time_column=self.time_column, x_column=self.x_column, y_column=self.y_column,
                         z_column=self.z_column, annotation_column=self.annotation_column,
                         time_format=self.time_format)

    def filter_spec(self) -> FilterSpec:
        return FilterSpec(cutoff_hz=self.filter_cutoff_hz, order=self.filter_order)

    def nonwear_rule(self) -> NonwearRule:
        return NonwearRule(sd_threshold_g=self.nonwear_sd_threshold_g, min_duration_s=self.nonwear_min_duration_s,
                           window_s=self.nonwear_window_s)

    def forest_config(self) -> ForestConfig:
        return ForestConfig(n_trees=self.n_trees, max_features=self.max_features, max_depth=self.max_depth,
                            min_samples_leaf=self.min_samples_leaf, seed=self.seed, bootstrap=self.bootstrap)

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    @property
    def recordings_path(self) -> Path:
        return Path(self.recordings_dir) if self.recordings_dir else self.output_path / "recordings"

    @property
    def label_mapping_path(self) -> Path:
        return Path(self.label_mapping) if self.label_mapping else self.output_path / "label_mapping.csv"

    @property
    def metadata_path(self) -> Path:
        return Path(self.metadata) if self.metadata else self.output_path / "metadata.csv"

    def to_json_dict(self) -> dict:
        return self.model_dump(by_alias=True)


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> PipelineConfig:
    """Reads the config file (``path``, else $ACTIVITY_CONFIG, else defaults) and applies overrides.

    Overrides use field names (``seed``, ``jobs``, ...); None values are ignored.
    """
    path = path or os.getenv(CONFIG_ENV)
    values: dict = {}
    if path:
        try:
            with open(path, "r") as f:
                values = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        if not isinstance(values, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
    if "JOBS" not in values and os.getenv(JOBS_ENV):
        values["JOBS"] = os.getenv(JOBS_ENV)
    try:
        config = PipelineConfig.model_validate(values)
        if overrides:
            merged = {**config.model_dump(), **{k: v for k, v in overrides.items() if v is not None}}
            config = PipelineConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}")
    logger.debug(f"Loaded configuration from {path or 'defaults'}")
    return config


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config.to_json_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
