import numpy as np
import pandas as pd
import pytest

from errors import (
    EmptyInputError,
    InsufficientDataError,
    IrregularSamplingError,
    LabelParseError,
    MappingConflictError,
    MetadataError,
    OrderingError,
    SchemaError,
    UnmappedAnnotationError,
)
from ingest import (
    CsvSchema,
    format_times,
    load_label_mapping,
    load_subject_meta,
    map_annotations,
    parse_times,
    read_recording_csv,
    resample,
)
from labels import MISSING, IntensityLabel
from synthetic import generate_synthetic_cohort, write_synthetic_cohort

T0_MS = 1_704_067_200_000


def write_recording(path, n=200, step_ms=10, annotations=None, **columns):
    frame = pd.DataFrame({
        "time": T0_MS + np.arange(n) * step_ms,
        "x": np.linspace(0, 1, n),
        "y": np.zeros(n),
        "z": np.ones(n),
    })
    for name, values in columns.items():
        frame[name] = values
    if annotations is not None:
        frame["annotation"] = annotations
    frame.to_csv(path, index=False)
    return frame


class TestReadRecording:
    def test_epoch_ms(self, tmp_path):
        annotations = ["sleeping"] * 100 + [""] * 100
        write_recording(tmp_path / "P7.csv", annotations=annotations)
        rec = read_recording_csv(tmp_path / "P7.csv")
        assert rec.participant_id == "P7"
        assert rec.sample_rate_hz == pytest.approx(100.0)
        assert rec.t0 == pytest.approx(T0_MS / 1000)
        assert rec.samples.shape == (200, 3)
        assert rec.annotations[0] == "sleeping"
        assert rec.annotations[150] is None
        np.testing.assert_allclose(np.diff(rec.times_s), 0.01)

    def test_iso_times(self, tmp_path):
        frame = write_recording(tmp_path / "a.csv", n=50)
        frame["time"] = format_times(frame["time"] / 1000)
        frame.to_csv(tmp_path / "a.csv", index=False)
        rec = read_recording_csv(tmp_path / "a.csv", CsvSchema(time_format="iso"))
        assert rec.sample_rate_hz == pytest.approx(100.0)
        assert rec.t0 == pytest.approx(T0_MS / 1000)

    def test_missing_column(self, tmp_path):
        write_recording(tmp_path / "a.csv")
        pd.read_csv(tmp_path / "a.csv").drop(columns="z").to_csv(tmp_path / "a.csv", index=False)
        with pytest.raises(SchemaError, match="z"):
            read_recording_csv(tmp_path / "a.csv")

    def test_empty_file(self, tmp_path):
        (tmp_path / "a.csv").write_text("")
        with pytest.raises(EmptyInputError):
            read_recording_csv(tmp_path / "a.csv")

    def test_header_only(self, tmp_path):
        (tmp_path / "a.csv").write_text("time,x,y,z\n")
        with pytest.raises(EmptyInputError):
            read_recording_csv(tmp_path / "a.csv")

    def test_non_monotone(self, tmp_path):
        frame = write_recording(tmp_path / "a.csv")
        frame.loc[50, "time"] = frame.loc[49, "time"]
        frame.to_csv(tmp_path / "a.csv", index=False)
        with pytest.raises(OrderingError, match="row 50"):
            read_recording_csv(tmp_path / "a.csv")

    def test_irregular_rejected_unless_resampled(self, tmp_path):
        frame = write_recording(tmp_path / "a.csv")
        frame.loc[100:, "time"] += 5
        frame.to_csv(tmp_path / "a.csv", index=False)
        with pytest.raises(IrregularSamplingError):
            read_recording_csv(tmp_path / "a.csv")
        rec = read_recording_csv(tmp_path / "a.csv", resample_hz=100.0)
        np.testing.assert_array_equal(rec.times_s, np.arange(rec.n_samples) / 100.0)
        assert rec.sample_rate_hz == 100.0


class TestLabelMapping:
    def test_lookup_is_normalized(self, tmp_path):
        (tmp_path / "m.csv").write_text("annotation,label\n  Sitting Desk Work ,sedentary\n7030 sleeping,sleep\n")
        mapping = load_label_mapping(tmp_path / "m.csv")
        assert mapping.lookup("sitting desk work") == IntensityLabel.SEDENTARY
        assert mapping.lookup("7030 SLEEPING  ") == IntensityLabel.SLEEP

    def test_conflict(self, tmp_path):
        (tmp_path / "m.csv").write_text("annotation,label\nwalking,light\nWalking ,mvpa\n")
        with pytest.raises(MappingConflictError):
            load_label_mapping(tmp_path / "m.csv")

    def test_unknown_label(self, tmp_path):
        (tmp_path / "m.csv").write_text("annotation,label\nwalking,vigorous\n")
        with pytest.raises(LabelParseError):
            load_label_mapping(tmp_path / "m.csv")

    def test_map_annotations(self, tmp_path):
        write_recording(tmp_path / "r.csv", n=4, annotations=["sleeping", "", "Walking", "walking"])
        (tmp_path / "m.csv").write_text("annotation,label\nsleeping,sleep\nwalking,light\n")
        rec = map_annotations(read_recording_csv(tmp_path / "r.csv"), load_label_mapping(tmp_path / "m.csv"))
        assert rec.annotations is None
        np.testing.assert_array_equal(rec.labels, [0, MISSING, 2, 2])

    def test_unmapped_annotation_is_named(self, tmp_path):
        write_recording(tmp_path / "r.csv", n=3, annotations=["sleeping", "juggling", ""])
        (tmp_path / "m.csv").write_text("annotation,label\nsleeping,sleep\n")
        with pytest.raises(UnmappedAnnotationError, match="juggling"):
            map_annotations(read_recording_csv(tmp_path / "r.csv"), load_label_mapping(tmp_path / "m.csv"))


class TestResample:
    def test_linear_signal_is_preserved(self, make_recording):
        n = 101
        samples = np.column_stack([np.arange(n) * 0.01, np.zeros(n), np.ones(n)])
        rec = make_recording(samples, rate=100.0)
        out = resample(rec, 50.0)
        assert out.n_samples == 51
        np.testing.assert_allclose(out.samples[:, 0], np.arange(51) * 0.02, atol=1e-12)

    def test_labels_follow_nearest_sample(self, make_recording):
        rec = make_recording(np.zeros((4, 3)), rate=1.0, labels=[0, 0, 3, 3])
        out = resample(rec, 4.0)
        np.testing.assert_array_equal(out.labels, [0, 0, 0, 0, 0, 0, 0, 3, 3, 3, 3, 3, 3])

    def test_needs_two_samples(self, make_recording):
        with pytest.raises(InsufficientDataError):
            resample(make_recording(np.zeros((1, 3))), 10.0)


class TestSubjectMeta:
    def test_load(self, tmp_path):
        (tmp_path / "meta.csv").write_text("pid,age_band,sex\nP1,18-29,female\nP2,53+,Male\n")
        meta = load_subject_meta(tmp_path / "meta.csv")
        assert meta["P2"].sex == "male"
        assert meta["P1"].age_band == "18-29"

    def test_invalid_band(self, tmp_path):
        (tmp_path / "meta.csv").write_text("pid,age_band,sex\nP1,10-17,female\n")
        with pytest.raises(MetadataError, match="P1"):
            load_subject_meta(tmp_path / "meta.csv")


def test_time_round_trip_to_milliseconds():
    stamps = np.array([1_704_067_200.0, 1_704_067_230.125])
    np.testing.assert_allclose(parse_times(format_times(stamps)), stamps, atol=1e-9)


class TestResampleProperties:
    def test_sine_to_30hz(self, make_recording):
        t = np.arange(3000) / 100.0
        wave = np.sin(2 * np.pi * t)
        out = resample(make_recording(np.column_stack([wave, wave, wave]), rate=100.0), 30.0)
        expected = np.sin(2 * np.pi * out.times_s)
        assert np.max(np.abs(out.samples[:, 0] - expected)) < 1e-3

    def test_idempotent_on_uniform_grid(self, make_recording):
        rng = np.random.default_rng(4)
        rec = make_recording(rng.normal(size=(1000, 3)), rate=100.0, labels=rng.integers(-1, 4, size=1000))
        once = resample(rec, 30.0)
        twice = resample(once, 30.0)
        np.testing.assert_array_equal(twice.times_s, once.times_s)
        np.testing.assert_array_equal(twice.samples, once.samples)
        np.testing.assert_array_equal(twice.labels, once.labels)

    @pytest.mark.parametrize("rate", [25.0, 50.0, 100.0])
    def test_inferred_rate(self, tmp_path, rate):
        cohort = generate_synthetic_cohort(1, seed=9, hours=0.1, sample_rate_hz=rate)
        write_synthetic_cohort(cohort, tmp_path)
        rec = read_recording_csv(tmp_path / "recordings" / "P001.csv")
        assert rec.sample_rate_hz == pytest.approx(rate, rel=1e-3)
