"""Cross-validation folds, classification metrics and activity-composition agreement."""
import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import confusion_matrix

from errors import InputError, InsufficientDataError, MetadataError, PairingError
from ingest import SubjectMeta
from labels import LABEL_NAMES, MISSING, N_CLASSES

logger = logging.getLogger(__name__)

METRIC_NAMES = ["accuracy", "balanced_accuracy", "macro_f1", "cohen_kappa"]
AGREEMENT = 1.96
Grouping = Literal["age_band", "sex"]


# --- confusion matrices and metrics ---

@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true labels, columns predicted labels."""
    counts: np.ndarray

    @classmethod
    def from_labels(cls, true_labels: np.ndarray, pred_labels: np.ndarray) -> "ConfusionMatrix":
        """Windows where either side is MISSING are left out."""
        true_labels = np.asarray(true_labels, dtype=np.int64)
        pred_labels = np.asarray(pred_labels, dtype=np.int64)
        keep = (true_labels != MISSING) & (pred_labels != MISSING)
        if not keep.any():
            return cls(np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))
        counts = confusion_matrix(true_labels[keep], pred_labels[keep], labels=list(range(N_CLASSES)))
        return cls(counts.astype(np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.counts, index=pd.Index(LABEL_NAMES, name="true"), columns=LABEL_NAMES)


def _checked(cm: ConfusionMatrix) -> np.ndarray:
    counts = np.asarray(cm.counts, dtype=float)
    if counts.sum() <= 0:
        raise InputError("Metrics need a confusion matrix with at least one window")
    return counts


def accuracy(cm: ConfusionMatrix) -> float:
    counts = _checked(cm)
    return float(np.trace(counts) / counts.sum())


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean recall over classes with at least one true window."""
    counts = _checked(cm)
    support = counts.sum(axis=1)
    present = support > 0
    return float(np.mean(np.diag(counts)[present] / support[present]))


def macro_f1(cm: ConfusionMatrix) -> float:
    """Mean F1 over classes seen in truth or prediction; F1 is 0 for a class with no true positives."""
    counts = _checked(cm)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    present = (counts.sum(axis=0) + counts.sum(axis=1)) > 0
    denominator = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denominator, out=np.zeros_like(tp), where=denominator > 0)
    return float(np.mean(f1[present]))


def cohen_kappa(cm: ConfusionMatrix) -> float:
    counts = _checked(cm)
    total = counts.sum()
    observed = np.trace(counts) / total
    expected = float(np.sum(counts.sum(axis=0) * counts.sum(axis=1)) / total ** 2)
    if expected >= 1.0:
        # a single class on both sides: agreement is perfect
        return 1.0
    return float((observed - expected) / (1.0 - expected))


def all_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    return {
        "accuracy": accuracy(cm),
        "balanced_accuracy": balanced_accuracy(cm),
        "macro_f1": macro_f1(cm),
        "cohen_kappa": cohen_kappa(cm),
    }


@dataclass(frozen=True)
class MetricsReport:
    """One row per participant plus mean and sample SD of every metric."""
    per_participant: pd.DataFrame

    @property
    def n_participants(self) -> int:
        return len(self.per_participant)

    def mean(self, metric: str) -> float:
        return float(self.per_participant[metric].mean())

    def sd(self, metric: str) -> float:
        if self.n_participants < 2:
            return 0.0
        return float(self.per_participant[metric].std(ddof=1))

    def summary(self) -> dict[str, dict[str, float]]:
        return {metric: {"mean": self.mean(metric), "sd": self.sd(metric)} for metric in METRIC_NAMES}


def per_participant_metrics(true_by_pid: dict[str, np.ndarray], pred_by_pid: dict[str, np.ndarray]) -> MetricsReport:
    """Metrics from each participant's own confusion matrix."""
    if set(true_by_pid) != set(pred_by_pid):
        raise PairingError("True and predicted labels cover different participants")
    rows = []
    for pid in true_by_pid:
        cm = ConfusionMatrix.from_labels(true_by_pid[pid], pred_by_pid[pid])
        if cm.total == 0:
            raise InputError(f"Participant '{pid}' has no evaluated windows")
        rows.append({"participant_id": pid, "n_windows": cm.total, **all_metrics(cm)})
    frame = pd.DataFrame(rows, columns=["participant_id", "n_windows"] + METRIC_NAMES)
    return MetricsReport(frame)


def compare_metrics(a: MetricsReport, b: MetricsReport) -> pd.DataFrame:
    """Paired two-sided t-tests between two models' per-participant metrics."""
    left = a.per_participant.set_index("participant_id")
    right = b.per_participant.set_index("participant_id")
    if set(left.index) != set(right.index):
        raise PairingError("Metric reports cover different participants")
    right = right.loc[left.index]
    rows = []
    for metric in METRIC_NAMES:
        t, p = _paired_ttest(right[metric].to_numpy(), left[metric].to_numpy())
        rows.append({"metric": metric, "mean_a": a.mean(metric), "sd_a": a.sd(metric),
                     "mean_b": b.mean(metric), "sd_b": b.sd(metric), "t": t, "p_value": p})
    return pd.DataFrame(rows)


# --- composition ---

@dataclass(frozen=True)
class Composition:
    participant_id: str
    hours: np.ndarray

    def as_dict(self) -> dict[str, float]:
        return dict(zip(LABEL_NAMES, self.hours.tolist()))


def composition(labels: np.ndarray, window_duration_s: float = 30.0, participant_id: str = "") -> Composition:
    """Hours per label; MISSING windows are not counted."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels[labels != MISSING], minlength=N_CLASSES)
    return Composition(participant_id, counts * window_duration_s / 3600.0)


def compositions_frame(compositions: list[Composition]) -> pd.DataFrame:
    return pd.DataFrame([{"participant_id": c.participant_id, **c.as_dict()} for c in compositions],
                        columns=["participant_id"] + LABEL_NAMES)


def _paired_ttest(b: np.ndarray, a: np.ndarray) -> tuple[float, float]:
    d = b - a
    if np.all(d == d[0]):
        # zero variance: scipy would return nan
        if d[0] == 0:
            return 0.0, 1.0
        return float(np.sign(d[0]) * np.inf), 0.0
    result = stats.ttest_rel(b, a)
    return float(result.statistic), float(result.pvalue)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 1.0
    if np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan")
    return float(stats.pearsonr(a, b).statistic)


@dataclass(frozen=True)
class AgreementReport:
    """Per-label agreement between reference compositions ``a`` and compared compositions ``b``.

    ``table`` has one row per label; ``points`` one row per participant and label with the
    (mean, difference) pair for Bland-Altman plots and the percentage error for boxplots.
    """
    table: pd.DataFrame
    points: pd.DataFrame = field(repr=False)

    def row(self, label: str) -> dict:
        return self.table.set_index("label").loc[label].to_dict()


def composition_agreement(a: list[Composition], b: list[Composition]) -> AgreementReport:
    """Agreement of ``b`` against reference ``a``; differences are b - a in hours."""
    by_pid_a = {c.participant_id: c for c in a}
    by_pid_b = {c.participant_id: c for c in b}
    if len(by_pid_a) != len(a) or len(by_pid_b) != len(b):
        raise PairingError("Duplicate participant in a composition list")
    if set(by_pid_a) != set(by_pid_b):
        unpaired = sorted(set(by_pid_a) ^ set(by_pid_b))
        raise PairingError(f"Compositions are not paired; unmatched participant(s): {', '.join(unpaired[:5])}")
    pids = [c.participant_id for c in a]
    if len(pids) < 2:
        raise InsufficientDataError("Composition agreement needs at least 2 participants")

    ha = np.stack([by_pid_a[pid].hours for pid in pids])
    hb = np.stack([by_pid_b[pid].hours for pid in pids])
    rows, points = [], []
    for c, name in enumerate(LABEL_NAMES):
        x, y = ha[:, c], hb[:, c]
        d = y - x
        mean_d = float(np.mean(d))
        sd_d = float(np.std(d, ddof=1))
        nonzero = x > 0
        pct = np.full(len(x), np.nan)
        pct[nonzero] = np.abs(d[nonzero]) / x[nonzero] * 100.0
        t, p = _paired_ttest(y, x)
        rows.append({
            "label": name,
            "n": len(pids),
            "mean_a": float(np.mean(x)),
            "mean_b": float(np.mean(y)),
            "mean_difference": mean_d,
            "sd_difference": sd_d,
            "loa_lower": mean_d - AGREEMENT * sd_d,
            "loa_upper": mean_d + AGREEMENT * sd_d,
            "pearson_r": _pearson(x, y),
            "mape": float(np.mean(pct[nonzero])) if nonzero.any() else float("nan"),
            "mape_excluded": int((~nonzero).sum()),
            "mae_hours": float(np.mean(np.abs(d))),
            "mae_sd": float(np.std(np.abs(d), ddof=1)),
            "t": t,
            "p_value": p,
        })
        points += [{"participant_id": pid, "label": name, "a": x[i], "b": y[i], "mean": (x[i] + y[i]) / 2,
                    "difference": d[i], "percentage_error": pct[i]} for i, pid in enumerate(pids)]
    return AgreementReport(pd.DataFrame(rows), pd.DataFrame(points))


# --- subgroups ---

@dataclass(frozen=True)
class SubgroupReport:
    grouping: str
    value: str
    metrics: MetricsReport
    agreement: Optional[AgreementReport] = None


def subgroup_report(metrics: MetricsReport, meta: dict[str, SubjectMeta], grouping: Grouping,
                    truth: Optional[list[Composition]] = None,
                    predicted: Optional[list[Composition]] = None) -> dict[str, SubgroupReport]:
    """Splits participants by age band or sex and recomputes the aggregates per group.

    Agreement is only computed for groups with at least two participants.
    """
    pids = metrics.per_participant["participant_id"].tolist()
    lacking = [pid for pid in pids if pid not in meta]
    if lacking:
        raise MetadataError(f"No metadata for participant(s): {', '.join(lacking[:5])}")
    values = [getattr(meta[pid], grouping) for pid in pids]
    truth_by_pid = {c.participant_id: c for c in truth or []}
    pred_by_pid = {c.participant_id: c for c in predicted or []}

    reports = {}
    for value in sorted(set(values)):
        members = [pid for pid, v in zip(pids, values) if v == value]
        frame = metrics.per_participant[metrics.per_participant["participant_id"].isin(members)].reset_index(drop=True)
        agreement = None
        if truth is not None and predicted is not None:
            if len(members) >= 2:
                agreement = composition_agreement([truth_by_pid[pid] for pid in members],
                                                  [pred_by_pid[pid] for pid in members])
            else:
                logger.warning(f"Subgroup {grouping}={value} has a single participant; agreement skipped")
        reports[value] = SubgroupReport(grouping, value, MetricsReport(frame), agreement)
    return reports


# --- folds ---

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    seed: int
    fold_of: dict[str, int]
    inner_validation: list[list[str]]

    def test_pids(self, fold: int) -> list[str]:
        return [pid for pid, f in self.fold_of.items() if f == fold]

    def train_pids(self, fold: int) -> list[str]:
        return [pid for pid, f in self.fold_of.items() if f != fold]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "folds": [
                {"fold": f, "test": self.test_pids(f), "train": self.train_pids(f),
                 "inner_validation": self.inner_validation[f]}
                for f in range(self.k)
            ],
        }


def _stratification_cost(fold_counts: np.ndarray, global_prop: np.ndarray) -> float:
    totals = fold_counts.sum(axis=1, keepdims=True)
    used = totals[:, 0] > 0
    props = fold_counts[used] / totals[used]
    return float(np.sum((props - global_prop) ** 2))


def stratified_group_kfold(labels_by_pid: dict[str, np.ndarray], k: int = 5, seed: int = 42,
                           inner_fraction: float = 0.2) -> FoldAssignment:
    """Greedy participant-level stratified k-fold.

    Participants, shuffled by ``seed`` then stably ordered by descending total window
    count (missing labels included), join the fold (among those with the fewest participants) that keeps per-fold
    label proportions closest to the global ones. Each fold also gets ``inner_fraction``
    of its training participants as an inner validation set.
    """
    pids = sorted(labels_by_pid)
    if k < 2:
        raise InputError(f"k must be at least 2, got {k}")
    if len(pids) < k:
        raise InputError(f"{len(pids)} participant(s) cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    counts = {pid: np.bincount(_labeled(labels_by_pid[pid]), minlength=N_CLASSES) for pid in pids}
    order = [pids[i] for i in rng.permutation(len(pids))]
    order.sort(key=lambda pid: -len(labels_by_pid[pid]))

    total = np.sum([counts[pid] for pid in pids], axis=0).astype(float)
    global_prop = total / total.sum() if total.sum() > 0 else np.full(N_CLASSES, 1.0 / N_CLASSES)
    fold_counts = np.zeros((k, N_CLASSES))
    fold_sizes = np.zeros(k, dtype=int)
    fold_of: dict[str, int] = {}
    for pid in order:
        best, best_cost = -1, np.inf
        for f in np.flatnonzero(fold_sizes == fold_sizes.min()):
            trial = fold_counts.copy()
            trial[f] += counts[pid]
            cost = _stratification_cost(trial, global_prop)
            if cost < best_cost - 1e-15:
                best, best_cost = int(f), cost
        fold_of[pid] = best
        fold_counts[best] += counts[pid]
        fold_sizes[best] += 1

    inner = []
    for f in range(k):
        train = sorted(pid for pid in pids if fold_of[pid] != f)
        n_inner = min(len(train) - 1, max(1, int(round(inner_fraction * len(train))))) if len(train) > 1 else 0
        inner.append(sorted(train[i] for i in rng.permutation(len(train))[:n_inner]))
    logger.info(f"Assigned {len(pids)} participants to {k} folds of sizes {fold_sizes.tolist()}")
    return FoldAssignment(k=k, seed=seed, fold_of={pid: fold_of[pid] for pid in pids}, inner_validation=inner)


def _labeled(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return labels[labels != MISSING]
