"""Hidden Markov model smoothing of predicted label sequences.

Hidden states and observations are both the four intensity labels. The prior and
transition matrix come from true labels, the emission matrix from a classifier's
probabilities on data it was not trained on (forest OOB or held-out external output).
Decoding is Viterbi in log space on hard labels.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from errors import CompatibilityError, DegenerateTrainingError, InputError, SchemaError
from labels import MISSING, N_CLASSES, IntensityLabel
from timeline import GAP_TOLERANCE_S, contiguous_steps, split_segments

logger = logging.getLogger(__name__)

EPSILON = 1e-6
PARAMS_FORMAT = "activity-hmm"
PARAMS_FORMAT_VERSION = 1
ROW_SUM_TOLERANCE = 1e-9

# transitions added once per participant to cover annotation gaps around sleep
MANUAL_TRANSITIONS = [(IntensityLabel.SLEEP, IntensityLabel.SEDENTARY), (IntensityLabel.SEDENTARY, IntensityLabel.SLEEP)]


def floor_probabilities(p: np.ndarray, epsilon: float = EPSILON) -> np.ndarray:
    """Maps each stochastic row p to eps + (1 - K*eps) * p; rows still sum to 1 and no entry is below eps."""
    p = np.asarray(p, dtype=float)
    return epsilon + (1.0 - p.shape[-1] * epsilon) * p


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    totals = m.sum(axis=-1, keepdims=True)
    return m / np.where(totals == 0, 1.0, totals)


@dataclass(frozen=True)
class HmmParams:
    prior: np.ndarray
    transition: np.ndarray
    emission: np.ndarray

    def __post_init__(self):
        if self.prior.shape != (N_CLASSES,):
            raise SchemaError(f"hmm: prior must have shape ({N_CLASSES},), got {self.prior.shape}")
        for name in ("transition", "emission"):
            m = getattr(self, name)
            if m.shape != (N_CLASSES, N_CLASSES):
                raise SchemaError(f"hmm: {name} must be {N_CLASSES}x{N_CLASSES}, got {m.shape}")
        for name, m in (("prior", self.prior), ("transition", self.transition), ("emission", self.emission)):
            if np.any(m < 0) or np.any(np.abs(m.sum(axis=-1) - 1.0) > ROW_SUM_TOLERANCE):
                raise InputError(f"hmm: {name} is not row-stochastic")

    def permuted(self, order: np.ndarray) -> "HmmParams":
        """Params with states relabeled so that new state k is old state ``order[k]``."""
        order = np.asarray(order)
        return HmmParams(
            prior=self.prior[order],
            transition=self.transition[np.ix_(order, order)],
            emission=self.emission[np.ix_(order, order)],
        )


@dataclass(frozen=True)
class LabeledSequence:
    """Per-window predictions for one participant.

    ``pred_labels`` may hold MISSING for windows without a prediction; those windows are
    left untouched by smoothing and correction.
    """
    participant_id: str
    times: np.ndarray
    pred_labels: np.ndarray
    true_labels: Optional[np.ndarray] = None
    pred_probs: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.times)
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise InputError(f"Sequence '{self.participant_id}': times are not strictly increasing")
        for name in ("pred_labels", "true_labels", "pred_probs"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise InputError(f"Sequence '{self.participant_id}': {name} has length {len(value)}, expected {n}")

    def __len__(self) -> int:
        return len(self.times)


def _known(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return labels[labels != MISSING]


def train_prior(labels: np.ndarray, epsilon: float = EPSILON) -> np.ndarray:
    """Empirical class frequencies of the pooled true labels, floored."""
    known = _known(labels)
    if known.size == 0:
        raise InputError("hmm: cannot train a prior from an empty label set")
    freq = np.bincount(known, minlength=N_CLASSES) / known.size
    return floor_probabilities(freq, epsilon)


def count_transitions(sequences: list[LabeledSequence], expected_gap_s: float = 30.0,
                      tolerance_s: float = GAP_TOLERANCE_S) -> tuple[np.ndarray, int]:
    """Raw transition counts including the manual pseudo-counts; also returns the number of observed transitions.

    A pair counts only when both windows are labeled and their start times are
    ``expected_gap_s`` apart within ``tolerance_s``.
    """
    counts = np.zeros((N_CLASSES, N_CLASSES))
    observed = 0
    for seq in sequences:
        if seq.true_labels is None:
            raise InputError(f"hmm: sequence '{seq.participant_id}' has no true labels")
        labels = np.asarray(seq.true_labels, dtype=np.int64)
        valid = contiguous_steps(seq.times, expected_gap_s, tolerance_s)
        valid &= (labels[:-1] != MISSING) & (labels[1:] != MISSING)
        np.add.at(counts, (labels[:-1][valid], labels[1:][valid]), 1)
        observed += int(valid.sum())
        for source, target in MANUAL_TRANSITIONS:
            counts[source, target] += 1
    return counts, observed


def train_transition(sequences: list[LabeledSequence], expected_gap_s: float = 30.0,
                     epsilon: float = EPSILON, tolerance_s: float = GAP_TOLERANCE_S) -> np.ndarray:
    counts, observed = count_transitions(sequences, expected_gap_s, tolerance_s)
    if observed == 0:
        raise DegenerateTrainingError(
            f"hmm: no valid transitions at the expected {expected_gap_s:g} s gap in {len(sequences)} sequence(s)"
        )
    empty_rows = counts.sum(axis=1) == 0
    counts[empty_rows] = np.eye(N_CLASSES)[empty_rows]
    logger.debug(f"hmm: {observed} observed transitions, {int(empty_rows.sum())} unseen source state(s)")
    return floor_probabilities(_normalize_rows(counts), epsilon)


def train_emission(true_labels: np.ndarray, pred_probs: np.ndarray, epsilon: float = EPSILON) -> np.ndarray:
    """E[i] = mean predicted probability vector over windows whose true state is i.

    Windows with a MISSING true label are ignored. States never seen fall back to the
    identity row.
    """
    true_labels = np.asarray(true_labels, dtype=np.int64)
    pred_probs = np.asarray(pred_probs, dtype=float)
    if pred_probs.shape != (len(true_labels), N_CLASSES):
        raise InputError(f"hmm: probabilities {pred_probs.shape} do not match {len(true_labels)} labels")
    keep = true_labels != MISSING
    true_labels, pred_probs = true_labels[keep], pred_probs[keep]
    if len(true_labels) == 0:
        raise DegenerateTrainingError("hmm: no labeled windows to train the emission matrix")
    bad = np.abs(pred_probs.sum(axis=1) - 1.0) > 1e-6
    if bad.any():
        raise InputError(f"hmm: probability row {int(np.flatnonzero(bad)[0])} does not sum to 1")

    sums = np.zeros((N_CLASSES, N_CLASSES))
    np.add.at(sums, true_labels, pred_probs)
    counts = np.bincount(true_labels, minlength=N_CLASSES)
    emission = np.eye(N_CLASSES)
    present = counts > 0
    emission[present] = sums[present] / counts[present, None]
    return floor_probabilities(_normalize_rows(emission), epsilon)


def train_hmm(sequences: list[LabeledSequence], emission_labels: np.ndarray, emission_probs: np.ndarray,
              expected_gap_s: float = 30.0, epsilon: float = EPSILON,
              tolerance_s: float = GAP_TOLERANCE_S) -> HmmParams:
    """Prior and transition from the sequences' true labels, emission from the given probabilities."""
    pooled = np.concatenate([np.asarray(seq.true_labels, dtype=np.int64) for seq in sequences]) if sequences else np.zeros(0, dtype=np.int64)
    return HmmParams(
        prior=train_prior(pooled, epsilon),
        transition=train_transition(sequences, expected_gap_s, epsilon, tolerance_s),
        emission=train_emission(emission_labels, emission_probs, epsilon),
    )


def viterbi(obs: np.ndarray, params: HmmParams) -> np.ndarray:
    """Most probable hidden state path for hard-label observations."""
    obs = np.asarray(obs, dtype=np.int64)
    if obs.size == 0:
        raise InputError("hmm: cannot decode an empty observation sequence")
    if np.any((obs < 0) | (obs >= N_CLASSES)):
        raise InputError("hmm: observations must be intensity labels")
    log_prior = np.log(params.prior)
    log_trans = np.log(params.transition)
    log_emit = np.log(params.emission)

    n = len(obs)
    backpointers = np.zeros((n, N_CLASSES), dtype=np.int64)
    delta = log_prior + log_emit[:, obs[0]]
    for t in range(1, n):
        scores = delta[:, None] + log_trans
        # np.argmax returns the first maximum, i.e. the lower state index on ties
        backpointers[t] = np.argmax(scores, axis=0)
        delta = scores[backpointers[t], np.arange(N_CLASSES)] + log_emit[:, obs[t]]

    path = np.zeros(n, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(n - 1, 0, -1):
        path[t - 1] = backpointers[t, path[t]]
    return path


def log_likelihood(states: np.ndarray, obs: np.ndarray, params: HmmParams) -> float:
    """Joint log probability of a state path and its observations."""
    states = np.asarray(states, dtype=np.int64)
    obs = np.asarray(obs, dtype=np.int64)
    if len(states) != len(obs) or len(states) == 0:
        raise InputError("hmm: states and observations must be non-empty and of equal length")
    total = np.log(params.prior[states[0]]) + np.sum(np.log(params.emission[states, obs]))
    total += np.sum(np.log(params.transition[states[:-1], states[1:]]))
    return float(total)


def smooth_sequence(seq: LabeledSequence, params: HmmParams, expected_gap_s: float = 30.0,
                    tolerance_s: float = GAP_TOLERANCE_S) -> LabeledSequence:
    """Runs Viterbi independently on every contiguous, predicted segment of the sequence."""
    labels = np.asarray(seq.pred_labels, dtype=np.int64)
    smoothed = labels.copy()
    for a, b in split_segments(seq.times, expected_gap_s, tolerance_s):
        # windows without a prediction also break the chain
        predicted = np.flatnonzero(labels[a:b] != MISSING) + a
        for lo, hi in split_segments(predicted, 1, 0):
            idx = predicted[lo:hi]
            smoothed[idx] = viterbi(labels[idx], params)
    return replace(seq, pred_labels=smoothed)


def save_hmm(params: HmmParams, path, epsilon: float = EPSILON) -> None:
    """Plain-text matrices: versioned header, prior, then transition and emission rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def row(values) -> str:
        return " ".join(f"{v:.17g}" for v in values)

    lines = [f"# {PARAMS_FORMAT} v{PARAMS_FORMAT_VERSION}", f"# epsilon {epsilon:.17g}", "prior", row(params.prior), "transition"]
    lines += [row(r) for r in params.transition]
    lines.append("emission")
    lines += [row(r) for r in params.emission]
    path.write_text("\n".join(lines) + "\n")


def load_hmm(path) -> HmmParams:
    path = Path(path)
    lines = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    if not lines or lines[0] != f"# {PARAMS_FORMAT} v{PARAMS_FORMAT_VERSION}":
        raise CompatibilityError(f"{path}: not a {PARAMS_FORMAT} v{PARAMS_FORMAT_VERSION} file")
    body = [line for line in lines if not line.startswith("#")]
    try:
        p = body.index("prior")
        t = body.index("transition")
        e = body.index("emission")
        prior = np.array(body[p + 1].split(), dtype=float)
        transition = np.array([r.split() for r in body[t + 1:t + 1 + N_CLASSES]], dtype=float)
        emission = np.array([r.split() for r in body[e + 1:e + 1 + N_CLASSES]], dtype=float)
    except (ValueError, IndexError) as ex:
        raise SchemaError(f"{path}: malformed HMM parameter file: {ex}")
    return HmmParams(prior=prior, transition=transition, emission=emission)
