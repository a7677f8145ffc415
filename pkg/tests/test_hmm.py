import itertools

import numpy as np
import pytest

from errors import CompatibilityError, DegenerateTrainingError, InputError, SchemaError
from hmm import (
    EPSILON,
    HmmParams,
    LabeledSequence,
    floor_probabilities,
    load_hmm,
    log_likelihood,
    save_hmm,
    smooth_sequence,
    train_emission,
    train_hmm,
    train_prior,
    train_transition,
    viterbi,
)
from labels import MISSING

PATHS = {n: np.array(list(itertools.product(range(4), repeat=n))) for n in range(1, 9)}


def random_stochastic(rng, shape):
    m = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
    return floor_probabilities(m)


def random_params(rng):
    return HmmParams(
        prior=random_stochastic(rng, (4,)),
        transition=random_stochastic(rng, (4, 4)),
        emission=random_stochastic(rng, (4, 4)),
    )


def brute_force_best(obs, params):
    paths = PATHS[len(obs)]
    scores = np.log(params.prior[paths[:, 0]]) + np.log(params.emission[paths, obs]).sum(axis=1)
    if len(obs) > 1:
        scores += np.log(params.transition[paths[:, :-1], paths[:, 1:]]).sum(axis=1)
    return scores.max()


def sequence(labels, step=30.0, start=0.0, true=None, **kwargs):
    labels = np.asarray(labels)
    return LabeledSequence("P1", start + step * np.arange(len(labels)), labels,
                           true_labels=None if true is None else np.asarray(true), **kwargs)


def sticky_params(stay=0.95, correct=0.8):
    transition = np.full((4, 4), (1 - stay) / 3)
    np.fill_diagonal(transition, stay)
    emission = np.full((4, 4), (1 - correct) / 3)
    np.fill_diagonal(emission, correct)
    return HmmParams(np.full(4, 0.25), transition, emission)


class TestViterbi:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            params = random_params(rng)
            obs = rng.integers(0, 4, size=int(rng.integers(1, 9)))
            path = viterbi(obs, params)
            assert log_likelihood(path, obs, params) == pytest.approx(brute_force_best(obs, params), abs=1e-9)

    def test_ties_go_to_lower_state(self):
        uniform = HmmParams(np.full(4, 0.25), np.full((4, 4), 0.25), np.full((4, 4), 0.25))
        np.testing.assert_array_equal(viterbi([3, 1, 2, 0, 3], uniform), [0, 0, 0, 0, 0])

    def test_single_outlier_is_smoothed(self):
        np.testing.assert_array_equal(viterbi([1] * 10 + [3] + [1] * 10, sticky_params()), [1] * 21)

    def test_invalid_observations(self):
        with pytest.raises(InputError):
            viterbi([], sticky_params())
        with pytest.raises(InputError):
            viterbi([0, MISSING, 1], sticky_params())

    def test_smoothing_beats_raw_predictions(self):
        rng = np.random.default_rng(0)
        stay, noise = 0.95, 0.2
        sequences = []
        for _ in range(200):
            # a switch moves to one of the other three states uniformly
            switch = rng.random(2000) >= stay
            steps = np.where(switch, rng.integers(1, 4, size=2000), 0)
            steps[0] = rng.integers(4)
            true = np.cumsum(steps) % 4
            flip = rng.random(2000) < noise
            observed = np.where(flip, (true + rng.integers(1, 4, size=2000)) % 4, true)
            sequences.append(sequence(observed, true=true))

        emission_true = np.concatenate([s.true_labels for s in sequences])
        emission_probs = np.eye(4)[np.concatenate([s.pred_labels for s in sequences])]
        params = train_hmm(sequences, emission_true, emission_probs)
        raw = np.array([np.mean(s.pred_labels == s.true_labels) for s in sequences])
        smoothed = np.array([np.mean(smooth_sequence(s, params).pred_labels == s.true_labels) for s in sequences])
        assert raw.mean() == pytest.approx(1 - noise, abs=0.01)
        assert np.mean(smoothed > raw) >= 0.95
        assert smoothed.mean() - raw.mean() >= 0.05


class TestSmoothSequence:
    def test_segments_decoded_independently(self):
        params = sticky_params()
        labels = np.array([2, 2, 2, 0, 0, 0, 0])
        times = np.array([0, 30, 60, 500, 530, 560, 590], dtype=float)
        seq = LabeledSequence("P1", times, labels)
        smoothed = smooth_sequence(seq, params).pred_labels
        np.testing.assert_array_equal(smoothed[:3], viterbi(labels[:3], params))
        np.testing.assert_array_equal(smoothed[3:], viterbi(labels[3:], params))

    def test_missing_predictions_untouched(self):
        labels = np.array([1, 1, 3, MISSING, 3, 1, 1])
        smoothed = smooth_sequence(sequence(labels), sticky_params()).pred_labels
        assert smoothed[3] == MISSING
        np.testing.assert_array_equal(smoothed[:3], viterbi(labels[:3], sticky_params()))

    def test_times_must_increase(self):
        with pytest.raises(InputError):
            LabeledSequence("P1", np.array([0.0, 30.0, 30.0]), np.array([0, 0, 0]))


class TestTraining:
    def test_floor(self):
        floored = floor_probabilities(np.array([1.0, 0.0, 0.0, 0.0]))
        assert floored.min() == pytest.approx(EPSILON)
        assert floored.sum() == pytest.approx(1.0, abs=1e-12)

    def test_prior(self):
        prior = train_prior(np.array([0, 0, 1, MISSING, 3]))
        np.testing.assert_allclose(prior, floor_probabilities(np.array([0.5, 0.25, 0.0, 0.25])))
        with pytest.raises(InputError):
            train_prior(np.array([MISSING]))

    def test_transition_counts_with_manual_pseudo_counts(self):
        transition = train_transition([sequence([0, 0, 1, 1], true=[0, 0, 1, 1])])
        expected = np.array([[1, 2, 0, 0], [1, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
        expected /= expected.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(transition, floor_probabilities(expected))

    def test_transition_skips_gaps(self):
        seq = LabeledSequence("P1", np.array([0.0, 30.4, 100.0, 130.0]), np.zeros(4, dtype=int),
                              true_labels=np.array([2, 3, 3, 2]))
        transition = train_transition([seq])
        # 2 -> 3 within tolerance and 3 -> 2 after the gap; 3 -> 3 across the gap is dropped
        assert transition[2, 3] > 0.99
        assert transition[3, 2] > 0.99

    def test_no_valid_transitions(self):
        seq = LabeledSequence("P1", np.array([0.0, 60.0, 120.0]), np.zeros(3, dtype=int),
                              true_labels=np.array([0, 0, 0]))
        with pytest.raises(DegenerateTrainingError):
            train_transition([seq])

    def test_emission(self):
        true = np.array([0, 0, 2, MISSING])
        probs = np.array([[1.0, 0, 0, 0], [0.5, 0.5, 0, 0], [0, 0, 1.0, 0], [0.25] * 4])
        emission = train_emission(true, probs)
        np.testing.assert_allclose(emission[0], floor_probabilities(np.array([0.75, 0.25, 0, 0])))
        # unseen states fall back to the identity row
        np.testing.assert_allclose(emission[1], floor_probabilities(np.eye(4)[1]))
        np.testing.assert_allclose(emission.sum(axis=1), 1.0)

    def test_emission_errors(self):
        with pytest.raises(DegenerateTrainingError):
            train_emission(np.array([MISSING]), np.array([[0.25] * 4]))
        with pytest.raises(InputError):
            train_emission(np.array([0]), np.array([[0.5, 0.2, 0, 0]]))

    def test_params_validation(self):
        with pytest.raises(InputError):
            HmmParams(np.full(4, 0.3), np.eye(4), np.eye(4))

    def test_permuted(self):
        params = random_params(np.random.default_rng(3))
        order = np.array([2, 0, 3, 1])
        permuted = params.permuted(order)
        obs = np.array([1, 1, 2, 0, 3, 3])
        inverse = np.argsort(order)
        assert log_likelihood(viterbi(inverse[obs], permuted), inverse[obs], permuted) == pytest.approx(
            log_likelihood(viterbi(obs, params), obs, params))


class TestPersistence:
    def test_save_load_exact(self, tmp_path):
        params = random_params(np.random.default_rng(8))
        save_hmm(params, tmp_path / "hmm.txt")
        loaded = load_hmm(tmp_path / "hmm.txt")
        np.testing.assert_array_equal(loaded.transition, params.transition)
        np.testing.assert_array_equal(loaded.emission, params.emission)
        np.testing.assert_array_equal(loaded.prior, params.prior)

    def test_wrong_header(self, tmp_path):
        (tmp_path / "hmm.txt").write_text("# activity-hmm v2\nprior\n")
        with pytest.raises(CompatibilityError):
            load_hmm(tmp_path / "hmm.txt")

    def test_malformed_body(self, tmp_path):
        (tmp_path / "hmm.txt").write_text("# activity-hmm v1\nprior\n0.25 0.25 x 0.25\ntransition\nemission\n")
        with pytest.raises(SchemaError):
            load_hmm(tmp_path / "hmm.txt")
