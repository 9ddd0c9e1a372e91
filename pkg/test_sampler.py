"""
三元组采样器测试
"""

from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

import store
from conftest import make_examples
from errors import ConfigError, DomainMismatchError, SamplingError
from frontend import energy_of, stabilized_log
from sampler import (
    SamplerConfig, TripletSource, apportion, build_lookup, circular_time_shift, materialize,
    sample_joint, sample_labeled, sample_mixing, sample_noise, sample_proximity, sample_translation,
    sample_triplets, truncated_freq_shift,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def labeled_examples():
    return make_examples(labels=[{i % 3} for i in range(12)])


class TestTransforms:

    def test_time_shift_is_circular(self):
        cells = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(circular_time_shift(cells, 1), [[2, 0, 1], [5, 3, 4]])

    def test_freq_shift_truncates(self):
        cells = np.arange(1.0, 7.0).reshape(3, 2)
        np.testing.assert_array_equal(truncated_freq_shift(cells, 1), [[0, 0], [1, 2], [3, 4]])
        np.testing.assert_array_equal(truncated_freq_shift(cells, -2), [[5, 6], [0, 0], [0, 0]])
        np.testing.assert_array_equal(truncated_freq_shift(cells, 0), cells)


class TestLabeled:

    def test_anchor_positive_share_class(self):
        dataset = labeled_examples()
        lookup = build_lookup(dataset)
        for t in sample_labeled(dataset, 50, rng()):
            c = int(t.params[0])
            assert t.source == TripletSource.LABELED
            assert t.record.anchor != t.record.positive
            assert c in lookup[t.record.anchor].labels
            assert c in lookup[t.record.positive].labels
            assert c not in lookup[t.record.negative].labels

    def test_requires_labels(self, energy_examples):
        with pytest.raises(SamplingError):
            sample_labeled(energy_examples, 4, rng())

    def test_zero_request(self):
        assert sample_labeled(labeled_examples(), 0, rng()) == []

    def test_thousand_triplets_on_three_classes(self):
        labels = [{i % 3} | ({(i + 1) % 3} if i % 5 == 0 else set()) for i in range(30)]
        dataset = make_examples(n_examples=30, n_recordings=6, shape=(8, 12), labels=labels)
        lookup = build_lookup(dataset)
        triplets = sample_labeled(dataset, 1000, rng(11))
        assert len(triplets) == 1000
        for t in triplets:
            c = int(t.params[0])
            a, p, n = (lookup[k] for k in (t.record.anchor, t.record.positive, t.record.negative))
            assert a.key != p.key
            assert c in a.labels and c in p.labels
            assert c not in n.labels
        assert set(Counter(int(t.params[0]) for t in triplets)) == {0, 1, 2}


class TestNoise:

    def test_positive_dominates_anchor(self, energy_examples):
        for t in sample_noise(energy_examples, 20, 0.5, rng()):
            assert t.record.anchor == t.record.positive
            assert t.record.anchor != t.record.negative
            assert np.all(t.positive >= t.anchor)

    def test_zero_sigma_is_identity(self, energy_examples):
        for t in sample_noise(energy_examples, 5, 0.0, rng()):
            np.testing.assert_array_equal(t.positive, t.anchor)

    def test_mean_noise_factor(self, energy_examples):
        sigma = 0.5
        factors = np.concatenate([(t.positive / t.anchor).ravel()
                                  for t in sample_noise(energy_examples, 20, sigma, rng(3))])
        # E[1 + |ε|] = 1 + σ·sqrt(2/π)
        assert factors.mean() == pytest.approx(1 + sigma * np.sqrt(2 / np.pi), abs=5e-3)
        assert factors.min() >= 1.0

    def test_pairs_per_anchor(self, energy_examples):
        triplets = sample_noise(energy_examples, 9, 0.5, rng(), pairs_per_anchor=3)
        anchors = [t.record.anchor for t in triplets]
        assert anchors[0] == anchors[1] == anchors[2]
        assert anchors[3] == anchors[4] == anchors[5]

    def test_negative_sigma(self, energy_examples):
        with pytest.raises(ConfigError):
            sample_noise(energy_examples, 1, -0.1, rng())


class TestTranslation:

    def test_energy_never_increases(self, energy_examples):
        for t in sample_translation(energy_examples, 30, 10, rng()):
            assert energy_of(t.positive) <= energy_of(t.anchor) * (1 + 1e-12)
            assert -10 <= t.params[1] <= 10
            assert 0 <= t.params[0] < 96

    def test_time_shift_only_conserves_energy(self, energy_examples):
        for t in sample_translation(energy_examples, 10, 0, rng()):
            assert t.params[1] == 0
            assert energy_of(t.positive) == pytest.approx(energy_of(t.anchor), rel=1e-12)

    def test_shift_range(self, energy_examples):
        with pytest.raises(ConfigError):
            sample_translation(energy_examples, 1, 64, rng())


class TestMixing:

    def test_mixing_identity(self, energy_examples):
        lookup = build_lookup(energy_examples)
        for t in sample_mixing(energy_examples, 20, 0.25, rng()):
            alpha = t.params[0]
            anchor = lookup[t.record.anchor].cells
            negative = lookup[t.record.negative].cells
            expected = anchor + alpha * (energy_of(anchor) / energy_of(negative)) * negative
            np.testing.assert_allclose(t.positive, expected, rtol=1e-12)
            assert energy_of(t.positive) == pytest.approx((1 + alpha) * energy_of(anchor), rel=1e-9)

    def test_energy_identity_over_many_draws(self):
        dataset = make_examples(n_examples=50, n_recordings=10, shape=(8, 12), seed=4)
        alpha = 0.25
        deviations = [abs(energy_of(t.positive) / ((1 + alpha) * energy_of(t.anchor)) - 1.0)
                      for t in sample_mixing(dataset, 10_000, alpha, rng(6))]
        assert len(deviations) == 10_000
        assert max(deviations) < 1e-6

    def test_zero_energy_windows_are_avoided(self):
        dataset = make_examples(zero_rows=(0, 5))
        for t in sample_mixing(dataset, 40, 0.25, rng()):
            assert energy_of(t.anchor) > 0
            assert energy_of(t.negative) > 0

    def test_all_silent(self):
        dataset = make_examples(n_examples=4, zero_rows=(0, 1, 2, 3))
        with pytest.raises(SamplingError):
            sample_mixing(dataset, 1, 0.25, rng())

    def test_alpha_must_be_positive(self, energy_examples):
        with pytest.raises(ConfigError):
            sample_mixing(energy_examples, 1, 0.0, rng())


class TestProximity:

    def test_same_recording_close_in_time(self, energy_examples):
        lookup = build_lookup(energy_examples)
        for t in sample_proximity(energy_examples, 40, 1.0, rng()):
            a, p, n = (lookup[k] for k in (t.record.anchor, t.record.positive, t.record.negative))
            assert a.recording_index == p.recording_index != n.recording_index
            assert a.key != p.key
            assert abs(a.start_time_s - p.start_time_s) < 1.0

    def test_single_recording(self):
        with pytest.raises(SamplingError):
            sample_proximity(make_examples(n_recordings=1), 2, 10.0, rng())

    def test_no_close_pairs(self, energy_examples):
        with pytest.raises(SamplingError):
            sample_proximity(energy_examples, 2, 0.5, rng())


class TestJoint:

    def test_apportion(self):
        counts = apportion(10, {'noise': 1, 'translation': 1, 'mixing': 1})
        assert counts == {'noise': 4, 'translation': 3, 'mixing': 3}
        assert apportion(0, {'noise': 1}) == {'noise': 0}

    def test_apportion_rejects_bad_weights(self):
        with pytest.raises(ConfigError):
            apportion(4, {'noise': 0, 'mixing': 0})
        with pytest.raises(ConfigError):
            apportion(4, {'echo': 1})

    def test_source_counts(self, energy_examples):
        weights = {'noise': 1.0, 'translation': 1.0, 'mixing': 1.0, 'proximity': 1.0}
        triplets = sample_joint(energy_examples, 64, weights, rng(), SamplerConfig(delta_t_s=1.5))
        counts = Counter(t.source for t in triplets)
        assert counts == {TripletSource.NOISE: 16, TripletSource.TRANSLATION: 16,
                          TripletSource.MIXING: 16, TripletSource.PROXIMITY: 16}

    def test_single_active_source(self, energy_examples):
        triplets = sample_joint(energy_examples, 8, {'noise': 1.0, 'mixing': 0.0}, rng())
        assert {t.source for t in triplets} == {TripletSource.NOISE}


class TestRecords:

    def test_deterministic(self, energy_examples):
        cfg = SamplerConfig(delta_t_s=1.5)
        a = sample_triplets('joint', energy_examples, 32, cfg, rng(5))
        b = sample_triplets('joint', energy_examples, 32, cfg, rng(5))
        assert [t.record for t in a] == [t.record for t in b]

    def test_rematerialized_from_disk(self, energy_examples, tmp_path):
        cfg = SamplerConfig(sigma=0.3, alpha=0.1, delta_t_s=1.5)
        triplets = sample_triplets('joint', energy_examples, 24, cfg, rng(1))
        store.write_triplets(tmp_path / 't.bin', [t.record for t in triplets])
        lookup = build_lookup(energy_examples)
        again = [materialize(r, lookup) for r in store.read_triplets(tmp_path / 't.bin')]
        for t, u in zip(triplets, again):
            assert t.source == u.source
            np.testing.assert_array_equal(t.anchor, u.anchor)
            np.testing.assert_array_equal(t.positive, u.positive)
            np.testing.assert_array_equal(t.negative, u.negative)

    def test_log_domain_is_rejected(self, energy_examples):
        logged = [replace(e, window=stabilized_log(e.window, 0.01)) for e in energy_examples]
        with pytest.raises(DomainMismatchError):
            sample_noise(logged, 2, 0.5, rng())

    def test_missing_window_reference(self, energy_examples):
        triplet = sample_noise(energy_examples, 1, 0.5, rng())[0]
        with pytest.raises(SamplingError, match='不存在'):
            materialize(triplet.record, {})
