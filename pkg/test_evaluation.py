"""
评估测试
"""

import itertools

import numpy as np
import pytest

from errors import ConfigError, DomainMismatchError, EvaluationError
from evaluation import (
    ClassifierSpec, LogMelFeatures, SegmentEmbedding, SegmentSet, StoredEmbeddings, average_precision,
    build_qbe_trials, cosine_distance, eval_classifier, evaluate_qbe, format_results_table, gap_recovery,
    light_supervision_protocol, mean_average_precision, ranked_average_precision, segment_embedding,
    segment_means, train_shallow_classifier,
)
from frontend import ContextWindow, LOG


def brute_force_ap(distances, is_target):
    order = sorted(range(len(distances)), key=lambda i: (distances[i], i))
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if is_target[i]:
            hits += 1
            total += hits / rank
    return total / sum(is_target)


def toy_segments(n=12, dim=4, seed=0):
    """偶数片段含类别 0，奇数片段含类别 1，片段 0 同时含两类"""
    rng = np.random.default_rng(seed)
    segments = []
    for i in range(n):
        labels = {i % 2} | ({1} if i == 0 else set())
        segments.append(SegmentEmbedding(rng.standard_normal(dim), f"seg{i}", frozenset(labels)))
    return segments


def separable_set(n_segments=20, windows=3, seed=0):
    rng = np.random.default_rng(seed)
    features, index, labels = [], [], []
    for s in range(n_segments):
        c = s % 2
        labels.append([c == 0, c == 1])
        for _ in range(windows):
            x = rng.normal(0.0, 0.1, 4)
            x[c] += 3.0
            features.append(x)
            index.append(s)
    return SegmentSet(np.array(features), np.array(index), np.array(labels), [f"seg{s}" for s in range(n_segments)])


FAST_SPEC = ClassifierSpec(hidden_layers=1, width=16, learning_rate=0.01, batch_size=8, max_epochs=20, patience=5)


class TestAveragePrecision:

    def test_examples(self):
        assert ranked_average_precision([0.1, 0.2, 0.3, 0.4, 0.5], [1, 0, 0, 0, 0]) == 1.0
        assert ranked_average_precision([0.1, 0.2, 0.3, 0.4, 0.5], [0, 0, 0, 0, 1]) == pytest.approx(0.2)

    def test_ties_keep_input_order(self):
        assert ranked_average_precision([0.5, 0.5], [0, 1]) == pytest.approx(0.5)
        assert ranked_average_precision([0.5, 0.5], [1, 0]) == 1.0

    @pytest.mark.parametrize('n', [2, 4, 6, 8])
    def test_all_label_patterns(self, n):
        distances = list(np.random.default_rng(n).permutation(n) / n)
        for pattern in itertools.product([0, 1], repeat=n):
            if not any(pattern):
                continue
            assert ranked_average_precision(distances, pattern) == pytest.approx(brute_force_ap(distances, pattern))

    def test_no_targets(self):
        with pytest.raises(EvaluationError):
            ranked_average_precision([0.1, 0.2], [0, 0])

    def test_chance_level(self):
        p = 100
        labels = np.array([1] * (p * (p - 1) // 2) + [0] * (p * p), dtype=bool)
        values = [ranked_average_precision(np.random.default_rng(seed).random(len(labels)), labels)
                  for seed in range(50)]
        assert np.mean(values) == pytest.approx(0.331, abs=0.02)

    def test_mean_average_precision(self):
        assert mean_average_precision({0: 0.5, 3: 1.0}) == 0.75
        with pytest.raises(EvaluationError):
            mean_average_precision({})


class TestQbe:

    def test_cosine_distance(self):
        assert cosine_distance([1.0, 0.0], [0.0, 2.0]) == pytest.approx(1.0)
        assert cosine_distance([1.0, 0.0], [-3.0, 0.0]) == pytest.approx(2.0)
        assert cosine_distance([1.0, 1.0], [2.0, 2.0]) == pytest.approx(0.0, abs=1e-12)
        assert cosine_distance([0.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)

    def test_trial_layout(self):
        trials, skipped = build_qbe_trials(toy_segments(), [0, 1], per_class=4, seed=1)
        assert skipped == []
        for c in (0, 1):
            t = trials[c].trials
            assert len(t) == 6 + 16
            assert [x.is_target for x in t] == [True] * 6 + [False] * 16
            assert trials[c].n_targets == 6

    def test_per_class_is_lowered(self):
        trials, _ = build_qbe_trials(toy_segments(n=6), [0], per_class=10, seed=0)
        # 类别 0: 片段 0, 2, 4 含该类，absent 为 1, 3, 5
        assert trials[0].per_class == 3
        assert len(trials[0].trials) == 3 + 9

    def test_class_without_pairs_is_skipped(self):
        trials, skipped = build_qbe_trials(toy_segments(), [0, 1, 7], per_class=3)
        assert skipped == [7]
        assert set(trials) == {0, 1}

    def test_single_absent_segment_is_skipped(self):
        vectors = np.eye(4)
        labels = [{0}, {0}, {0, 1}, {1}]
        segments = [SegmentEmbedding(vectors[i], f"seg{i}", frozenset(l)) for i, l in enumerate(labels)]
        # 类别 0: 3 个 present，只有 1 个 absent
        report = evaluate_qbe(segments, [0, 1], per_class=100)
        assert report.skipped == [0]
        assert set(report.per_class_ap) == {1}
        assert report.per_class_p == {1: 2}
        assert 0.0 <= report.map <= 1.0

    def test_deterministic(self):
        a = evaluate_qbe(toy_segments(), [0, 1], per_class=4, seed=5)
        b = evaluate_qbe(toy_segments(), [0, 1], per_class=4, seed=5)
        assert a == b
        assert a.map == pytest.approx(np.mean(list(a.per_class_ap.values())))

    def test_perfect_embedding(self):
        segments = [SegmentEmbedding(np.array([1.0, 0.0]) if i % 2 == 0 else np.array([0.0, 1.0]),
                                     f"s{i}", frozenset({i % 2})) for i in range(10)]
        report = evaluate_qbe(segments, [0, 1], per_class=5)
        assert report.map == 1.0

    def test_invalid_per_class(self):
        with pytest.raises(ConfigError):
            build_qbe_trials(toy_segments(), [0], per_class=1)

    def test_gap_recovery(self):
        assert gap_recovery(0.2, 0.6, 0.4) == pytest.approx(50.0)
        assert gap_recovery(0.2, 0.6, 0.1) == pytest.approx(-25.0)
        with pytest.raises(EvaluationError):
            gap_recovery(0.5, 0.5, 0.5)

    def test_average_precision_from_trials(self):
        trials, _ = build_qbe_trials(toy_segments(), [0], per_class=4, seed=2)
        t = trials[0].trials
        assert average_precision(t) == ranked_average_precision([x.distance for x in t], [x.is_target for x in t])


class TestSegments:

    def test_segment_embedding_is_plain_mean(self):
        model = LogMelFeatures(input_shape=(1, 2))
        windows = [ContextWindow(np.array([[1.0, 0.0]]), domain=LOG), ContextWindow(np.array([[0.0, 1.0]]), domain=LOG)]
        seg = segment_embedding(model, windows, 'a', {3})
        np.testing.assert_allclose(seg.vector, [0.5, 0.5])
        assert seg.labels == frozenset({3})

    def test_empty_segment(self):
        with pytest.raises(EvaluationError):
            segment_embedding(LogMelFeatures((1, 2)), [], 'empty')

    def test_stored_embeddings_by_row(self):
        stored = StoredEmbeddings(np.array([[1.0, 0.0], [0.0, 1.0], [3.0, 3.0]]))
        seg = segment_embedding(stored, np.array([0, 2]), 'rec_00001', [1])
        np.testing.assert_allclose(seg.vector, [2.0, 1.5])
        assert seg.labels == frozenset({1})
        with pytest.raises(EvaluationError):
            segment_embedding(stored, np.array([], dtype=np.int64), 'rec_00002')

    def test_logmel_requires_log_domain(self):
        with pytest.raises(DomainMismatchError):
            LogMelFeatures((1, 2)).embed([ContextWindow(np.ones((1, 2)))])

    def test_segment_means(self):
        means = segment_means(np.array([[1.0], [3.0], [5.0]]), np.array([0, 0, 1]), 2)
        np.testing.assert_allclose(means, [[2.0], [5.0]])
        with pytest.raises(EvaluationError):
            segment_means(np.array([[1.0]]), np.array([0]), 2)

    def test_subset_and_window_labels(self):
        data = separable_set(n_segments=4, windows=2)
        assert data.window_labels.shape == (8, 2)
        sub = data.subset([1, 3])
        assert sub.n_segments == 2
        assert sub.segment_ids == ['seg1', 'seg3']
        assert sub.segment_index.tolist() == [0, 0, 1, 1]
        assert sub.labels[:, 1].all()


class TestClassifier:

    def test_separable_data(self):
        classifier = train_shallow_classifier(separable_set(seed=0), FAST_SPEC, seed=0, dev=separable_set(seed=1))
        report = eval_classifier(classifier, separable_set(seed=2))
        assert report.skipped == []
        assert report.map > 0.95

    def test_missing_class_is_skipped(self):
        data = separable_set()
        only_zero = data.subset([s for s in range(data.n_segments) if s % 2 == 0])
        classifier = train_shallow_classifier(only_zero, FAST_SPEC, seed=0)
        report = eval_classifier(classifier, separable_set(seed=3))
        assert report.skipped == [1]
        assert set(report.per_class_ap) == {0}

    def test_spec_from_config(self, tiny_config):
        spec = ClassifierSpec.from_config(tiny_config, hidden_layers=4)
        assert spec.hidden_layers == 4
        assert spec.width == 16
        with pytest.raises(ConfigError):
            ClassifierSpec(hidden_layers=0)

    def test_light_supervision(self):
        result = light_supervision_protocol(separable_set(seed=0), separable_set(seed=2), FAST_SPEC,
                                            per_class=3, trials=2, seed=4)
        assert len(result.trial_maps) == 2
        assert result.map == pytest.approx(np.mean(result.trial_maps))
        again = light_supervision_protocol(separable_set(seed=0), separable_set(seed=2), FAST_SPEC,
                                           per_class=3, trials=2, seed=4)
        assert again == result


def test_results_table():
    table = format_results_table(['name', 'mAP'], [['logmel', 0.12345], ['joint', None]])
    assert table.splitlines() == ['| name | mAP |', '|---|---|', '| logmel | 0.123 |', '| joint | n/a |']
