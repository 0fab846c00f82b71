#!/usr/bin/env python3
"""
Test dataset sources and episode samplers
"""
import logging
import os
import struct
import sys
from itertools import islice

import numpy as np
import pytest

from tasks.sampling import (
    TaskSpec, episode_stream, exponential_weights, sample_class_based, sample_database_range,
    sample_episode, sample_episodes, sample_exponential, sample_uniform
)
from tasks.sources import (
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, DatasetError, DatasetSource, ParseError, SourceSpec,
    generate_clusters, generate_synthetic, generate_tokens, load_idx, load_source, load_token_universe,
    parse_idx, split
)

# Configure logging for tests
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

RUN_SLOW = os.getenv('NBF_RUN_SLOW') == '1'
MONTE_CARLO_EPISODES = 10_000 if RUN_SLOW else 2_000


@pytest.fixture(scope='module')
def clusters():
    return generate_clusters(classes=10, dim=16, items_per_class=200, noise=0.1, seed=0)


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(kind='zipf')
    with pytest.raises(ValueError):
        TaskSpec(n=0)
    with pytest.raises(ValueError):
        TaskSpec(positive_fraction=1.5)
    assert TaskSpec(n=30).queries == 30
    assert TaskSpec(n=30, t=7).queries == 7


def test_class_based_episode(clusters):
    print("\n🏷️ Testing class-based sampling...")
    episode = sample_class_based(rng(1), clusters, 1, 6)
    assert episode.n == 1
    positives = episode.query_ids[episode.labels == 1.0]
    assert np.all(positives == episode.storage_ids[0])

    episode = sample_class_based(rng(2), clusters, 20, 40)
    assert len(np.unique(clusters.labels[episode.storage_ids])) == 1
    stored_label = clusters.labels[episode.storage_ids[0]]
    negatives = episode.query_ids[episode.labels == 0.0]
    assert np.all(clusters.labels[negatives] != stored_label)
    assert np.count_nonzero(episode.labels) == 20
    print("  ✅ one class per set, negatives from other classes")


def test_class_based_too_small_class(clusters):
    with pytest.raises(DatasetError, match='no class'):
        sample_class_based(rng(), clusters, 201, 10)


def test_single_class_draws_negatives_from_the_class():
    source = generate_clusters(classes=1, dim=4, items_per_class=50, noise=0.1, seed=1)
    episode = sample_class_based(rng(3), source, 10, 20)
    negatives = episode.query_ids[episode.labels == 0.0]
    assert len(negatives) == 10
    assert not np.any(np.isin(negatives, episode.storage_ids))


def test_clusters_are_class_structured(clusters):
    centroids = np.stack([clusters.items[clusters.labels == c].mean(axis=0) for c in range(10)])
    intra = np.mean(np.linalg.norm(clusters.items - centroids[clusters.labels], axis=1))
    inter = np.mean([np.linalg.norm(a - b) for i, a in enumerate(centroids) for b in centroids[i + 1:]])
    assert inter > intra


def test_exponential_weights():
    permutation = np.arange(2000)
    weights = exponential_weights(2000, permutation, 0.999)
    assert weights.sum() == pytest.approx(1.0)
    assert weights[0] / weights[999] == pytest.approx(0.999 ** -999, rel=1e-9)
    assert weights[0] / weights[999] == pytest.approx(2.715, abs=1e-3)
    np.testing.assert_allclose(exponential_weights(50, rng().permutation(50), 1.0), 1.0 / 50)


def test_exponential_inclusion_favours_the_head(clusters):
    print("\n📉 Testing exponential sampling...")
    head, tail = clusters.permutation[0], clusters.permutation[999]
    counts = np.zeros(clusters.size)
    for episode in islice(episode_stream(5, clusters, TaskSpec(kind='exponential', n=50, t=1)), MONTE_CARLO_EPISODES):
        counts[episode.storage_ids] += 1
    logger.info(f"Inclusion counts: head {counts[head]:.0f}, 1000th {counts[tail]:.0f}")
    assert counts[head] > counts[tail]
    print(f"  ✅ head included {counts[head]:.0f} times vs {counts[tail]:.0f}")


def test_exponential_rejects_small_source():
    source = generate_clusters(classes=1, dim=2, items_per_class=5, noise=0.1)
    with pytest.raises(DatasetError):
        sample_exponential(rng(), source, 6, 3)


def test_uniform_sampling():
    source = generate_clusters(classes=2, dim=4, items_per_class=50, noise=0.1, seed=2)
    full = sample_uniform(rng(4), source, source.size, 30)
    assert np.all(full.labels == 1.0)

    episode = sample_uniform(rng(5), source, 30, 40)
    assert len(np.unique(episode.storage_ids)) == 30
    np.testing.assert_array_equal(episode.membership(), episode.labels)


def test_labels_follow_item_values():
    print("\n🏷️ Testing value-based membership labels...")
    # noise=0 makes every item of a class identical
    source = generate_clusters(classes=2, dim=4, items_per_class=30, noise=0.0, seed=1)
    relabelled = 0
    for episode in sample_episodes(11, source, TaskSpec(kind='uniform', n=10, t=40), 5):
        stored_classes = source.labels[episode.storage_ids]
        expected = np.isin(source.labels[episode.query_ids], stored_classes).astype(np.float64)
        np.testing.assert_array_equal(episode.labels, expected)
        np.testing.assert_array_equal(episode.membership(), episode.labels)
        for query, label in zip(episode.queries, episode.labels):
            assert label == float(any(np.array_equal(query, item) for item in episode.storage))
        by_id = np.isin(episode.query_ids, episode.storage_ids)
        relabelled += int(np.count_nonzero(episode.labels.astype(bool) & ~by_id))
    assert relabelled > 0
    print(f"  ✅ {relabelled} queries outside S by id but equal in value are labelled present")


def test_uniform_inclusion_frequency():
    source = generate_clusters(classes=1, dim=2, items_per_class=100, noise=0.1, seed=3)
    n, episodes = 10, MONTE_CARLO_EPISODES
    counts = np.zeros(source.size)
    for episode in islice(episode_stream(6, source, TaskSpec(kind='uniform', n=n, t=1)), episodes):
        counts[episode.storage_ids] += 1
    p = n / source.size
    sigma = np.sqrt(episodes * p * (1 - p))
    assert np.max(np.abs(counts - episodes * p)) < 4.5 * sigma


def test_database_range_example():
    universe = DatasetSource('token_file', ['a', 'b', 'c', 'd', 'e'])
    seen = {}
    for seed in range(40):
        episode = sample_database_range(rng(seed), universe, 3, 4)
        seen[episode.storage[0]] = episode.storage
    assert seen['b'] == ['b', 'c', 'd']
    assert set(seen) == {'a', 'b', 'c'}
    with pytest.raises(DatasetError):
        sample_database_range(rng(), universe, 6, 2)


def test_database_range_positive_fraction():
    universe = generate_tokens(200, seed=1)
    positives = queries = 0
    for episode in sample_episodes(7, universe, TaskSpec(kind='database_range', n=20, t=20), 500):
        assert episode.storage == sorted(episode.storage)
        assert np.array_equal(np.diff(episode.storage_ids), np.ones(19))
        np.testing.assert_array_equal(episode.membership(), episode.labels)
        positives += int(episode.labels.sum())
        queries += episode.t
    assert positives / queries == pytest.approx(0.1, abs=0.015)


def test_variable_set_sizes(clusters):
    spec = TaskSpec(kind='uniform', n=20, n_min=5)
    sizes = {episode.n for episode in sample_episodes(8, clusters, spec, 60)}
    assert min(sizes) >= 5 and max(sizes) <= 20
    assert len(sizes) > 1


def test_samplers_are_deterministic(clusters):
    spec = TaskSpec(kind='class_based', n=10, t=20)
    first = sample_episodes(9, clusters, spec, 3)
    second = sample_episodes(9, clusters, spec, 3)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.storage_ids, b.storage_ids)
        np.testing.assert_array_equal(a.query_ids, b.query_ids)
    streamed = next(episode_stream(9, clusters, spec))
    assert isinstance(streamed.storage, np.ndarray)
    single = sample_episode(rng(10), clusters, spec)
    np.testing.assert_array_equal(single.membership(), single.labels)


def test_synthetic_generators():
    print("\n🧪 Testing synthetic data...")
    exact = generate_clusters(classes=3, dim=5, items_per_class=4, noise=0.0)
    for label in range(3):
        rows = exact.items[exact.labels == label]
        assert np.all(rows == rows[0])
        assert np.linalg.norm(rows[0]) == pytest.approx(1.0)

    tokens = generate_synthetic(SourceSpec(kind='synthetic_tokens', token_count=25_000, seed=4))
    again = generate_tokens(25_000, seed=4)
    assert tokens.size == 25_000
    assert tokens.checksum() == again.checksum()
    assert tokens.items == sorted(set(tokens.items))
    assert all(4 <= len(token) <= 12 and token.islower() for token in tokens.items)
    print(f"  ✅ 25,000 tokens, checksum {tokens.checksum()[:12]}")


def test_checksum_golden_values():
    """Checksums hash little-endian float64 items, then int64 labels; token files hash newline-joined text"""
    tokens = DatasetSource('token_file', ['aa', 'bb', 'cc'])
    assert tokens.checksum() == 'bb3a8f77129ee0d98b4f4a1026c8640a02deb6aba7b8baa743f17c586f13462c'

    dense = DatasetSource('synthetic_clusters', np.array([[1.0, 0.0], [0.0, -1.0]]), np.array([0, 1]))
    assert dense.checksum() == 'da4ec307e1ca87fba5adb58c137891079e2fe34ed67be10677eafa2986480fd2'
    float32 = DatasetSource('synthetic_clusters', np.array([[1.0, 0.0], [0.0, -1.0]], dtype=np.float32),
                            np.array([0, 1], dtype=np.int32))
    assert float32.checksum() == dense.checksum()


def write_idx(path, magic: int, array: np.ndarray):
    header = struct.pack('>I', magic) + struct.pack(f'>{array.ndim}I', *array.shape)
    path.write_bytes(header + array.astype(np.uint8).tobytes())
    return path


def test_load_idx(tmp_path):
    images = np.arange(3 * 2 * 2).reshape(3, 2, 2) * 20
    labels = np.array([1, 0, 1])
    source = load_idx(write_idx(tmp_path / 'images.idx', IDX_IMAGES_MAGIC, images),
                      write_idx(tmp_path / 'labels.idx', IDX_LABELS_MAGIC, labels))
    assert source.items.shape == (3, 4)
    assert source.items.max() <= 1.0
    assert source.items[2, 3] == pytest.approx(220 / 255)
    np.testing.assert_array_equal(source.labels, labels)
    assert source.manifest()['image_shape'] == [2, 2]


def test_idx_parse_errors():
    header = struct.pack('>IIII', IDX_IMAGES_MAGIC, 60000, 28, 28)
    with pytest.raises(ParseError, match='truncated') as caught:
        parse_idx(header, IDX_IMAGES_MAGIC)
    assert caught.value.offset == len(header)
    with pytest.raises(ParseError) as caught:
        parse_idx(header, IDX_LABELS_MAGIC)
    assert caught.value.offset == 0
    with pytest.raises(ParseError):
        parse_idx(b'\x00\x00', IDX_IMAGES_MAGIC)


def test_load_token_universe(tmp_path):
    path = tmp_path / 'tokens.txt'
    path.write_text('pear\napple\npear\nbanana\n\napple\n', encoding='utf-8')
    source = load_token_universe(path)
    assert source.items == ['apple', 'banana', 'pear']
    assert source.metadata['duplicates_removed'] == 2

    empty = tmp_path / 'empty.txt'
    empty.write_text('', encoding='utf-8')
    with pytest.raises(DatasetError, match='empty'):
        load_token_universe(empty)
    with pytest.raises(FileNotFoundError):
        load_source(SourceSpec(kind='token_file', path=str(tmp_path / 'missing.txt')))


def test_splits_are_disjoint(clusters):
    train, test = split(clusters, 0.2, seed=1)
    assert train.size + test.size == clusters.size
    train_rows = {row.tobytes() for row in train.items}
    assert not any(row.tobytes() in train_rows for row in test.items)
    assert set(np.unique(test.labels)) == set(range(10))

    universe = generate_tokens(500, seed=2)
    train, test = split(universe, 0.3, seed=2)
    assert not set(train.items) & set(test.items)
    assert train.items == sorted(train.items) and test.items == sorted(test.items)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
