import math

import numpy as np
import pytest

from dcdl.data import (
    DEFAULT_ASYMMETRIC_MAP,
    BalancedBatchSampler,
    Dataset,
    DatasetFormat,
    NoiseSpec,
    balanced_batch,
    inject_noise,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_gaussian_mixture,
    synth_train_test,
)


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_dataset_reads_labels_and_features(tmp_path):
    path = _write(tmp_path, "# header\n0,1.0,2.0\n\n1, 3.0 ,4.0\n")
    dataset = load_dataset(path)
    assert dataset.labels.tolist() == [0, 1]
    assert dataset.features.tolist() == [[1.0, 2.0], [3.0, 4.0]]
    assert dataset.num_classes == 2
    assert dataset.split == "train"


def test_load_dataset_label_last_and_custom_delimiter(tmp_path):
    path = _write(tmp_path, "1.0;2.0;1\n3.0;4.0;0\n")
    dataset = load_dataset(path, DatasetFormat(delimiter=";", label_position="last"), num_classes=2)
    assert dataset.labels.tolist() == [1, 0]
    assert dataset.num_classes == 2


@pytest.mark.parametrize(
    "text, message",
    [
        ("0,1.0\n1,2.0,3.0\n", ":2: expected 1 features"),
        ("0,1.0\nx,2.0\n", ":2: unknown label token"),
        ("0,1.0\n1,abc\n", ":2: malformed feature"),
        ("0\n", ":1: expected a label"),
        ("0,1.0\n5,2.0\n", ":2: label 5 out of range"),
        ("# nothing\n", "no samples"),
    ],
)
def test_load_dataset_errors_name_the_line(tmp_path, text, message):
    path = _write(tmp_path, text)
    with pytest.raises(ValueError, match=message):
        load_dataset(path, num_classes=2)


def test_load_dataset_missing_file(tmp_path):
    with pytest.raises(ValueError, match="does not exist"):
        load_dataset(tmp_path / "missing.csv")


def test_save_then_load_preserves_values(tmp_path):
    dataset = synth_gaussian_mixture(3, 4, 2, 3.0, seed=1)
    path = tmp_path / "out.csv"
    save_dataset(dataset, path)
    loaded = load_dataset(path, num_classes=3)
    assert np.array_equal(loaded.features, dataset.features)
    assert np.array_equal(loaded.labels, dataset.labels)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 1, 1], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 2], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 2)), [0], 2)


def test_synthetic_mixture_is_deterministic_and_balanced():
    first = synth_gaussian_mixture(5, 10, 8, 4.0, seed=3)
    second = synth_gaussian_mixture(5, 10, 8, 4.0, seed=3)
    assert np.array_equal(first.features, second.features)
    assert np.array_equal(first.labels, second.labels)
    assert np.bincount(first.labels).tolist() == [10] * 5
    other = synth_gaussian_mixture(5, 10, 8, 4.0, seed=4)
    assert not np.array_equal(first.features, other.features)


def test_synthetic_class_means_are_separated():
    dataset = synth_gaussian_mixture(4, 400, 6, 5.0, seed=0)
    means = np.array([dataset.features[dataset.labels == k].mean(axis=0) for k in range(4)])
    directions = means / np.linalg.norm(means, axis=1, keepdims=True)
    cosines = directions @ directions.T
    assert np.all(cosines[~np.eye(4, dtype=bool)] <= 0.5 + 0.1)


def test_synth_train_test_shapes():
    train, test = synth_train_test(3, 5, 2, 4, 3.0, seed=0)
    assert train.size == 15 and test.size == 6
    assert train.split == "train" and test.split == "test"
    assert np.bincount(test.labels).tolist() == [2, 2, 2]


def test_split_dataset_is_stratified():
    dataset = synth_gaussian_mixture(3, 8, 2, 3.0, seed=0)
    train, test = split_dataset(dataset, 0.25, seed=0)
    assert train.size + test.size == dataset.size
    assert np.bincount(test.labels).tolist() == [2, 2, 2]
    with pytest.raises(ValueError):
        split_dataset(dataset, 1.0, seed=0)


def test_clean_noise_leaves_labels_unchanged():
    labels = np.arange(10) % 3
    noisy, mask = inject_noise(labels, NoiseSpec(kind="symmetric", delta=0.0), 3)
    assert np.array_equal(noisy, labels)
    assert not mask.any()
    noisy, _ = inject_noise(labels, NoiseSpec(), 3)
    assert np.array_equal(noisy, labels)


def test_symmetric_noise_rate_matches_binomial_statistics():
    labels = np.arange(10_000) % 10
    noisy, mask = inject_noise(labels, NoiseSpec(kind="symmetric", delta=0.3, seed=7), 10)
    expected = 0.3 * 9 / 10
    sd = math.sqrt(expected * (1 - expected) / labels.size)
    assert abs(mask.mean() - expected) <= 3 * sd
    assert np.array_equal(mask, noisy != labels)


def test_noise_is_deterministic_per_seed():
    labels = np.arange(100) % 4
    spec = NoiseSpec(kind="symmetric", delta=0.5, seed=11)
    assert np.array_equal(inject_noise(labels, spec, 4)[0], inject_noise(labels, spec, 4)[0])


def test_asymmetric_forced_map():
    labels = np.zeros(20, dtype=int)
    noisy, mask = inject_noise(labels, NoiseSpec(kind="asymmetric", delta=1.0, transition_map=[(0, 1)]), 2)
    assert noisy.tolist() == [1] * 20
    assert mask.all()


def test_asymmetric_noise_touches_only_mapped_classes():
    labels = np.arange(5_000) % 10
    spec = NoiseSpec(kind="asymmetric", delta=0.2, seed=3)
    assert spec.transition_map == list(DEFAULT_ASYMMETRIC_MAP)
    noisy, mask = inject_noise(labels, spec, 10)
    sources = {source for source, _ in DEFAULT_ASYMMETRIC_MAP}
    assert set(np.unique(labels[mask]).tolist()) <= sources
    mapping = dict(DEFAULT_ASYMMETRIC_MAP)
    assert all(noisy[i] == mapping[labels[i]] for i in np.flatnonzero(mask))


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(kind="symmetric", delta=1.5)
    with pytest.raises(ValueError):
        NoiseSpec(kind="symmetric", delta=0.1, transition_map=[(0, 1)])
    with pytest.raises(ValueError):
        NoiseSpec(kind="asymmetric", delta=0.1, transition_map="0:1,0:2")
    assert NoiseSpec(kind="asymmetric", transition_map="3:5, 5:3").transition_map == [(3, 5), (5, 3)]
    with pytest.raises(ValueError):
        inject_noise(np.zeros(3, dtype=int), NoiseSpec(kind="asymmetric", delta=0.5, transition_map=[(0, 4)]), 2)


def test_sampler_full_class_batches():
    labels = np.repeat(np.arange(10), 20)
    batches = BalancedBatchSampler(labels, 100, 10, seed=0).epoch(0)
    assert len(batches) == 2
    for batch in batches:
        assert np.bincount(labels[batch], minlength=10).tolist() == [10] * 10
    assert sorted(np.concatenate(batches).tolist()) == list(range(200))


def test_sampler_pair_batches():
    labels = np.repeat(np.arange(10), 6)
    batches = BalancedBatchSampler(labels, 20, 2, seed=1).epoch(0)
    for batch in batches:
        counts = np.bincount(labels[batch], minlength=10)
        assert batch.size == 20
        assert np.all(counts == 2)
        assert len(set(batch.tolist())) == batch.size


def test_sampler_covers_every_row_each_epoch():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=57)
    labels[:8] = [0, 0, 1, 1, 2, 2, 3, 3]
    sampler = BalancedBatchSampler(labels, 6, 2, seed=5)
    for epoch in range(3):
        batches = sampler.epoch(epoch)
        assert set(np.concatenate(batches).tolist()) == set(range(labels.size))
        for batch in batches:
            counts = np.bincount(labels[batch])
            assert np.all(counts[counts > 0] >= 2)


def test_sampler_is_deterministic_and_varies_by_epoch():
    labels = np.repeat(np.arange(4), 10)
    sampler = BalancedBatchSampler(labels, 8, 2, seed=2)
    first = [b.tolist() for b in sampler.epoch(0)]
    again = [b.tolist() for b in BalancedBatchSampler(labels, 8, 2, seed=2).epoch(0)]
    assert first == again
    assert first != [b.tolist() for b in sampler.epoch(1)]


def test_sampler_rejects_small_classes():
    with pytest.raises(ValueError, match="fewer than r"):
        BalancedBatchSampler(np.array([0, 0, 1]), 4, 2, seed=0)
    with pytest.raises(ValueError):
        BalancedBatchSampler(np.array([0, 0, 1, 1]), 1, 2, seed=0)


def test_balanced_batch_position():
    dataset = synth_gaussian_mixture(2, 4, 2, 3.0, seed=0)
    batch = balanced_batch(dataset, 4, 2, seed=0, epoch=0, position=0)
    assert np.bincount(dataset.labels[batch]).tolist() == [2, 2]
    with pytest.raises(ValueError):
        balanced_batch(dataset, 4, 2, seed=0, epoch=0, position=99)
