#!/usr/bin/env python3
"""
Tests for synthetic suites, role arrangement, stratified split and augmentation
"""

import numpy as np
import pytest
from scipy import stats

from proud.datagen import (
    METRICS,
    DomainDataset,
    augment,
    augment_batch,
    class_means,
    make_domain_suite,
    split,
)
from proud.errors import ConfigError, IsolationError, StratificationError
from proud.schemas import GeneratorConfig


# ------------------------------------------------------------------ #
# 1. make_domain_suite
# ------------------------------------------------------------------ #
def test_suite_is_deterministic(tiny_gen_config):
    a, b = make_domain_suite(tiny_gen_config), make_domain_suite(tiny_gen_config)
    for da, db in zip(a.domains, b.domains):
        assert da.inputs.tobytes() == db.inputs.tobytes()
    for t in a.ground_truth:
        assert np.array_equal(a.ground_truth[t], b.ground_truth[t])


def test_suite_shape_roles_and_balance(tiny_gen_config):
    suite = make_domain_suite(tiny_gen_config)
    assert suite.n_domains == 4
    assert [d.role for d in suite.domains] == ["labeled", "unlabeled", "unlabeled", "test"]
    assert suite.domains[0].labels is not None
    assert all(d.labels is None for d in suite.domains[1:])
    for t, labels in suite.ground_truth.items():
        counts = np.bincount(labels, minlength=3)
        assert counts.max() - counts.min() <= 1
        assert suite.domains[t].inputs.shape == (60, 5)


def test_suite_rejects_small_domains():
    with pytest.raises(ConfigError):
        make_domain_suite(GeneratorConfig(num_classes=4, n_per_domain=15))


def test_half_turn_maps_class_clouds():
    cfg = GeneratorConfig(
        num_classes=4,
        input_dim=4,
        n_per_domain=400,
        domain_rotation_degrees=[0, 180],
        domain_translation=[0, 0],
        spurious_strength=0.0,
        noise_sigma=0.3,
    )
    suite = make_domain_suite(cfg, seed=1)
    means = class_means(cfg)
    rotated = suite.domains[1].inputs
    labels = suite.ground_truth[1]
    for k in range(4):
        cloud_mean = rotated[labels == k, :2].mean(axis=0)
        assert np.allclose(cloud_mean, means[(k + 2) % 4, :2], atol=0.15)


def test_spurious_coordinate_indicates_domain(tiny_gen_config):
    suite = make_domain_suite(tiny_gen_config)
    last = [d.inputs[:, -1].mean() for d in suite.domains]
    assert last == sorted(last)


# ------------------------------------------------------------------ #
# 2. arrangement and the hidden-label ledger
# ------------------------------------------------------------------ #
def test_arrange_assigns_roles(tiny_suite):
    arr = tiny_suite.arrange(2, 0)
    assert arr.labeled.source_index == 2 and arr.labeled.labels is not None
    assert [d.source_index for d in arr.unlabeled] == [1, 3]
    assert [d.domain_id for d in arr.unlabeled] == [1, 2]
    assert all(d.labels is None for d in arr.unlabeled)
    assert arr.test.source_index == 0 and arr.test.labels is None


def test_arrange_rejects_bad_combinations(tiny_suite):
    with pytest.raises(ConfigError, match="disjoint"):
        tiny_suite.arrange(1, 1)
    with pytest.raises(ConfigError):
        tiny_suite.arrange(0, 9)


def test_ledger_requires_capability(tiny_suite):
    arr = tiny_suite.arrange(0, 3)
    with pytest.raises(IsolationError):
        arr.ledger.labels(1, capability=object())
    assert arr.ledger.reads == []
    truth = arr.ledger.labels(1, METRICS)
    assert np.array_equal(truth, tiny_suite.ground_truth[1])
    assert arr.ledger.accuracy(1, truth, METRICS) == 1.0
    assert arr.ledger.reads == [1, 1]


def test_unlabeled_domain_has_no_class_counts():
    ds = DomainDataset(domain_id=1, inputs=np.zeros((3, 2)), role="unlabeled")
    with pytest.raises(IsolationError):
        ds.class_counts(2)


# ------------------------------------------------------------------ #
# 3. split
# ------------------------------------------------------------------ #
def _labeled(n, K, seed=0):
    rng = np.random.default_rng(seed)
    return DomainDataset(domain_id=0, inputs=rng.normal(size=(n, 3)), labels=np.arange(n) % K)


def test_split_nine_to_one():
    train, val = split(_labeled(1000, 4), (0.9, 0.1), seed=3)
    assert (train.n, val.n) == (900, 100)
    assert np.bincount(train.labels).tolist() == [225] * 4
    assert np.bincount(val.labels).tolist() == [25] * 4


def test_split_eight_to_two():
    train, val = split(_labeled(1000, 4), (0.8, 0.2), seed=3)
    assert (train.n, val.n) == (800, 200)


def test_split_is_a_deterministic_partition():
    ds = _labeled(101, 3)
    train, val = split(ds, seed=5)
    again, _ = split(ds, seed=5)
    assert np.array_equal(train.inputs, again.inputs)
    rows = {r.tobytes() for r in train.inputs} | {r.tobytes() for r in val.inputs}
    assert len(rows) == ds.n == train.n + val.n


def test_split_needs_two_per_class():
    ds = DomainDataset(domain_id=0, inputs=np.zeros((5, 2)), labels=[0, 0, 1, 1, 2])
    with pytest.raises(StratificationError):
        split(ds)


# ------------------------------------------------------------------ #
# 4. augment
# ------------------------------------------------------------------ #
def test_augment_strength_zero_is_identity(rng):
    x = rng.normal(size=5)
    assert np.array_equal(augment(x, 0.0, rng), x)


def test_augment_same_state_same_output():
    x = np.arange(5.0)
    a = augment(x, 1.0, np.random.default_rng(11))
    b = augment(x, 1.0, np.random.default_rng(11))
    assert np.array_equal(a, b)


def test_augment_mean_converges_to_shrunk_input():
    rng = np.random.default_rng(4)
    x = np.array([1.0, -0.5, 0.3, 2.0])
    strength = 4.0
    draws = augment_batch(np.tile(x, (10_000, 1)), strength, rng, noise_sigma=0.01)
    limit = np.deg2rad(5.0 * strength)
    expected = x.copy()
    expected[:2] *= np.sin(limit) / limit  # E[cos] of a uniform angle in [-limit, limit]
    stderr = draws.std(axis=0) / np.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - expected) < 3 * stderr)
    # the shrink is many standard errors wide at this strength
    assert abs(x[0] - expected[0]) > 5 * stderr[0]


def test_augment_jitter_scales_with_noise_sigma():
    rng = np.random.default_rng(9)
    x = np.zeros((20_000, 6))
    for strength, noise_sigma in [(0.5, 1.0), (1.0, 0.5), (0.5, 2.0)]:
        jitter = augment_batch(x, strength, rng, noise_sigma)
        assert jitter.std() == pytest.approx(strength * noise_sigma, rel=0.02)


def test_augment_default_jitter_is_the_generator_noise():
    x = np.zeros((20_000, 3))
    jitter = augment_batch(x, 0.5, np.random.default_rng(2))
    assert jitter.std() == pytest.approx(0.5 * GeneratorConfig().noise_sigma, rel=0.02)


@pytest.mark.slow
def test_rotation_lowers_labeled_only_accuracy():
    from proud.model import accuracy, init_model, pretrain
    from proud.schemas import PretrainConfig

    angles, scores = [], []
    for angle in (0.0, 30.0, 60.0):
        for seed in (2022, 2023, 2024):
            cfg = GeneratorConfig(
                input_dim=8,
                n_per_domain=300,
                domain_rotation_degrees=[0, angle],
                domain_translation=[0, 0],
                spurious_strength=0.0,
            )
            suite = make_domain_suite(cfg, seed)
            train, val = split(suite.domains[0], seed=seed)
            m, _ = pretrain(init_model(8, [32], 8, 4, seed), train, val, PretrainConfig(epochs=20), seed)
            angles.append(angle)
            scores.append(accuracy(m, suite.domains[1].inputs, suite.ground_truth[1]))
    assert stats.spearmanr(angles, scores).correlation < 0
