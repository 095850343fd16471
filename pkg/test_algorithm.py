#!/usr/bin/env python3
"""
Tests for prototype pseudo-labeling, uncertainty, mixing, PML and the training loop
"""

import math

import numpy as np
import pytest
from scipy import stats

from conftest import assert_gradients_match, live_inputs
from proud import algorithm
from proud.algorithm import (
    POOLED_DOMAIN,
    PrototypeBank,
    assign_pseudo_labels,
    build_bank,
    compute_soft_prototypes,
    dapp,
    estimate_uncertainty,
    lambda_from_uncertainty,
    mixing_ratio,
    normalized_features,
    pml_loss,
    proud_train,
    refine_prototypes,
    sample_match,
    train_epoch,
    udmix,
    uncertainty_from_distances,
)
from proud.autodiff import SGD, add, backward, one_hot, scale
from proud.datagen import METRICS, DomainDataset, augment_batch, make_domain_suite, split
from proud.errors import ConfigError, DegenerateVectorError, InvariantViolation
from proud.model import (
    accuracy,
    forward_features,
    init_model,
    mixup_ce_loss,
    predict,
    pretrain,
    supervised_epoch,
)
from proud.schemas import GeneratorConfig, PretrainConfig, ProudHyper


# ------------------------------------------------------------------ #
#  brute-force oracle (independent code path: python loops over numpy rows)
# ------------------------------------------------------------------ #
def oracle_forward(m, x):
    p = {k: v.data for k, v in m.params.items()}
    h = x
    for i in range(m.depth):
        h = h @ p[f"g.{i}.weight"] + p[f"g.{i}.bias"]
        if i < m.depth - 1:
            h = np.maximum(h, 0.0)
    return h, h @ p["h.weight"] + p["h.bias"]


def oracle_distance(unit, c):
    return 1.0 - sum(a * b for a, b in zip(unit, c)) / math.sqrt(sum(v * v for v in c))


def oracle_dapp(m, x, views=()):
    """Soft, refined and final labels; ``views`` are augmented copies of x averaged into the final distances."""
    K = m.num_classes
    features, logits = oracle_forward(m, x)
    gbar = [f / math.sqrt(sum(v * v for v in f)) for f in features]
    probs = []
    for row in logits:
        e = [math.exp(z - max(row)) for z in row]
        probs.append([v / sum(e) for v in e])

    soft = []
    for k in range(K):
        num = sum(probs[i][k] * gbar[i] for i in range(len(x)))
        soft.append(num / sum(probs[i][k] for i in range(len(x))))
    first = [min(range(K), key=lambda k: oracle_distance(g, soft[k])) for g in gbar]

    refined = []
    for k in range(K):
        members = [gbar[i] for i in range(len(x)) if first[i] == k]
        refined.append(sum(members) / len(members) if members else soft[k])

    view_units = [gbar]
    for v in views:
        view_units.append([f / math.sqrt(sum(c * c for c in f)) for f in oracle_forward(m, v)[0]])

    def mean_distance(i, k):
        return sum(oracle_distance(units[i], refined[k]) for units in view_units) / len(view_units)

    final = [min(range(K), key=lambda k: mean_distance(i, k)) for i in range(len(x))]
    return np.array(soft), np.array(refined), np.array(final)


def with_random_biases(m, rng):
    """Non-zero biases everywhere, as after training, so features are non-zero almost surely."""
    for name, p in m.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.normal(scale=0.5, size=p.data.shape)
    return m


def unlabeled(x, domain_id=1):
    return DomainDataset(domain_id=domain_id, inputs=x, source_index=domain_id, role="unlabeled")


@pytest.fixture
def hyper():
    return ProudHyper(epochs=2, batch_size=32, ensemble_size=2)


@pytest.fixture
def setup(tiny_suite):
    arr = tiny_suite.arrange(0, 3)
    train, val = split(arr.labeled, seed=0)
    m = init_model(5, [8], 4, 3, seed=0)
    m, _ = pretrain(m, train, val, PretrainConfig(epochs=5, batch_size=16), seed=0)
    evaluate = lambda model: accuracy(model, arr.test.inputs, tiny_suite.ground_truth[3])  # noqa: E731
    return m, train, arr, evaluate


# ------------------------------------------------------------------ #
# 1. soft prototypes
# ------------------------------------------------------------------ #
def test_soft_prototypes_match_summation_oracle(rng):
    m = init_model(4, [6], 5, 3, seed=4)
    x = live_inputs(m, rng, 20)
    soft, _, _ = oracle_dapp(m, x)
    assert np.allclose(compute_soft_prototypes(m, unlabeled(x)), soft, atol=1e-10)


def test_identical_features_give_identical_prototypes(tiny_model, rng):
    x = np.tile(live_inputs(tiny_model, rng, 1), (2, 1))
    protos = compute_soft_prototypes(tiny_model, unlabeled(x))
    gbar = normalized_features(tiny_model, x[:1])[0]
    assert np.allclose(protos, np.tile(gbar, (3, 1)), atol=1e-12)


# ------------------------------------------------------------------ #
# 2. pseudo-label assignment and refinement
# ------------------------------------------------------------------ #
def test_sample_on_a_prototype_gets_its_class(tiny_model, rng):
    x = live_inputs(tiny_model, rng, 3)
    prototypes = normalized_features(tiny_model, x)
    assert assign_pseudo_labels(prototypes, tiny_model, unlabeled(x)).tolist() == [0, 1, 2]


def test_ties_go_to_lowest_class(tiny_model, rng):
    x = live_inputs(tiny_model, rng, 1)
    v = normalized_features(tiny_model, x)[0]
    prototypes = np.stack([-v, v, v])
    tie = np.stack([v, v, -v])
    assert assign_pseudo_labels(prototypes, tiny_model, unlabeled(x))[0] == 1
    assert assign_pseudo_labels(tie, tiny_model, unlabeled(x))[0] == 0


def test_assignment_matches_nearest_centroid_brute_force(rng):
    m = init_model(4, [6], 5, 3, seed=5)
    x = live_inputs(m, rng, 30)
    prototypes = rng.normal(size=(3, 5))
    gbar = normalized_features(m, x)
    expected = [min(range(3), key=lambda k: oracle_distance(g, prototypes[k])) for g in gbar]
    assert assign_pseudo_labels(prototypes, m, unlabeled(x)).tolist() == expected


def test_refine_all_in_one_class_keeps_fallback(tiny_model, rng):
    x = live_inputs(tiny_model, rng, 10)
    ds = unlabeled(x)
    soft = compute_soft_prototypes(tiny_model, ds)
    refined = refine_prototypes(tiny_model, ds, np.full(10, 1), fallback=soft)
    assert np.allclose(refined[1], normalized_features(tiny_model, x).mean(axis=0), atol=1e-12)
    assert np.array_equal(refined[[0, 2]], soft[[0, 2]])


def test_refine_matches_indicator_oracle(tiny_model, rng):
    x = live_inputs(tiny_model, rng, 25)
    labels = rng.integers(0, 3, size=25)
    gbar = normalized_features(tiny_model, x)
    refined = refine_prototypes(tiny_model, unlabeled(x), labels)
    for k in range(3):
        indicator = (labels == k).astype(float)
        expected = (indicator[:, None] * gbar).sum(axis=0) / indicator.sum()
        assert np.allclose(refined[k], expected, atol=1e-10)


def test_dapp_equals_brute_force_on_random_instances():
    rng = np.random.default_rng(2024)
    hyper = ProudHyper(ensemble_size=1)
    for trial in range(100):
        K = int(rng.integers(2, 5))
        d = int(rng.integers(2, 9))
        n = int(rng.integers(K, 51))
        m = init_model(4, [6], d, K, seed=trial)
        x = live_inputs(m, rng, n)
        prototypes, pseudo = dapp(m, unlabeled(x), hyper)
        _, refined, final = oracle_dapp(m, x)
        assert np.allclose(prototypes, refined, atol=1e-10), trial
        assert np.array_equal(pseudo.pseudo_labels, final), trial


def test_dapp_is_deterministic(setup, hyper):
    m, _, arr, _ = setup
    ds = arr.unlabeled[0]
    p1, d1 = dapp(m, ds, hyper, np.random.default_rng(1))
    p2, d2 = dapp(m, ds, hyper, np.random.default_rng(1))
    assert np.array_equal(p1, p2)
    assert np.array_equal(d1.pseudo_labels, d2.pseudo_labels)
    assert np.array_equal(d1.uncertainty, d2.uncertainty)


def test_dapp_with_ensemble_equals_brute_force():
    rng = np.random.default_rng(77)
    for trial in range(40):
        K = int(rng.integers(2, 5))
        d = int(rng.integers(2, 9))
        n = int(rng.integers(K, 51))
        A = int(rng.integers(2, 5))
        m = with_random_biases(init_model(4, [6], d, K, seed=trial), rng)
        x = rng.normal(size=(n, 4))
        hyper = ProudHyper(ensemble_size=A, augment_strength=0.7, augment_noise_sigma=0.4)
        seed = int(rng.integers(1 << 30))
        view_rng = np.random.default_rng(seed)
        views = [augment_batch(x, 0.7, view_rng, 0.4) for _ in range(A - 1)]

        prototypes, pseudo = dapp(m, unlabeled(x), hyper, np.random.default_rng(seed))
        _, refined, final = oracle_dapp(m, x, views)
        assert np.allclose(prototypes, refined, atol=1e-10), trial
        assert np.array_equal(pseudo.pseudo_labels, final), trial


def test_ensemble_views_use_the_configured_jitter(setup, monkeypatch):
    m, _, arr, _ = setup
    calls = []

    def recording_augment(x, strength, rng, noise_sigma):
        calls.append((strength, noise_sigma))
        return x.copy()

    monkeypatch.setattr(algorithm, "augment_batch", recording_augment)
    dapp(m, arr.unlabeled[0], ProudHyper(ensemble_size=3, augment_strength=0.3, augment_noise_sigma=2.5))
    assert calls == [(0.3, 2.5), (0.3, 2.5)]
    calls.clear()
    dapp(m, arr.unlabeled[0], ProudHyper(ensemble_size=2))
    assert calls == [(0.5, 1.0)]


def test_dapp_rejects_dead_features():
    m = init_model(5, [8], 4, 3, seed=0)
    with pytest.raises(DegenerateVectorError, match="all-zero feature"):
        dapp(m, unlabeled(np.zeros((4, 5))), ProudHyper(ensemble_size=1))


def _separated_config(n_domains, separation):
    return GeneratorConfig(
        num_classes=3,
        input_dim=4,
        n_per_domain=150,
        class_separation=separation,
        noise_sigma=1.0,
        domain_rotation_degrees=[0] * n_domains,
        domain_translation=[0] * n_domains,
        spurious_strength=0.0,
    )


def _pretrained_on(ds, epochs=20):
    train, val = split(ds, seed=0)
    m, _ = pretrain(init_model(4, [16], 8, 3, seed=0), train, val, PretrainConfig(epochs=epochs), seed=0)
    return m, train, val


def test_dapp_on_copy_of_labeled_domain_agrees_with_classifier():
    source = make_domain_suite(_separated_config(1, 12.0), seed=3).domains[0]
    m, _, _ = _pretrained_on(source)
    _, pseudo = dapp(m, unlabeled(source.inputs), ProudHyper())
    assert np.array_equal(pseudo.pseudo_labels, predict(m, source.inputs))


def test_dapp_is_nearly_exact_without_shift():
    suite = make_domain_suite(_separated_config(3, 8.0), seed=5)
    arr = suite.arrange(0, 2)
    m, _, _ = _pretrained_on(arr.labeled)
    _, pseudo = dapp(m, arr.unlabeled[0], ProudHyper())
    assert arr.ledger.accuracy(arr.unlabeled[0].source_index, pseudo.pseudo_labels, METRICS) >= 0.99


# ------------------------------------------------------------------ #
# 3. uncertainty and mixing ratio
# ------------------------------------------------------------------ #
def test_uniform_distances_give_max_entropy():
    eps = uncertainty_from_distances(np.full((3, 4), 0.7), 0.1)
    assert np.allclose(eps, math.log(4), atol=1e-12)


def test_confident_distances_give_near_zero_entropy():
    assert uncertainty_from_distances(np.array([0.0, 2.0, 2.0, 2.0]), 0.05) < 1e-10


def test_distance_scaling_equals_temperature_scaling(rng):
    d = rng.uniform(0, 2, size=(5, 4))
    c = 3.0
    assert np.allclose(uncertainty_from_distances(c * d, 0.1), uncertainty_from_distances(d, 0.1 / c), atol=1e-12)


def test_estimate_uncertainty_bounds(tiny_model, rng):
    x = live_inputs(tiny_model, rng, 40)
    prototypes = rng.normal(size=(3, 4))
    eps = estimate_uncertainty(prototypes, tiny_model, x, 0.1)
    assert np.all(eps >= 0) and np.all(eps <= math.log(3) + 1e-9)
    same = estimate_uncertainty(np.tile(prototypes[:1], (3, 1)), tiny_model, x[0], 0.1)
    assert same == pytest.approx(math.log(3), abs=1e-12)


def test_lambda_eps_shape():
    assert lambda_from_uncertainty(0.0, 0.3) == 0.5
    grid = lambda_from_uncertainty(np.linspace(0, math.log(4), 100), 0.1)
    assert np.all(np.diff(grid) < 0)
    assert np.all((grid > 0) & (grid <= 0.5))


def test_mixing_ratio_random_branch_for_confident_samples():
    hyper = ProudHyper(lambda_star=0.4)
    lam = mixing_ratio(np.zeros(5), hyper, np.random.default_rng(8))
    assert np.array_equal(lam, np.random.default_rng(8).uniform(0.0, 1.0, size=5))


def test_mixing_ratio_deterministic_for_uncertain_samples():
    hyper = ProudHyper(tau_lambda=0.1, lambda_star=0.4)
    eps = np.full(3, math.log(4))
    lam = mixing_ratio(eps, hyper, np.random.default_rng(0))
    assert np.array_equal(lam, lambda_from_uncertainty(eps, 0.1))
    assert np.all(lam < 1e-5)


def test_mixing_ratio_policies():
    eps = np.array([0.0, 1.0])
    uniform = mixing_ratio(eps, ProudHyper(mixing="uniform"), np.random.default_rng(1))
    assert np.array_equal(uniform, np.random.default_rng(1).uniform(0.0, 1.0, size=2))
    fixed = mixing_ratio(eps, ProudHyper(mixing="fixed", fixed_lambda=1.0), np.random.default_rng(1))
    assert fixed.tolist() == [1.0, 1.0]


# ------------------------------------------------------------------ #
# 4. SampleMatch / UDMix
# ------------------------------------------------------------------ #
def _labeled_pool(per_class, K=3):
    labels = np.repeat(np.arange(K), per_class)
    inputs = np.arange(labels.size * 2, dtype=float).reshape(-1, 2)
    return DomainDataset(domain_id=0, inputs=inputs, labels=labels)


def test_sample_match_draws_the_pseudo_class(rng):
    pool = _labeled_pool(4)
    x_l, y_l = sample_match(np.full(20, 2), pool, rng)
    assert np.all(y_l == 2)
    assert x_l.shape == (20, 2)


def test_sample_match_singleton_support_is_fixed(rng):
    pool = _labeled_pool(1)
    pseudo = np.array([2, 0, 1, 2])
    x_l, y_l = sample_match(pseudo, pool, rng)
    assert np.array_equal(y_l, pseudo)
    assert np.array_equal(x_l, pool.inputs[pseudo])


def test_sample_match_is_uniform_within_class():
    pool = _labeled_pool(5)
    x_l, _ = sample_match(np.full(10_000, 1), pool, np.random.default_rng(12))
    counts = np.unique(x_l[:, 0], return_counts=True)[1]
    assert counts.size == 5
    assert stats.chisquare(counts).pvalue > 0.01


def test_sample_match_missing_class_is_config_error(rng):
    pool = DomainDataset(domain_id=0, inputs=np.zeros((2, 2)), labels=[0, 0])
    with pytest.raises(ConfigError):
        sample_match(np.array([1]), pool, rng)


def test_udmix_endpoints_and_interior(rng):
    x_l, x_u = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    y = np.array([0, 1, 2])
    assert np.array_equal(udmix(x_l, y, x_u, y, np.zeros(3), 3)[0], x_l)
    assert np.array_equal(udmix(x_l, y, x_u, y, np.ones(3), 3)[0], x_u)
    mixed, targets = udmix(x_l, y, x_u, y, np.full(3, 0.6), 3)
    assert np.allclose(mixed, 0.6 * x_u + 0.4 * x_l)
    assert np.array_equal(targets, np.eye(3))


def test_udmix_rejects_class_mismatch(rng):
    x = rng.normal(size=(2, 4))
    with pytest.raises(InvariantViolation):
        udmix(x, np.array([0, 1]), x, np.array([0, 2]), np.full(2, 0.5), 3)


# ------------------------------------------------------------------ #
# 5. PML and the prototype bank
# ------------------------------------------------------------------ #
def test_pml_near_minimum(tiny_model, rng):
    x = live_inputs(tiny_model, rng, 1)
    f = forward_features(tiny_model, x).data[0]
    anchors = np.stack([f, -f, -2 * f])
    loss = pml_loss(tiny_model, x, np.array([0]), anchors)
    assert loss.item() <= math.log(1 + 2 * math.exp(-2)) + 1e-12


def test_pml_equidistant_anchors_cost_log_k(tiny_model, rng):
    x = live_inputs(tiny_model, rng, 4)
    anchors = np.tile(rng.normal(size=(1, 4)), (3, 1))
    loss = pml_loss(tiny_model, x, np.array([0, 1, 2, 0]), anchors)
    assert loss.item() == pytest.approx(4 * math.log(3), abs=1e-12)
    mean = pml_loss(tiny_model, x, np.array([0, 1, 2, 0]), anchors, reduction="mean")
    assert mean.item() == pytest.approx(math.log(3), abs=1e-12)


def test_pml_gradients_reach_only_the_feature_extractor(rng):
    m = init_model(5, [6], 4, 3, seed=3)
    x = live_inputs(m, rng, 6)
    labels = rng.integers(0, 3, size=6)
    anchors = rng.normal(size=(3, 4))
    grads = backward(pml_loss(m, x, labels, anchors))
    g_params = {id(p) for name, p in m.named_parameters() if name.startswith("g.")}
    assert {id(p) for p in grads} == g_params
    assert_gradients_match(lambda: pml_loss(m, x, labels, anchors), [p for n, p in m.named_parameters() if n.startswith("g.")])


def test_full_loss_gradients_cover_exactly_the_model(tiny_model, rng):
    x = live_inputs(tiny_model, rng, 6)
    labels = rng.integers(0, 3, size=6)
    targets = np.eye(3)[labels]
    bank = PrototypeBank.build({0: rng.normal(size=(3, 4)), 1: rng.normal(size=(3, 4))})
    loss = add(mixup_ce_loss(tiny_model, x, targets, 0.2, rng), scale(pml_loss(tiny_model, x, labels, bank), 1.0))
    grads = backward(loss)
    assert len(grads) == len(tiny_model.parameters())
    assert {id(p) for p in grads} == {id(p) for p in tiny_model.parameters()}


def test_bank_anchors_are_the_exact_mean(rng):
    protos = {t: rng.normal(size=(3, 4)) for t in range(3)}
    bank = PrototypeBank.build(protos)
    assert np.array_equal(bank.anchors, np.stack([bank.prototypes[t] for t in range(3)]).mean(axis=0))
    bank.check_anchors()
    bank.prototypes[1][0, 0] += 1.0
    with pytest.raises(InvariantViolation):
        bank.check_anchors()


def test_bank_spread_is_zero_for_identical_domains(rng):
    p = rng.normal(size=(3, 4))
    assert PrototypeBank.build({0: p, 1: p.copy()}).spread() == pytest.approx(0.0, abs=1e-12)


# ------------------------------------------------------------------ #
# 6. bank construction, epochs, full loop
# ------------------------------------------------------------------ #
def test_build_bank_includes_labeled_prototypes(setup, hyper):
    m, train, arr, _ = setup
    bank, pseudo = build_bank(m, train, arr.unlabeled, hyper, np.random.default_rng(0))
    assert sorted(bank.prototypes) == [0, 1, 2]
    assert [d.domain_id for d in pseudo] == [1, 2]
    for d in pseudo:
        assert np.all(d.uncertainty <= math.log(3) + 1e-9)
        assert np.all((d.lambda_eps > 0) & (d.lambda_eps <= 0.5))
        assert np.array_equal(d.lambda_eps, lambda_from_uncertainty(d.uncertainty, hyper.tau_lambda))

    without = hyper.model_copy(update={"anchors_include_labeled": False})
    bank, _ = build_bank(m, train, arr.unlabeled, without, np.random.default_rng(0))
    assert sorted(bank.prototypes) == [1, 2]


def test_build_bank_pooled_variant(setup, hyper):
    m, train, arr, _ = setup
    pooled = hyper.model_copy(update={"domain_aware": False})
    bank, pseudo = build_bank(m, train, arr.unlabeled, pooled, np.random.default_rng(0))
    assert sorted(bank.prototypes) == [0, POOLED_DOMAIN]
    assert [len(d) for d in pseudo] == [ds.n for ds in arr.unlabeled]
    assert [d.source_index for d in pseudo] == [1, 2]


def test_single_step_when_batch_covers_everything(setup, hyper):
    m, train, arr, _ = setup
    big = hyper.model_copy(update={"batch_size": 10_000})
    bank, pseudo = build_bank(m, train, arr.unlabeled, big, np.random.default_rng(0))
    stats_ = train_epoch(m, train, pseudo, bank, big, np.random.default_rng(0), ledger=arr.ledger)
    assert stats_.steps == 1
    assert set(stats_.pl_acc) == {1, 2}
    assert all(0 <= v <= 1 for v in stats_.mean_lambda.values())


def test_train_epoch_is_deterministic(setup, hyper):
    m, train, arr, _ = setup
    results = []
    for _ in range(2):
        model = m.copy()
        bank, pseudo = build_bank(model, train, arr.unlabeled, hyper, np.random.default_rng(5))
        stats_ = train_epoch(model, train, pseudo, bank, hyper, np.random.default_rng(5), ledger=arr.ledger)
        results.append((stats_, model.state_dict()))
    (s1, w1), (s2, w2) = results
    assert s1 == s2
    assert all(np.array_equal(w1[k], w2[k]) for k in w1)


def test_train_epoch_reads_hidden_labels_only_for_metrics(setup, hyper):
    m, train, arr, _ = setup
    bank, pseudo = build_bank(m, train, arr.unlabeled, hyper, np.random.default_rng(0))
    assert arr.ledger.reads == []
    train_epoch(m, train, pseudo, bank, hyper, np.random.default_rng(0))
    assert arr.ledger.reads == []


def test_single_sample_last_batch_falls_back(setup, hyper):
    m, train, arr, _ = setup
    n = sum(ds.n for ds in arr.unlabeled)
    odd = hyper.model_copy(update={"batch_size": n - 1})
    bank, pseudo = build_bank(m, train, arr.unlabeled, odd, np.random.default_rng(0))
    assert train_epoch(m, train, pseudo, bank, odd, np.random.default_rng(0)).steps == 2


def test_epoch_without_pml_or_unlabeled_share_matches_plain_training():
    suite = make_domain_suite(_separated_config(3, 6.0), seed=9)
    arr = suite.arrange(0, 2)
    m, train, _ = _pretrained_on(arr.labeled, epochs=5)
    test_x, test_y = arr.test.inputs, suite.ground_truth[2]
    hyper = ProudHyper(alpha=0.0, mixing="fixed", fixed_lambda=0.0, batch_size=32)

    mixed = m.copy()
    bank, pseudo = build_bank(mixed, train, arr.unlabeled, hyper, np.random.default_rng(1))
    stats_ = train_epoch(mixed, train, pseudo, bank, hyper, np.random.default_rng(1))
    assert stats_.loss_pml == 0.0
    assert all(v == 0.0 for v in stats_.mean_lambda.values())

    plain = m.copy()
    optimizer = SGD(plain.parameters(), hyper.lr, hyper.momentum, hyper.weight_decay)
    supervised_epoch(plain, train.inputs, one_hot(train.labels, 3), optimizer, hyper.batch_size, np.random.default_rng(1))

    before = accuracy(m, test_x, test_y)
    mixed_change = accuracy(mixed, test_x, test_y) - before
    plain_change = accuracy(plain, test_x, test_y) - before
    assert abs(mixed_change - plain_change) <= 0.02


def test_zero_epochs_returns_model_unchanged(setup, hyper):
    m, train, arr, evaluate = setup
    before = m.state_dict()
    result = proud_train(m, train, arr.unlabeled, evaluate, hyper.model_copy(update={"epochs": 0}), seed=0)
    assert result.history == []
    assert all(np.array_equal(p.data, before[k]) for k, p in result.model.named_parameters())


def test_proud_train_history_is_reproducible(setup, hyper):
    m, train, arr, evaluate = setup
    first = proud_train(m.copy(), train, arr.unlabeled, evaluate, hyper, seed=11, ledger=arr.ledger)
    second = proud_train(m.copy(), train, arr.unlabeled, evaluate, hyper, seed=11, ledger=arr.ledger)
    assert len(first.history) == hyper.epochs
    assert first.history == second.history
    record = first.history[-1]
    assert set(record.pl_acc) == {1, 2} and set(record.mean_lambda) == {1, 2}
    assert record.prototype_spread is not None
    first.bank.check_anchors()
