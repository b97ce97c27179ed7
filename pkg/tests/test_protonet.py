import math

import numpy as np
import pytest

from protofssl.errors import ConfigurationError, DimensionError, EmptySupportError
from protofssl.protonet import (PrototypeSet, SslHyperparams, average_over_helpers, build_prototypes,
                                class_probabilities, combined_loss, episode_loss_and_grads,
                                make_prototype, prototypical_loss, pseudo_label, sharpen)

from oracles import (naive_class_probs, naive_mean, naive_proto_loss, naive_sharpen,
                     naive_unlabeled_loss)


def pset(vectors, n_classes, owner=0):
    return PrototypeSet(owner, 0, n_classes, {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()},
                        {k: 1 for k in vectors})


def test_make_prototype_examples(rng):
    np.testing.assert_array_equal(make_prototype([[1.0, 2.0]]), [1.0, 2.0])
    np.testing.assert_allclose(make_prototype([[0.0, 0.0], [2.0, 4.0]]), [1.0, 2.0])
    rows = rng.normal(size=(7, 5))
    np.testing.assert_allclose(make_prototype(rows), naive_mean(rows), rtol=1e-12)
    with pytest.raises(EmptySupportError):
        make_prototype(np.zeros((0, 3)))


def test_build_prototypes_groups_by_label(rng):
    emb = rng.normal(size=(9, 3))
    labels = np.array([0, 2, 2, 0, 2, 0, 0, 2, 2])
    p = build_prototypes(emb, labels, 4, owner_id=3, round=5)
    assert p.class_present == {0, 2}
    assert p.counts == {0: 4, 2: 5}
    for k in (0, 2):
        np.testing.assert_allclose(p.vectors[k], naive_mean(emb[labels == k]), rtol=1e-6)


def test_equidistant_prototypes_give_uniform_probabilities():
    p = class_probabilities([0.0, 0.0], pset({0: [1, 0], 1: [0, 1], 2: [-1, 0]}, 3))
    np.testing.assert_allclose(p, [1 / 3] * 3, rtol=1e-12)


def test_class_probabilities_worked_example():
    # squared distances [0, ln 4, ln 4] -> weights [1, 1/4, 1/4]
    r = math.sqrt(math.log(4.0))
    p = class_probabilities([0.0, 0.0], pset({0: [0, 0], 1: [r, 0], 2: [0, r]}, 3))
    np.testing.assert_allclose(p, [2 / 3, 1 / 6, 1 / 6], rtol=1e-12)


def test_absent_classes_get_zero_probability():
    p = class_probabilities([0.3, -0.2], pset({1: [0, 0], 3: [1, 1]}, 5))
    assert p[0] == p[2] == p[4] == 0.0
    assert p.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("metric,squared", [("sqeuclidean", True), ("euclidean", False)])
def test_class_probabilities_match_oracle(metric, squared):
    rng = np.random.default_rng(5)
    for _ in range(100):
        k, d = int(rng.integers(2, 8)), int(rng.integers(1, 6))
        present = sorted(rng.choice(k, size=int(rng.integers(1, k + 1)), replace=False).tolist())
        protos = {c: rng.normal(size=d) for c in present}
        x = rng.normal(size=d)
        got = class_probabilities(x, pset(protos, k), metric)
        np.testing.assert_allclose(got, naive_class_probs(x, protos, k, squared), rtol=1e-5, atol=1e-12)


def test_class_probabilities_shift_invariant(rng):
    protos = {c: rng.normal(size=4) for c in range(3)}
    x = rng.normal(size=4)
    shift = rng.normal(size=4) * 10
    a = class_probabilities(x, pset(protos, 3))
    b = class_probabilities(x + shift, pset({c: v + shift for c, v in protos.items()}, 3))
    np.testing.assert_allclose(a, b, rtol=1e-8)


def test_class_probabilities_batch_matches_rows(rng):
    ps = pset({c: rng.normal(size=3) for c in range(4)}, 4)
    xs = rng.normal(size=(6, 3))
    batch = class_probabilities(xs, ps)
    for i in range(6):
        np.testing.assert_allclose(batch[i], class_probabilities(xs[i], ps), rtol=1e-12)


def test_far_queries_stay_finite():
    p = class_probabilities([1e3, 0.0], pset({0: [0, 0], 1: [1, 0]}, 2))
    assert np.all(np.isfinite(p))
    assert p[1] == pytest.approx(1.0)


def test_average_over_helpers():
    np.testing.assert_allclose(average_over_helpers([[0.2, 0.8]]), [0.2, 0.8])
    np.testing.assert_allclose(average_over_helpers([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])
    # a helper missing a class contributes zero there
    np.testing.assert_allclose(average_over_helpers([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5]]), [0.25, 0.5, 0.25])
    with pytest.raises(ValueError):
        average_over_helpers([])


def test_sharpen_examples():
    np.testing.assert_allclose(sharpen([0.3, 0.7], 1.0), [0.3, 0.7], rtol=1e-12)
    np.testing.assert_allclose(sharpen([0.5, 0.5], 0.1), [0.5, 0.5], rtol=1e-12)
    np.testing.assert_allclose(sharpen([0.8, 0.2], 0.5), [0.9411764705882353, 0.058823529411764705],
                               rtol=1e-12)
    np.testing.assert_array_equal(sharpen([0.0, 1.0, 0.0], 0.5), [0.0, 1.0, 0.0])
    with pytest.raises(ConfigurationError):
        sharpen([0.5, 0.5], 0.0)


def test_sharpen_properties(rng):
    for _ in range(100):
        p = rng.dirichlet(np.ones(int(rng.integers(2, 8))))
        T = float(rng.uniform(0.05, 0.99))
        s = sharpen(p, T)
        np.testing.assert_allclose(s, naive_sharpen(p, T), rtol=1e-5)
        assert s.sum() == pytest.approx(1.0)
        assert s.max() >= p.max() - 1e-12
        assert np.argmax(s) == np.argmax(p)


def test_sharpen_low_temperature_does_not_overflow():
    s = sharpen([0.6, 0.4], 1e-4)
    assert np.all(np.isfinite(s))
    assert s[0] == pytest.approx(1.0)


def test_pseudo_label_single_helper_equals_sharpened_posterior(rng):
    h = pset({c: rng.normal(size=3) for c in range(3)}, 3)
    u = rng.normal(size=3)
    np.testing.assert_allclose(pseudo_label(u, [h], 0.5), sharpen(class_probabilities(u, h), 0.5))


def test_pseudo_label_is_helper_order_invariant(rng):
    helpers = [pset({c: rng.normal(size=3) for c in range(4)}, 4, owner=i) for i in range(5)]
    u = rng.normal(size=3)
    a = pseudo_label(u, helpers, 0.5)
    b = pseudo_label(u, helpers[::-1], 0.5)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    assert a.sum() == pytest.approx(1.0)


def test_pseudo_label_helper_with_partial_classes():
    full = pset({0: [0.0], 1: [10.0]}, 2)
    partial = pset({1: [0.0]}, 2)
    p = pseudo_label([0.0], [full, partial], 1.0)
    # full says ~[1, 0], partial says [0, 1] -> average [0.5, 0.5]
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-12)


def test_prototypical_loss_examples():
    protos = pset({0: [0.0, 0.0], 1: [10.0, 0.0]}, 2)
    assert prototypical_loss({0: [[0.0, 0.0]], 1: [[10.0, 0.0]]}, protos) < 1e-6
    same = pset({0: [1.0, 1.0], 1: [1.0, 1.0], 2: [1.0, 1.0]}, 3)
    assert prototypical_loss({0: [[0.0, 3.0]], 2: [[5.0, 1.0]]}, same) == pytest.approx(math.log(3))


def test_prototypical_loss_matches_oracle():
    rng = np.random.default_rng(9)
    for _ in range(100):
        k, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        protos = {c: rng.normal(size=d) for c in range(k)}
        queries = {c: rng.normal(size=(int(rng.integers(1, 4)), d)) for c in range(k) if rng.random() < 0.7}
        if not queries:
            queries = {0: rng.normal(size=(1, d))}
        got = prototypical_loss(queries, pset(protos, k))
        assert got == pytest.approx(naive_proto_loss(queries, protos, k), rel=1e-5)


def test_query_for_missing_prototype_is_an_error():
    with pytest.raises(EmptySupportError):
        prototypical_loss({2: [[0.0]]}, pset({0: [0.0], 1: [1.0]}, 3))


def test_combined_loss_examples(rng):
    protos = {c: rng.normal(size=3) for c in range(3)}
    ps = pset(protos, 3)
    lq = {c: rng.normal(size=(2, 3)) for c in range(3)}
    u = rng.normal(size=(5, 3))
    pseudo = rng.dirichlet(np.ones(3), size=5)
    lab = prototypical_loss(lq, ps)
    assert combined_loss(lq, u, pseudo, ps, 0.0) == pytest.approx(lab, rel=1e-12)
    expected = lab + 0.3 * naive_unlabeled_loss(u, pseudo, protos, 3)
    assert combined_loss(lq, u, pseudo, ps, 0.3) == pytest.approx(expected, rel=1e-5)
    losses = [combined_loss(lq, u, pseudo, ps, lam) for lam in (0.0, 0.1, 0.5, 1.0)]
    assert losses == sorted(losses)


def test_combined_loss_uniform_case_is_log_k():
    same = pset({c: [0.0, 0.0] for c in range(4)}, 4)
    lq = {0: [[1.0, 2.0]]}
    u = [[3.0, 1.0], [0.0, 0.0]]
    pseudo = np.full((2, 4), 0.25)
    assert combined_loss(lq, u, pseudo, same, 1.0) == pytest.approx(2 * math.log(4))


def test_combined_loss_pseudo_label_count_mismatch():
    ps = pset({0: [0.0], 1: [1.0]}, 2)
    with pytest.raises(DimensionError):
        combined_loss({0: [[0.0]]}, [[0.0], [1.0]], [[0.5, 0.5]], ps, 0.3)


def test_episode_losses_agree_with_combined_loss(rng):
    k, d = 3, 4
    support = rng.normal(size=(2 * k, d))
    sl = np.tile(np.arange(k), 2)
    query = rng.normal(size=(k, d))
    ql = np.arange(k)
    u = rng.normal(size=(6, d))
    pseudo = sharpen(rng.dirichlet(np.ones(k), size=6), 0.5)
    res = episode_loss_and_grads(support, sl, query, ql, u, pseudo, 0.3, k)
    ps = build_prototypes(support, sl, k)
    expected = combined_loss({c: query[ql == c] for c in range(k)}, u, pseudo, ps, 0.3)
    assert res.total == pytest.approx(expected, rel=1e-10)
    assert res.grad_support.shape == support.shape
    assert res.grad_unlabeled.shape == u.shape


def test_episode_gradients_match_finite_differences(rng):
    k, d = 3, 2
    support = rng.normal(size=(k, d))
    sl = np.arange(k)
    query = rng.normal(size=(2 * k, d))
    ql = np.repeat(np.arange(k), 2)
    u = rng.normal(size=(4, d))
    pseudo = rng.dirichlet(np.ones(k), size=4)

    def total(s, q, uu):
        return episode_loss_and_grads(s, sl, q, ql, uu, pseudo, 0.3, k).total

    res = episode_loss_and_grads(support, sl, query, ql, u, pseudo, 0.3, k)
    h = 1e-6
    for arr, grad, pos in ((support, res.grad_support, 0), (query, res.grad_query, 1), (u, res.grad_unlabeled, 2)):
        for idx in np.ndindex(arr.shape):
            args_p = [support.copy(), query.copy(), u.copy()]
            args_m = [support.copy(), query.copy(), u.copy()]
            args_p[pos][idx] += h
            args_m[pos][idx] -= h
            num = (total(*args_p) - total(*args_m)) / (2 * h)
            assert grad[idx] == pytest.approx(num, rel=1e-5, abs=1e-8)


def test_episode_with_fixed_prototypes_has_no_support_gradient(rng):
    fixed = pset({0: [0.0, 0.0], 1: [1.0, 1.0]}, 2)
    res = episode_loss_and_grads(np.zeros((0, 2)), np.zeros(0, np.int64), rng.normal(size=(4, 2)),
                                 np.array([0, 1, 0, 1]), np.zeros((0, 2)), np.zeros((0, 2)), 0.0, 2,
                                 fixed_protos=fixed)
    assert res.grad_support.size == 0
    assert res.unlabeled_loss == 0.0


@pytest.mark.parametrize("kwargs", [dict(temperature=0), dict(unlabeled_weight=-0.1), dict(n_support=0),
                                    dict(metric="cosine")])
def test_ssl_hyperparams_validation(kwargs):
    with pytest.raises(ConfigurationError):
        SslHyperparams(**kwargs)


def test_prototype_set_rejects_bad_input():
    with pytest.raises(DimensionError):
        pset({3: [0.0]}, 2)
    with pytest.raises(ValueError):
        pset({0: [np.nan]}, 2)
    with pytest.raises(EmptySupportError):
        PrototypeSet(0, 0, 2).matrix()
