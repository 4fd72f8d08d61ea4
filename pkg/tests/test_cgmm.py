import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facegen import cgmm, nn
from facegen.cgmm import (
    VAR_FLOOR, AttributeGaussian, CgmmError, CgmmModel, WeightDivergenceError,
)
from facegen.data import Dataset


def model_from_means(means, weights=None, lam=0.0, var=None):
    means = np.asarray(means, dtype=np.float64)
    gs = [AttributeGaussian(m.copy(), np.full(m.shape, VAR_FLOOR) if var is None else var[i].copy(), 10)
          for i, m in enumerate(means)]
    return CgmmModel(0, [f"a{i}" for i in range(len(gs))], gs, weights, lam)


def random_instance(gen, n=12, attrs=5, dim=20, lam=1e-2):
    model = model_from_means(gen.normal(size=(attrs, dim)), gen.normal(1, 0.3, attrs), lam)
    acts = gen.normal(size=(n, dim))
    sets = [sorted(gen.choice(attrs, size=gen.integers(1, attrs + 1), replace=False).tolist()) for _ in range(n)]
    return model, acts, sets


def naive_objective(model, acts, sets, w):
    total = 0.0
    for i, c in enumerate(sets):
        phi = np.zeros(model.dim)
        for j in c:
            phi += w[j] * model.gaussians[j].mu
        phi /= len(c)
        for u in range(model.dim):
            total += (acts[i, u] - phi[u]) ** 2
    return total / len(sets) + model.lam * sum(x * x for x in w)


# --- collect_activations ---------------------------------------------------

def test_collect_activations_matches_per_image(small_net, schema, gen):
    spec, params = small_net
    imgs = gen.random((6,) + spec.input_shape)
    imgs[5] = imgs[0]
    d = Dataset(schema, imgs, np.zeros((6, 6)))
    acts = cgmm.collect_activations(spec, params, d, range(6), 6)
    assert acts.shape == (6, int(np.prod(spec.output_shape(6))))
    np.testing.assert_array_equal(acts[0], acts[5])
    for i in range(6):
        one = nn.forward(spec, params, imgs[i]).activation(6).ravel()
        np.testing.assert_array_equal(acts[i], one)
    with pytest.raises(CgmmError):
        cgmm.collect_activations(spec, params, d, [], 6)


# --- fit_gaussian ----------------------------------------------------------

def test_fit_gaussian_two_points():
    g = cgmm.fit_gaussian([[0.0, 2.0], [2.0, 0.0]])
    np.testing.assert_array_equal(g.mu, [1.0, 1.0])
    np.testing.assert_array_equal(g.var, [2.0, 2.0])
    assert g.count == 2 and g.usable


def test_fit_gaussian_floor():
    g = cgmm.fit_gaussian(np.full((5, 3), 0.7))
    np.testing.assert_array_equal(g.var, np.full(3, VAR_FLOOR))


def test_fit_gaussian_needs_two():
    with pytest.raises(CgmmError):
        cgmm.fit_gaussian([[1.0, 2.0]])


def test_fit_gaussian_converges(gen):
    x = gen.normal(3.0, 2.0, size=(10000, 8))
    g = cgmm.fit_gaussian(x)
    assert np.all(np.abs(g.mu - 3.0) <= 5 * 2 / 100)
    assert np.all(np.abs(g.var - 4.0) <= 0.4)


def test_fit_gaussian_two_pass_oracle(gen):
    x = gen.normal(1.0, 3.0, size=(37, 6))
    g = cgmm.fit_gaussian(x)
    for u in range(6):
        m = sum(x[:, u]) / 37
        v = sum((x[i, u] - m) ** 2 for i in range(37)) / 36
        assert g.mu[u] == pytest.approx(m, rel=1e-12)
        assert g.var[u] == pytest.approx(v, rel=1e-12)


# --- sample_target ---------------------------------------------------------

def test_sample_target_single_attribute(gen):
    mu = gen.normal(size=(3, 4))
    np.testing.assert_array_equal(cgmm.sample_target(model_from_means(mu), [1]), mu[1])


def test_sample_target_weighted_pair():
    model = model_from_means([[1.0, 0.0], [0.0, 1.0]], weights=[2.0, 4.0])
    np.testing.assert_array_equal(cgmm.sample_target(model, [0, 1]), [1.0, 2.0])


def test_sample_target_linear_in_weights(gen):
    model = model_from_means(gen.normal(size=(4, 6)), gen.normal(size=4))
    t = cgmm.sample_target(model, [0, 2, 3])
    t3 = cgmm.sample_target(model.with_weights(3 * model.weights), [0, 2, 3])
    np.testing.assert_allclose(t3, 3 * t, rtol=1e-12)


def test_sample_mode_degenerate_and_seeded(gen):
    mu = gen.normal(size=(3, 5))
    tight = model_from_means(mu, var=np.full((3, 5), 1e-30))
    np.testing.assert_allclose(cgmm.sample_target(tight, [0, 1], "sample", 4), cgmm.sample_target(tight, [0, 1]), atol=1e-12)
    wide = model_from_means(mu, var=np.ones((3, 5)))
    a = cgmm.sample_target(wide, [0, 2], "sample", seed=1)
    assert a.tobytes() == cgmm.sample_target(wide, [0, 2], "sample", seed=1).tobytes()
    assert a.tobytes() != cgmm.sample_target(wide, [0, 2], "sample", seed=2).tobytes()


def test_sample_target_errors(gen):
    model = model_from_means(gen.normal(size=(2, 3)))
    model.gaussians[1] = cgmm.unusable_gaussian(3, 1)
    with pytest.raises(CgmmError):
        cgmm.sample_target(model, [])
    with pytest.raises(CgmmError, match="a1"):
        cgmm.sample_target(model, [0, 1])
    with pytest.raises(CgmmError):
        cgmm.sample_target(model, [0], mode="median")


# --- objective and gradient ------------------------------------------------

def test_objective_at_zero_weights(gen):
    model, acts, sets = random_instance(gen)
    f = cgmm.weight_objective(model, acts, sets, np.zeros(5))
    assert f == pytest.approx(np.sum(acts**2) / len(acts), rel=1e-12)


def test_objective_and_gradient_at_exact_fit(gen):
    mu = gen.normal(size=(2, 4))
    model = model_from_means(mu, [1.0, 1.0], lam=0.0)
    assert cgmm.weight_objective(model, mu[:1], [[0]]) == 0.0
    np.testing.assert_array_equal(cgmm.weight_gradient(model, mu[:1], [[0]]), [0.0, 0.0])


def test_objective_matches_naive_loop(gen):
    model, acts, sets = random_instance(gen)
    w = gen.normal(size=5)
    assert cgmm.weight_objective(model, acts, sets, w) == pytest.approx(naive_objective(model, acts, sets, w), rel=1e-10)


def test_empty_attribute_set_rejected(gen):
    model, acts, sets = random_instance(gen, n=3)
    sets[1] = []
    with pytest.raises(CgmmError):
        cgmm.weight_objective(model, acts, sets)


def test_ridge_only_gradient(gen):
    model = model_from_means(np.zeros((3, 4)), [0.5, -1.0, 2.0], lam=0.3)
    g = cgmm.weight_gradient(model, gen.normal(size=(4, 4)), [[0], [1], [2], [0, 1]])
    np.testing.assert_allclose(g, 2 * 0.3 * model.weights, rtol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 6), st.integers(1, 50))
def test_gradient_matches_finite_differences(seed, n, attrs, dim):
    gen = np.random.default_rng(seed)
    model, acts, sets = random_instance(gen, n, attrs, dim, lam=0.05)
    w = model.weights
    g = cgmm.weight_gradient(model, acts, sets)
    h = 1e-6
    for j in range(attrs):
        e = np.zeros(attrs)
        e[j] = h
        num = (cgmm.weight_objective(model, acts, sets, w + e) - cgmm.weight_objective(model, acts, sets, w - e)) / (2 * h)
        assert abs(num - g[j]) <= 1e-6 * max(abs(num), abs(g[j]), 1e-3)


# --- learn_weights ---------------------------------------------------------

def test_learn_weights_matches_closed_form(gen):
    attrs, dim = 4, 10
    mu = gen.normal(size=(attrs, dim))
    model = model_from_means(mu, np.ones(attrs), lam=0.0)
    labels = gen.integers(attrs, size=60)
    acts = mu[labels] * gen.uniform(0.5, 2.0, (60, 1)) + gen.normal(0, 0.3, (60, dim))
    sets = [[int(j)] for j in labels]
    fit = cgmm.learn_weights(model, acts, sets, lr=0.05, iters=2000)
    oracle = np.array([
        sum(acts[i] @ mu[j] for i in range(60) if labels[i] == j) / (np.sum(labels == j) * (mu[j] @ mu[j]))
        for j in range(attrs)
    ])
    np.testing.assert_allclose(fit.weights, oracle, rtol=1e-3)
    np.testing.assert_allclose(cgmm.closed_form_weights(model, acts, sets), oracle, rtol=1e-10)


def test_learn_weights_trace_non_increasing(gen):
    model, acts, sets = random_instance(gen, n=20, attrs=6, dim=30, lam=1e-3)
    fit = cgmm.learn_weights(model, acts, sets, lr=10.0, iters=200)
    assert np.all(np.diff(fit.objective) <= 0)
    assert fit.objective[-1] < fit.objective[0]
    ridge = cgmm.closed_form_weights(model, acts, sets)
    assert fit.objective[-1] <= cgmm.weight_objective(model, acts, sets, ridge) * (1 + 1e-6)


def test_learn_weights_zero_iterations(gen):
    model, acts, sets = random_instance(gen)
    fit = cgmm.learn_weights(model, acts, sets, iters=0)
    np.testing.assert_array_equal(fit.weights, model.weights)
    assert len(fit.objective) == 1


def test_learn_weights_divergence_without_halving(gen):
    model, acts, sets = random_instance(gen)
    with pytest.raises(WeightDivergenceError, match="ten times"):
        cgmm.learn_weights(model, acts, sets, lr=50.0, iters=50, halving=False)
    with pytest.raises(CgmmError):
        cgmm.learn_weights(model, acts, sets, lr=0.0)


# --- stats file ------------------------------------------------------------

def test_stats_round_trip(gen):
    model, _, _ = random_instance(gen)
    model.gaussians[2] = cgmm.unusable_gaussian(model.dim, 1)
    model.attribute_names[0] = "brün"
    raw = cgmm.save_stats(model)
    assert raw[:4] == b"CGS1"
    back = cgmm.load_stats(raw)
    assert back.attribute_names == model.attribute_names
    assert back.lam == model.lam and back.layer_id == model.layer_id
    assert not back.gaussians[2].usable
    assert cgmm.save_stats(back) == raw


def test_stats_rejects_garbage(gen):
    raw = cgmm.save_stats(random_instance(gen)[0])
    with pytest.raises(CgmmError):
        cgmm.load_stats(b"NOPE" + raw[4:])
    with pytest.raises(Exception):
        cgmm.load_stats(raw[:-3])
