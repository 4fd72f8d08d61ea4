import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from facegen import nn
from facegen.cgmm import AttributeGaussian, CgmmModel
from facegen.generate import (
    GenerationError, InversionConfig, blur, class_visualize, feature_invert,
    gaussian_kernel, generate_from_attributes, jitter, reconstruct_from_image,
)

QUIET = dict(blur_sigma=0.0, jitter=0, l2_decay=0.0)


def identity_net():
    spec = nn.NetworkSpec((3, 6, 6), (), (nn.Head("g", 2),))
    return spec, nn.init_params(spec, 0)


# --- regularizers ----------------------------------------------------------

def test_gaussian_kernel_radius_and_sum():
    k = gaussian_kernel(0.5)
    assert k.size == 2 * 2 + 1
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(k, k[::-1])


def test_blur_sigma_zero_is_identity(gen):
    x = gen.random((3, 7, 5))
    assert blur(x, 0.0).tobytes() == x.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 12), st.integers(1, 12)),
              elements=st.floats(0, 1)),
       st.floats(0.1, 3.0))
def test_blur_preserves_channel_means(img, sigma):
    out = blur(img, sigma)
    np.testing.assert_allclose(out.mean(axis=(1, 2)), img.mean(axis=(1, 2)), rtol=0, atol=1e-9)


def test_blur_smooths_an_impulse():
    x = np.zeros((1, 9, 9))
    x[0, 4, 4] = 1.0
    out = blur(x, 1.0)
    assert out[0, 4, 4] < 1.0
    assert out[0, 4, 5] > out[0, 4, 7] > 0


def test_blur_rejects_negative_sigma():
    with pytest.raises(GenerationError):
        blur(np.zeros((1, 2, 2)), -1.0)


def test_jitter_identity_and_inverse(gen):
    x = gen.random((3, 5, 6))
    assert jitter(x, 0, 0).tobytes() == x.tobytes()
    np.testing.assert_array_equal(jitter(jitter(x, 2, -1), -2, 1), x)
    np.testing.assert_array_equal(jitter(x, 1, 0)[:, :, 1:], x[:, :, :-1])


# --- config ----------------------------------------------------------------

@pytest.mark.parametrize("bad", [
    dict(iterations=-1), dict(step=0.0), dict(blur_every=0), dict(jitter=-1),
    dict(init="zeros"), dict(boost="logit"), dict(step_growth=0.5),
])
def test_config_validation(bad):
    with pytest.raises(GenerationError):
        InversionConfig(**bad).validate()


# --- feature inversion -----------------------------------------------------

def test_already_optimal_target(small_net, gen):
    spec, params = small_net
    img = gen.random(spec.input_shape)
    target = nn.forward(spec, params, img).activation(3)
    cfg = InversionConfig(layer=3, iterations=20, init="image", **QUIET)
    res = feature_invert(spec, params, target, cfg, init_image=img)
    assert res.trace[0] == 0.0
    assert res.trace == [0.0] * len(res.trace)
    np.testing.assert_array_equal(res.image, img)


def test_convex_surrogate_converges(gen):
    spec, params = identity_net()
    target = gen.uniform(0.05, 0.95, spec.input_shape)
    res = feature_invert(spec, params, target, InversionConfig(layer=-1, iterations=200, **QUIET))
    assert res.trace[-1] <= 1e-8
    assert res.iterations <= 200


def test_iterations_zero(small_net, gen):
    spec, params = small_net
    target = nn.forward(spec, params, gen.random(spec.input_shape)).activation(6)
    res = feature_invert(spec, params, target, InversionConfig(layer=6, iterations=0))
    assert len(res.trace) == 1 and res.iterations == 0


@pytest.mark.parametrize("layer", [0, 3, 6, 9])
def test_trace_non_increasing_with_regularizers(small_net, gen, layer):
    spec, params = small_net
    target = nn.forward(spec, params, gen.random(spec.input_shape)).activation(layer)
    cfg = InversionConfig(layer=layer, iterations=40, blur_every=3, jitter=2, seed=4)
    res = feature_invert(spec, params, target, cfg)
    assert len(res.trace) == res.iterations + 1 == len(res.steps)
    assert np.all(np.diff(res.trace) <= 0)
    assert res.trace[-1] < res.trace[0]
    assert 0.0 <= res.image.min() and res.image.max() <= 1.0


def test_inversion_is_deterministic(small_net, gen):
    spec, params = small_net
    target = nn.forward(spec, params, gen.random(spec.input_shape)).activation(6)
    cfg = InversionConfig(layer=6, iterations=15, blur_every=4, seed=9)
    a = feature_invert(spec, params, target, cfg)
    b = feature_invert(spec, params, target, cfg)
    assert a.image.tobytes() == b.image.tobytes() and a.trace == b.trace


def test_inversion_errors(small_net):
    spec, params = small_net
    cfg = InversionConfig(layer=6, iterations=1)
    with pytest.raises(GenerationError):
        feature_invert(spec, params, np.zeros(7), cfg)
    with pytest.raises(GenerationError):
        feature_invert(spec, params, np.full(spec.output_shape(6), np.nan), cfg)
    with pytest.raises(GenerationError):
        feature_invert(spec, params, np.zeros(spec.output_shape(6)), InversionConfig(layer=6, init="mean_image"))


def test_trace_csv_layout(small_net, gen):
    spec, params = small_net
    target = nn.forward(spec, params, gen.random(spec.input_shape)).activation(6)
    res = feature_invert(spec, params, target, InversionConfig(layer=6, iterations=3))
    lines = res.trace_csv().splitlines()
    assert lines[0] == "iteration,data_term,step_size"
    assert len(lines) == 5 and lines[1].startswith("0,")


def test_reconstruction_identity_init(small_net, gen):
    spec, params = small_net
    img = gen.random(spec.input_shape)
    res = reconstruct_from_image(spec, params, img, 3, InversionConfig(iterations=10, init="image", **QUIET), init_image=img)
    assert max(res.trace) == 0.0


def test_reconstruction_reduces_data_term(small_net, gen):
    spec, params = small_net
    # a random tiny net has flat directions, so only ask for a clear drop here;
    # the 90% bar is checked on the trained network in the acceptance suite
    res = reconstruct_from_image(spec, params, gen.random(spec.input_shape), 3, InversionConfig(iterations=150))
    assert res.trace[-1] <= 0.5 * res.trace[0]


# --- cGMM-driven generation ------------------------------------------------

def test_generate_from_attributes(small_net, gen):
    spec, params = small_net
    dim = spec.output_shape(6)
    gs = [AttributeGaussian(gen.normal(size=dim), np.full(dim, 1e-6), 5) for _ in range(3)]
    model = CgmmModel(6, ["x", "y", "z"], gs)
    cfg = InversionConfig(layer=6, iterations=25)
    a = generate_from_attributes(spec, params, model, [0, 2], "mean", cfg)
    b = generate_from_attributes(spec, params, model, [0, 2], "mean", cfg)
    assert a.image.tobytes() == b.image.tobytes()
    assert [p.shape for p in a.group_probs] == [(3,), (2,)]
    s = generate_from_attributes(spec, params, model, [0, 2], "sample", cfg)
    np.testing.assert_allclose(s.target, a.target, atol=0.02)
    with pytest.raises(GenerationError):
        generate_from_attributes(spec, params, model, [0], "mean", InversionConfig(layer=3))


# --- class visualization ---------------------------------------------------

def test_class_visualize_basics(small_net, gen):
    spec, params = small_net
    mean = gen.uniform(0.3, 0.7, spec.input_shape)
    cfg = InversionConfig(iterations=0)
    res = class_visualize(spec, params, mean, [(0, 1)], cfg)
    assert len(res.trace) == 1 and res.iterations == 0
    cfg = InversionConfig(iterations=30, step=0.05, seed=2, **QUIET)
    a = class_visualize(spec, params, mean, [(0, 1), (1, 0)], cfg)
    b = class_visualize(spec, params, mean, [(0, 1), (1, 0)], cfg)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.trace[-1] > a.trace[0]
    assert 0.0 <= a.image.min() and a.image.max() <= 1.0


@pytest.mark.parametrize("boost", ["softmax", "logits"])
def test_class_visualize_raises_target_score(small_net, gen, boost):
    spec, params = small_net
    mean = gen.uniform(0.3, 0.7, spec.input_shape)
    cfg = InversionConfig(iterations=40, step=0.05, boost=boost, blur_sigma=0.0, jitter=0)
    res = class_visualize(spec, params, mean, [(0, 2)], cfg)
    assert res.trace[-1] > res.trace[0]


def test_class_visualize_errors(small_net):
    spec, params = small_net
    mean = np.full(spec.input_shape, 0.5)
    with pytest.raises(GenerationError):
        class_visualize(spec, params, mean, [], InversionConfig())
    with pytest.raises(GenerationError):
        class_visualize(spec, params, mean, [(1, 5)], InversionConfig())
    with pytest.raises(GenerationError):
        class_visualize(spec, params, np.zeros((1, 2, 2)), [(0, 0)], InversionConfig())
