"""Anti-aliased blur filtering: fixed binomial and predicted per-location modes."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grasens import antialias
from grasens import tensor as T
from grasens.errors import ConfigurationError

from conftest import gradcheck


def test_binomial_kernel_k3():
    expect = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]]) / 16.0
    assert np.allclose(antialias.binomial_kernel(3), expect, atol=1e-15)
    assert abs(antialias.binomial_kernel(5).sum() - 1.0) < 1e-12


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_dc_preservation(stride):
    c = -2.5
    out = antialias.blur_fixed(T.Tensor(np.full((2, 7, 9), c)), k=3, stride=stride)
    assert out.shape == (2, -(-7 // stride), -(-9 // stride))
    assert np.allclose(out.data, c, atol=1e-12)


def test_impulse_response_1d():
    """A [0,0,1,0,0] row pattern filtered at stride 1 gives [0,.25,.5,.25,0]."""
    x = np.zeros((1, 5, 5))
    x[0, :, 2] = 1.0
    out = antialias.blur_fixed(T.Tensor(x), k=3, stride=1)
    for h in range(5):
        assert np.allclose(out.data[0, h], [0, 0.25, 0.5, 0.25, 0], atol=1e-12)


def test_checkerboard_suppression():
    ys, xs = np.mgrid[0:8, 0:8]
    checker = np.where((ys + xs) % 2 == 0, 1.0, -1.0)[None]
    blurred = antialias.blur_fixed(T.Tensor(checker), k=3, stride=2)
    naive = checker[:, ::2, ::2]
    assert np.abs(blurred.data).max() < np.abs(naive).max()


def test_blur_gradient_fixed():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6, 6))
    w = rng.normal(size=(2, 3, 3))
    gradcheck(lambda a: T.tsum(T.mul(antialias.blur_fixed(a, k=3, stride=2),
                                     T.Tensor(w))), [x])


def test_predicted_zero_weights_is_box_filter():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 6))
    pred = antialias.init_predictor(c_in=2, k=3, seed=0)
    pred.weights.data[:] = 0.0
    pred.bias.data[:] = 0.0
    spec = antialias.BlurSpec(kernel_size=3, stride=2, mode="predicted")
    out = antialias.blur(T.Tensor(x), spec, pred)
    # reflect-padded box average at the strided positions
    padded = T.pad_reflect(T.Tensor(x), 1).data
    box = np.zeros((2, 3, 3))
    for p in range(3):
        for q in range(3):
            box += padded[:, p:p + 6:2, q:q + 6:2] / 9.0
    assert np.allclose(out.data, box, atol=1e-12)


def test_predicted_filters_are_a_distribution():
    rng = np.random.default_rng(2)
    x = T.Tensor(rng.normal(size=(3, 5, 5)))
    pred = antialias.init_predictor(c_in=3, k=3, groups=1, seed=3)
    fields = antialias.predict_filters(x, pred)
    assert len(fields) == 1
    psi = fields[0].data
    assert psi.shape == (9, 5, 5)
    assert np.all(psi >= 0)
    assert np.allclose(psi.sum(axis=0), 1.0, atol=1e-12)


def test_predicted_gradients_through_predictor():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 4, 4))
    pred = antialias.init_predictor(c_in=2, k=3, seed=5)
    w0, b0 = pred.weights.data.copy(), pred.bias.data.copy()
    target = rng.normal(size=(2, 2, 2))
    spec = antialias.BlurSpec(kernel_size=3, stride=2, mode="predicted")

    def build(xt, wt, bt):
        p = antialias.FilterPredictor(weights=wt, bias=bt, kernel_size=3, groups=1)
        return T.tsum(T.mul(antialias.blur(xt, spec, p), T.Tensor(target)))

    gradcheck(build, [x, w0, b0])


def test_predicted_groups_have_independent_fields():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 4, 4))
    pred = antialias.init_predictor(c_in=4, k=3, groups=2, seed=7)
    fields = antialias.predict_filters(T.Tensor(x), pred)
    assert len(fields) == 2
    spec = antialias.BlurSpec(kernel_size=3, stride=2, mode="predicted", groups=2)
    out = antialias.blur(T.Tensor(x), spec, pred)
    assert out.shape == (4, 2, 2)


def test_predicted_mode_requires_predictor():
    spec = antialias.BlurSpec(mode="predicted")
    with pytest.raises(ConfigurationError):
        antialias.blur(T.Tensor(np.ones((2, 4, 4))), spec, None)


def test_blur_spec_validation():
    with pytest.raises(ConfigurationError):
        antialias.BlurSpec(kernel_size=4)
    with pytest.raises(ConfigurationError):
        antialias.BlurSpec(mode="gaussian")
    with pytest.raises(ConfigurationError):
        antialias.BlurSpec(stride=0)


def test_shift_consistency_beats_naive_subsampling():
    """Blur-downsampling commutes with translation far better than naive
    strided subsampling (measured as cosine similarity, 10 quick seeds; the
    full 50-seed run lives in the acceptance suite)."""
    def cos(a, b):
        a, b = a.ravel(), b.ravel()
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))

    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=(4, 16, 16))
        xs = np.roll(x, 1, axis=2)
        down = lambda v: antialias.blur_fixed(T.Tensor(v), k=3, stride=2).data
        blur_sim = cos(down(xs), np.roll(down(x), 1, axis=2))
        naive_sim = cos(xs[:, ::2, ::2], np.roll(x[:, ::2, ::2], 1, axis=2))
        assert blur_sim > naive_sim


@settings(max_examples=25, deadline=None)
@given(c=st.integers(1, 3), h=st.integers(3, 9), w=st.integers(3, 9),
       stride=st.integers(1, 2), seed=st.integers(0, 2 ** 16))
def test_property_sup_norm_contraction_and_shape(c, h, w, stride, seed):
    x = np.random.default_rng(seed).normal(size=(c, h, w))
    out = antialias.blur_fixed(T.Tensor(x), k=3, stride=stride)
    assert out.shape == (c, -(-h // stride), -(-w // stride))
    assert np.abs(out.data).max() <= np.abs(x).max() + 1e-12
