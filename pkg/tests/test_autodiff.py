"""Reverse-mode operators against central differences."""
import zlib

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conviction import autodiff as ad


def crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def check_grad(build, x0, rng, rel=1e-6, h=1e-6):
    """Compare the tape gradient of a scalar ``build(x)`` with a central difference."""
    node = ad.leaf(x0)
    out = build(node)
    g = ad.grad_of(ad.backward(out), node)
    d = crandn(rng, x0.shape) if np.iscomplexobj(x0) else rng.standard_normal(x0.shape)
    fd = (float(build(x0 + h * d)) - float(build(x0 - h * d))) / (2 * h)
    an = float(np.sum((np.conj(g) * d).real))
    assert an == pytest.approx(fd, rel=rel, abs=1e-9)


OPS = {
    "mul": lambda x: ad.sum_sq(ad.mul(x, np.arange(1, 13).reshape(3, 4) * (1 - 0.5j))),
    "abs": lambda x: ad.sum_(ad.square(ad.abs_(x))) + ad.sum_(ad.abs_(x)),
    "rss": lambda x: ad.sum_(ad.rss(ad.reshape(x, (1, 3, 4)))),
    "norm": lambda x: ad.norm(x),
    "fft": lambda x: ad.sum_sq(ad.mul(ad.fft2(x), np.linspace(0, 1, 12).reshape(3, 4))),
    "shift": lambda x: ad.sum_sq(ad.mul(ad.fftshift(x), np.linspace(0, 1, 12).reshape(3, 4))),
    "concat": lambda x: ad.sum_sq(ad.mul(ad.concat([x, ad.mul(x, 2j)], axis=0), np.linspace(1, 2, 24).reshape(6, 4))),
    "normalize": lambda x: ad.sum_(ad.abs_(ad.smooth_normalize(ad.reshape(x, (1, 3, 2, 2)), 0.3))),
    "shrink": lambda x: ad.sum_sq(ad.soft_shrink(ad.reshape(x, (1, 3, 2, 2)), 0.5)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_complex_ops(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    check_grad(OPS[name], crandn(rng, (3, 4)), rng)


def test_real_ops():
    rng = np.random.default_rng(1)
    x = rng.uniform(0.5, 2.0, (3, 4))
    check_grad(lambda z: ad.sum_(ad.div(ad.sqrt(z), ad.add(z, 1.0))), x, rng)
    check_grad(lambda z: ad.sum_(ad.sigmoid(z)), x, rng)
    check_grad(lambda z: ad.mean(ad.take(z, np.array([0, 2, 2]), axis=0)), x, rng)


def test_conv_weight_and_input():
    rng = np.random.default_rng(2)
    x = crandn(rng, (1, 2, 5, 5))
    w = crandn(rng, (3, 2, 3, 3))
    c = crandn(rng, (1, 3, 5, 5))
    check_grad(lambda z: ad.sum_sq(ad.sub(ad.conv(x, z), c)), w, rng)
    check_grad(lambda z: ad.sum_sq(ad.smooth_relu(ad.conv(z, w), 0.1)), x, rng, rel=1e-5)


def test_conv_adjoint_op():
    rng = np.random.default_rng(3)
    c = crandn(rng, (1, 3, 5, 5))
    w = crandn(rng, (3, 2, 3, 3))
    t = crandn(rng, (1, 2, 5, 5))
    check_grad(lambda z: ad.sum_sq(ad.sub(ad.conv_adjoint(c, z), t)), w, rng)
    check_grad(lambda z: ad.sum_sq(ad.sub(ad.conv_adjoint(z, w), t)), c, rng)


def test_box_mean():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 9, 8))
    weights = rng.standard_normal((2, 3, 2))
    check_grad(lambda z: ad.sum_(ad.mul(ad.box_mean_valid(z, 7), weights)), x, rng)


def test_plain_arrays_stay_plain():
    out = ad.mul(ad.fft2(np.ones((2, 2))), 2.0)
    assert isinstance(out, np.ndarray)


def test_unreached_leaf_gets_zeros():
    a, b = ad.leaf(np.ones(3)), ad.leaf(np.ones(3))
    grads = ad.backward(ad.sum_(a))
    assert_allclose(ad.grad_of(grads, b), 0)


def test_shared_subexpression_accumulates():
    x = ad.leaf(np.array([3.0]))
    y = ad.mul(x, x)
    out = ad.sum_(ad.add(y, y))
    assert ad.grad_of(ad.backward(out), x)[0] == pytest.approx(12.0)
