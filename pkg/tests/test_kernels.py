import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gvpolab import _pykernels, kernels

shapes = st.tuples(st.integers(1, 6), st.integers(2, 40))


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
    assert "python" in kernels.backends()


def _tables(seed, p, n):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=3, size=(p, n))
    return (z, _pykernels.log_softmax(rng.normal(size=(p, n))),
            rng.dirichlet(np.ones(n), size=p), rng.uniform(-2, 2, size=(p, n)))


@settings(max_examples=50, deadline=None)
@given(shapes, st.integers(0, 2**31), st.sampled_from([0.1, 1.0, 3.0]))
def test_backends_agree(shape, seed, beta):
    impls = kernels.backends()
    if len(impls) < 2:
        pytest.skip("compiled backend not built")
    c, py = impls["cython"], impls["python"]
    z, ref, ps, r = _tables(seed, *shape)
    np.testing.assert_allclose(c.log_softmax(z), py.log_softmax(z), atol=1e-13)
    lc, gc, tc = c.exact_gvpo_flat(z, ref, ps, r, beta)
    lp, gp, tp = py.exact_gvpo_flat(z, ref, ps, r, beta)
    assert lc == pytest.approx(lp, rel=1e-12, abs=1e-15)
    np.testing.assert_allclose(gc, gp, atol=1e-13)
    np.testing.assert_allclose(tc, tp, atol=1e-12)
    np.testing.assert_allclose(c.policy_metrics(ref, z - z.max(), ref, r), py.policy_metrics(ref, z - z.max(), ref, r),
                               rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(c.centered_weights(r, beta), py.centered_weights(r, beta), atol=1e-13)
    np.testing.assert_allclose(c.flat_weighted_grad(ps, r), py.flat_weighted_grad(ps, r), atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(shapes, st.integers(0, 2**31))
def test_sampling_backends_identical(shape, seed):
    rng = np.random.default_rng(seed)
    p, n = shape
    probs = rng.dirichlet(np.ones(n), size=p)
    u = rng.random((p, 9))
    ids = {name: m.sample_inverse_cdf(probs, u) for name, m in kernels.backends().items()}
    for got in ids.values():
        np.testing.assert_array_equal(got, ids["python"])
        assert got.min() >= 0 and got.max() < n


def test_sampling_boundaries(backend):
    probs = np.array([[0.25, 0.0, 0.75]])
    u = np.array([[0.0, 0.2499999, 0.25, 0.9999999]])
    np.testing.assert_array_equal(backend.sample_inverse_cdf(probs, u), [[0, 0, 2, 2]])


def test_scatter_accumulates_repeats(backend):
    out = backend.scatter_coefficients(np.array([[1, 1, 3]]), np.array([[0.5, 0.25, -1.0]]), 4)
    np.testing.assert_array_equal(out, [[0.0, 0.75, 0.0, -1.0]])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 16), elements=st.floats(-1e3, 1e3)), st.floats(0.01, 10))
def test_centered_weights_sum_to_zero(a, scale):
    for m in kernels.backends().values():
        w = m.centered_weights(a, scale)
        assert abs(np.sum(w)) <= 1e-10 * max(1.0, np.max(np.abs(w)))


def test_fused_gradient_matches_weighted_grad(backend):
    z, ref, ps, r = _tables(1, 3, 7)
    loss, grad, _ = backend.exact_gvpo_flat(z, ref, ps, r, 0.5)
    lp = backend.log_softmax(z)
    d = 0.5 * (lp - ref) - r
    d = d - (ps * d).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(grad, backend.flat_weighted_grad(np.exp(lp), 0.5 * ps * d), atol=1e-14)
    assert loss == pytest.approx(0.5 * float((ps * d * d).sum()), rel=1e-13)
