import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdgnet.elements import (
    NonpositiveLength,
    UnsupportedOrder,
    matrices_for,
    reference_matrices,
    scale_to_physical,
)

# independent oracle: 5-point Gauss-Legendre on [0, h]
_X, _W = np.polynomial.legendre.leggauss(5)


def _quad(f, h=1.0):
    x = 0.5 * h * (_X + 1.0)
    return float(np.sum(0.5 * h * _W * f(x)))


def _bulk(h):
    return [lambda x: 1.0 - x / h, lambda x: x / h], [lambda x: -1.0 / h + 0 * x, lambda x: 1.0 / h + 0 * x]


def _flux(order, h):
    if order == 0:
        return [lambda x: 1.0 + 0 * x], [lambda x: 0 * x]
    return _bulk(h)


def _oracle(order, h):
    phi, dphi = _bulk(h)
    psi, dpsi = _flux(order, h)
    M = [[_quad(lambda x: phi[i](x) * phi[j](x), h) for j in range(2)] for i in range(2)]
    D = [[_quad(lambda x: phi[i](x) * dphi[j](x), h) for j in range(2)] for i in range(2)]
    Mq = [[_quad(lambda x: psi[i](x) * psi[j](x), h) for j in range(len(psi))] for i in range(len(psi))]
    C = [[_quad(lambda x: dphi[i](x) * psi[j](x), h) for j in range(len(psi))] for i in range(2)]
    E = [[_quad(lambda x: phi[i](x) * dpsi[j](x), h) for j in range(len(psi))] for i in range(2)]
    Av = [_quad(phi[i], h) / h for i in range(2)]
    return {k: np.array(v) for k, v in dict(M=M, D=D, Mq=Mq, C=C, E=E, Av=Av).items()}


@pytest.mark.parametrize("order", [0, 1])
@pytest.mark.parametrize("h", [1.0, 2.0, 0.3, 12.5])
def test_matches_quadrature_oracle(order, h):
    mats = scale_to_physical(reference_matrices(order), h)
    ref = _oracle(order, h)
    for name, expected in ref.items():
        np.testing.assert_allclose(getattr(mats, name), expected, atol=1e-14 * max(1.0, h), err_msg=name)


def test_spec_examples():
    ref = reference_matrices(1)
    assert ref.M[0, 0] == pytest.approx(1 / 3, abs=1e-15)
    assert ref.M[0, 1] == pytest.approx(1 / 6, abs=1e-15)
    assert ref.D[0, 0] == -0.5
    assert reference_matrices(0).Mq.shape == (1, 1) and reference_matrices(0).Mq[0, 0] == 1.0
    two = scale_to_physical(ref, 2.0)
    assert two.M[0, 0] == pytest.approx(2 / 3, abs=1e-15)
    np.testing.assert_array_equal(two.D, ref.D)


def test_unit_scale_is_identity():
    ref = reference_matrices(1)
    one = scale_to_physical(ref, 1.0)
    for name in ("M", "Minv", "D", "Mq", "C", "E", "Q", "nodes", "weights", "dphi"):
        np.testing.assert_array_equal(getattr(one, name), getattr(ref, name))


def test_unsupported_and_nonpositive():
    with pytest.raises(UnsupportedOrder):
        reference_matrices(2)
    with pytest.raises(NonpositiveLength):
        scale_to_physical(reference_matrices(1), 0.0)
    with pytest.raises(NonpositiveLength):
        scale_to_physical(reference_matrices(1), -1.0)


def test_boundary_operators():
    ref = reference_matrices(1)
    np.testing.assert_array_equal(ref.Gb, np.diag([-1.0, 1.0]))
    np.testing.assert_array_equal(ref.Mb, [[1.0, 1.0]])
    np.testing.assert_array_equal(ref.Nhat, np.eye(2))
    np.testing.assert_array_equal(reference_matrices(0).Ntilde, [[1.0], [1.0]])


def test_quadrature_reproduces_mass():
    ref = reference_matrices(1)
    np.testing.assert_allclose(ref.Q @ ref.V, ref.M, atol=1e-14)
    np.testing.assert_allclose(ref.Q.sum(axis=1), [0.5, 0.5], atol=1e-15)


def test_matrices_are_read_only():
    ref = reference_matrices(1)
    with pytest.raises(ValueError):
        ref.M[0, 0] = 5.0


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1e3), st.sampled_from([0, 1]))
def test_scaling_laws(h, order):
    ref = reference_matrices(order)
    m = scale_to_physical(ref, h)
    np.testing.assert_allclose(m.M, h * ref.M, rtol=1e-15)
    np.testing.assert_array_equal(m.D, ref.D)
    np.testing.assert_allclose(m.Minv @ m.M, np.eye(2), atol=1e-13)
    assert np.all(np.linalg.eigvalsh(m.M) > 0)
    assert m.Av @ np.ones(2) == pytest.approx(1.0, abs=1e-15)


def test_cache_is_thread_safe():
    results = []

    def work():
        results.append(matrices_for(1, 7.25))

    threads = [threading.Thread(target=work) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r is results[0] for r in results)
    np.testing.assert_allclose(results[0].M, 7.25 * reference_matrices(1).M)
