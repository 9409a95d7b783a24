"""Reference-element operators for P1 bulk / P0-or-P1 flux spaces on [0, 1].

Bulk basis: phi0 = 1 - x, phi1 = x. Flux basis: the constant 1 (order 0)
or the same nodal pair (order 1). All entries are closed-form; scaling to a
physical element of length h is analytic.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "ElementMatrices",
    "UnsupportedOrder",
    "NonpositiveLength",
    "reference_matrices",
    "scale_to_physical",
    "matrices_for",
    "N_QUAD",
]

N_QUAD = 3


class UnsupportedOrder(ValueError):
    pass


class NonpositiveLength(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ElementMatrices:
    """Operator set for one element.

    Conventions (row index = test function, column = trial coefficient):

    * ``M[i, j] = int phi_i phi_j``; ``Mq`` is the same for the flux basis.
    * ``D[i, j] = int phi_i phi_j'``.
    * ``C[i, j] = int phi_i' psi_j`` and ``E[i, j] = int phi_i psi_j'`` couple
      bulk and flux bases.
    * ``Nhat`` / ``Ntilde``: bulk / flux basis values at the left and right
      endpoints (one row per endpoint).
    * ``Gb = diag(-1, +1)`` applies the outward normal at the endpoints,
      ``Mb`` sums endpoint values, ``T = Nhat.T @ Nhat`` is the endpoint
      operator multiplied by the stabilisation parameter.
    * ``Av`` holds the mean value of each basis function, so the element
      integral of ``u`` is ``h * Av @ u``.
    * ``Q[i, k] = w_k phi_i(x_k)`` with ``x_k``/``w_k`` Gauss-Legendre nodes
      and weights; ``V``/``Vq`` evaluate bulk/flux bases at those nodes and
      ``dphi`` holds the (constant) bulk basis derivatives.
    """

    flux_order: int
    h: float
    M: np.ndarray
    Minv: np.ndarray
    D: np.ndarray
    Mq: np.ndarray
    C: np.ndarray
    E: np.ndarray
    Nhat: np.ndarray
    Ntilde: np.ndarray
    Gb: np.ndarray
    Mb: np.ndarray
    T: np.ndarray
    Av: np.ndarray
    Q: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    V: np.ndarray
    Vq: np.ndarray
    dphi: np.ndarray

    @property
    def n_flux(self) -> int:
        return self.Mq.shape[0]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def reference_matrices(flux_order: int) -> ElementMatrices:
    if flux_order not in (0, 1):
        raise UnsupportedOrder(f"flux order {flux_order} not supported (0 or 1)")
    M = [[1 / 3, 1 / 6], [1 / 6, 1 / 3]]
    Minv = [[4.0, -2.0], [-2.0, 4.0]]
    D = [[-0.5, 0.5], [-0.5, 0.5]]
    xg, wg = np.polynomial.legendre.leggauss(N_QUAD)
    nodes = 0.5 * (xg + 1.0)
    weights = 0.5 * wg
    V = np.stack([1.0 - nodes, nodes], axis=1)
    if flux_order == 0:
        Mq = [[1.0]]
        C = [[-1.0], [1.0]]
        E = [[0.0], [0.0]]
        Ntilde = [[1.0], [1.0]]
        Vq = np.ones((N_QUAD, 1))
    else:
        Mq = M
        C = np.array(D).T
        E = D
        Ntilde = np.eye(2)
        Vq = V
    return ElementMatrices(
        flux_order=flux_order,
        h=1.0,
        M=_frozen(M),
        Minv=_frozen(Minv),
        D=_frozen(D),
        Mq=_frozen(Mq),
        C=_frozen(C),
        E=_frozen(E),
        Nhat=_frozen(np.eye(2)),
        Ntilde=_frozen(Ntilde),
        Gb=_frozen(np.diag([-1.0, 1.0])),
        Mb=_frozen([[1.0, 1.0]]),
        T=_frozen(np.eye(2)),
        Av=_frozen([0.5, 0.5]),
        Q=_frozen(weights[None, :] * V.T),
        nodes=_frozen(nodes),
        weights=_frozen(weights),
        V=_frozen(V),
        Vq=_frozen(Vq),
        dphi=_frozen([-1.0, 1.0]),
    )


def scale_to_physical(ref: ElementMatrices, h: float) -> ElementMatrices:
    """Map the operator set to an element ``[0, h]``.

    Mass-type entries scale with ``h``, the inverse mass with ``1/h``,
    basis derivatives with ``1/h``; mixed derivative/value integrals and
    endpoint evaluations are scale invariant.
    """
    if not h > 0:
        raise NonpositiveLength(f"element length must be positive, got {h}")
    r = h / ref.h
    return replace(
        ref,
        h=float(h),
        M=_frozen(ref.M * r),
        Minv=_frozen(ref.Minv / r),
        Mq=_frozen(ref.Mq * r),
        Q=_frozen(ref.Q * r),
        nodes=_frozen(ref.nodes * r),
        weights=_frozen(ref.weights * r),
        dphi=_frozen(ref.dphi / r),
    )


_CACHE: dict[tuple[int, float], ElementMatrices] = {}
_CACHE_LOCK = threading.Lock()


def matrices_for(flux_order: int, h: float = 1.0) -> ElementMatrices:
    """Cached ``scale_to_physical(reference_matrices(flux_order), h)``."""
    key = (flux_order, float(h))
    got = _CACHE.get(key)
    if got is not None:
        return got
    mats = reference_matrices(flux_order) if h == 1.0 else scale_to_physical(reference_matrices(flux_order), h)
    with _CACHE_LOCK:
        return _CACHE.setdefault(key, mats)
