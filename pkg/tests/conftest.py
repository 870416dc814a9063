"""Shared test utilities: independent oracles and gradient checking."""

from __future__ import annotations

import numpy as np
import pytest

from adhoc_fusion import Tensor


def matmul_triple_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive O(n^3) matrix product, independent of the library path."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def simplex_projection_bruteforce(z: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the simplex by enumerating all supports.

    For each nonempty support S the affine-optimal candidate is
    z_i - (sum_S z - 1)/|S| on S and 0 elsewhere; among the feasible
    candidates (all entries nonnegative) the closest one to z is the
    projection. Exponential in len(z); intended for len(z) <= 16.
    """
    z = np.asarray(z, dtype=np.float64)
    k = z.size
    best, best_d = None, np.inf
    for mask in range(1, 1 << k):
        idx = [i for i in range(k) if (mask >> i) & 1]
        tau = (z[idx].sum() - 1.0) / len(idx)
        p = np.zeros(k)
        p[idx] = z[idx] - tau
        if (p[idx] < -1e-12).any():
            continue
        p = np.maximum(p, 0.0)
        d = float(((p - z) ** 2).sum())
        if d < best_d:
            best, best_d = p, d
    assert best is not None
    return best


def softmax_reference(z: np.ndarray) -> np.ndarray:
    """Straight-line row softmax used as an independent check."""
    z = np.atleast_2d(z)
    out = np.empty_like(z, dtype=np.float64)
    for i in range(z.shape[0]):
        e = np.exp(z[i] - z[i].max())
        out[i] = e / e.sum()
    return out


def permutation_matrix(perm: np.ndarray) -> np.ndarray:
    p = np.zeros((perm.size, perm.size))
    p[np.arange(perm.size), perm] = 1.0
    return p


def central_difference(param: Tensor, scalar_fn, h: float = 1e-5) -> np.ndarray:
    """Elementwise central differences of scalar_fn() w.r.t. one parameter."""
    orig = param.data.copy()
    grad = np.empty_like(orig)
    it = np.nditer(orig, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        bumped = orig.copy()
        bumped[idx] = orig[idx] + h
        param.assign(bumped)
        f_plus = scalar_fn()
        bumped[idx] = orig[idx] - h
        param.assign(bumped)
        f_minus = scalar_fn()
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
        it.iternext()
    param.assign(orig)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Elementwise |a-b| / max(|a|, |b|, floor), reduced to the worst entry."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
