"""Uniform cubic B-spline helpers shared by bias-field fitting and FFD registration.

Control point ``k`` of a lattice is centred at parametric position ``u = k``.
"""

from __future__ import annotations

import numpy as np


def cubic_bspline(t: np.ndarray) -> np.ndarray:
    """Centred cubic B-spline kernel, support ``(-2, 2)``."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t < 1
    far = (t >= 1) & (t < 2)
    out[near] = (4.0 - 6.0 * t[near] ** 2 + 3.0 * t[near] ** 3) / 6.0
    out[far] = (2.0 - t[far]) ** 3 / 6.0
    return out


def cubic_bspline_derivative(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t)
    s = np.sign(t)
    out = np.zeros_like(t)
    near = a < 1
    far = (a >= 1) & (a < 2)
    out[near] = s[near] * (-12.0 * a[near] + 9.0 * a[near] ** 2) / 6.0
    out[far] = -s[far] * (2.0 - a[far]) ** 2 / 2.0
    return out


def basis_matrix(u: np.ndarray, n_ctrl: int) -> np.ndarray:
    """Dense ``(len(u), n_ctrl)`` matrix of basis values ``B(u - k)``."""
    u = np.asarray(u, dtype=np.float64)
    return cubic_bspline(u[:, None] - np.arange(n_ctrl)[None, :])


def contract(arr: np.ndarray, mats) -> np.ndarray:
    """Apply one matrix per axis: ``out[a,b,c] = sum M0[i,a] M1[j,b] M2[k,c] arr[i,j,k]``."""
    t = np.tensordot(mats[0], arr, axes=([0], [0]))
    t = np.tensordot(t, mats[1], axes=([1], [0]))
    t = np.tensordot(t, mats[2], axes=([1], [0]))
    return t


def evaluate_lattice(lattice: np.ndarray, bases) -> np.ndarray:
    """Evaluate a scalar lattice on the tensor grid described by per-axis basis matrices."""
    return contract(lattice, [b.T for b in bases])


def refine_axis(coeffs: np.ndarray, axis: int) -> np.ndarray:
    """Halve the knot spacing along ``axis``; the represented spline is unchanged.

    A lattice of ``m + 3`` control points over ``m`` cells becomes ``2m + 3``.
    """
    c = np.moveaxis(coeffs, axis, 0)
    n = c.shape[0]
    m = n - 3
    fine = np.empty((2 * m + 3,) + c.shape[1:], dtype=c.dtype)
    for k in range(2 * m + 3):
        if k % 2:
            j = (k + 1) // 2
            fine[k] = (c[j - 1] + 6.0 * c[j] + c[j + 1]) / 8.0
        else:
            j = k // 2
            fine[k] = (c[j] + c[j + 1]) / 2.0
    return np.moveaxis(fine, 0, axis)


def refine_lattice(lattice: np.ndarray) -> np.ndarray:
    out = lattice
    for axis in range(3):
        out = refine_axis(out, axis)
    return out


def lattice_positions(n: int, cells: int) -> np.ndarray:
    """Parametric positions of ``n`` evenly spread samples over a lattice with ``cells`` cells."""
    if n == 1:
        return np.ones(1)
    return 1.0 + np.arange(n) * (cells / (n - 1.0))
