"""Thin SVD by one-sided Jacobi rotations."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .. import _kernels
from ..errors import ContractError, NumericError
from ._tensor import Tensor

JACOBI_TOL = 1e-15
MAX_SWEEPS = 60


class SvdResult(NamedTuple):
    """``matrix ~= u @ diag(s) @ v`` with ``u`` (rows, k), ``s`` (k,), ``v`` (k, cols)."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def k(self):
        return self.s.shape[0]

    def truncate(self, rank):
        return SvdResult(self.u[:, :rank], self.s[:rank], self.v[:rank])

    def reconstruct(self):
        return (self.u * self.s) @ self.v


def _complete_basis(q, filled):
    """Replace columns of ``q`` not flagged in ``filled`` by an orthonormal completion."""
    m = q.shape[0]
    basis = [q[:, j] for j in range(q.shape[1]) if filled[j]]
    out = q.copy()
    candidates = iter(np.eye(m))
    for j in range(q.shape[1]):
        if filled[j]:
            continue
        for e in candidates:
            vec = e.copy()
            for _ in range(2):
                for b in basis:
                    vec -= (b @ vec) * b
            norm = np.linalg.norm(vec)
            if norm > 1e-8:
                vec /= norm
                basis.append(vec)
                out[:, j] = vec
                break
    return out


def svd(matrix, dtype=None):
    """Thin SVD with descending singular values.

    Each left singular vector is sign-normalised so that its largest-magnitude
    entry is non-negative (the right vector flips with it). Rotations run in
    float64; results are returned in ``dtype`` (default: the input dtype, or
    float32 for non-float input).
    """
    data = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix)
    if data.ndim != 2:
        raise ContractError(f"svd expects a matrix, got shape {data.shape}")
    rows, cols = data.shape
    if rows < 1 or cols < 1:
        raise ContractError("svd needs both extents >= 1")
    if not np.all(np.isfinite(data)):
        raise NumericError("svd input contains non-finite entries")
    if dtype is None:
        dtype = data.dtype if data.dtype in (np.float32, np.float64) else np.float32

    a = np.asarray(data, dtype=np.float64)
    transposed = rows < cols
    if transposed:
        a = a.T
    # a is (m, n) with m >= n; rotate its columns, stored as rows of at
    at = np.array(a.T, order="C")  # always a copy: rotations run in place
    n = at.shape[0]
    vt = np.eye(n)
    _kernels.jacobi_rotate(at, vt, JACOBI_TOL, MAX_SWEEPS)

    s = np.linalg.norm(at, axis=1)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    at = at[order]
    vt = vt[order]
    scale = s.max() if s.size else 0.0
    filled = s > max(scale, 1.0) * 1e-13
    u = np.zeros_like(at.T)
    u[:, filled] = (at[filled] / s[filled, None]).T
    if not filled.all():
        u = _complete_basis(u, filled)
        s = np.where(filled, s, 0.0)
    v = vt  # rows are right singular vectors of a

    if transposed:
        # original = a.T = v.T diag(s) u.T
        u, v = v.T, u.T
    pivot = np.abs(u).argmax(axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = u * signs
    v = v * signs[:, None]
    return SvdResult(
        np.ascontiguousarray(u, dtype=dtype),
        np.ascontiguousarray(s, dtype=dtype),
        np.ascontiguousarray(v, dtype=dtype),
    )
