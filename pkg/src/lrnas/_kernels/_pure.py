"""Numpy implementations of the compiled kernels, used when the extension is absent."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, sh, sw, oh, ow):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    # (N, C, oh, ow, kh, kw) -> (C, kh, kw, N, oh, ow)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * oh * ow)


def col2im(cols, n_batch, chans, hp, wp, kh, kw, sh, sw, oh, ow):
    xp = np.zeros((n_batch, chans, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(chans, kh, kw, n_batch, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += blocks[
                :, i, j
            ].transpose(1, 0, 2, 3)
    return xp


def _round_robin(n):
    """Circle-method schedule: n-1 rounds of disjoint index pairs (n even)."""
    idx = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        rounds.append((np.array(idx[:half]), np.array(idx[::-1][:half])))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def jacobi_rotate(at, vt, tol, max_sweeps):
    """Parallel-ordering one-sided Jacobi; every round rotates n/2 disjoint row pairs at once."""
    n, m = at.shape
    if n < 2:
        return 1
    padded = n + (n % 2)
    if padded != n:
        at_w = np.zeros((padded, m))
        at_w[:n] = at
        vt_w = np.zeros((padded, n))
        vt_w[:n] = vt
    else:
        at_w, vt_w = at, vt
    rounds = _round_robin(padded)
    sweeps = max_sweeps
    for sweep in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = at_w[p], at_w[q]
            alpha = np.einsum("ij,ij->i", ap, ap)
            beta = np.einsum("ij,ij->i", aq, aq)
            gamma = np.einsum("ij,ij->i", ap, aq)
            active = (gamma != 0.0) & (np.abs(gamma) > tol * np.sqrt(alpha * beta))
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = (cs * t)[:, None]
            cs = cs[:, None]
            ap, aq = at_w[p], at_w[q]
            at_w[p] = cs * ap - sn * aq
            at_w[q] = sn * ap + cs * aq
            vp, vq = vt_w[p], vt_w[q]
            vt_w[p] = cs * vp - sn * vq
            vt_w[q] = sn * vp + cs * vq
        if not rotated:
            sweeps = sweep + 1
            break
    if padded != n:
        at[:] = at_w[:n]
        vt[:] = vt_w[:n]
    return sweeps
