"""Small dense linear algebra that also runs on dual-number matrices.

Matrices are stored with the two matrix axes first and an optional batch
axis last, i.e. shape ``(n, n)`` or ``(n, n, S)``.
"""
from __future__ import annotations

import numpy as np

from . import dual

__all__ = ["det_lu", "minors_tangent", "nullspace_qr"]


def det_lu(a):
    """Determinant by Gaussian elimination with partial pivoting.

    Pivot choices are made on primal values, so on dual input the result is
    the exact derivative of the determinant (the pivot sequence is locally
    constant). The last pivot is never divided by, which keeps simple
    singular matrices finite.
    """
    if not dual.is_dual(a):
        a = np.asarray(a, dtype=float)
        if a.ndim == 2:
            return float(np.linalg.det(a))
        return np.linalg.det(np.moveaxis(a, -1, 0))
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    n = a.shape[0]
    s = a.shape[2]
    batch = np.arange(s)
    sign = np.ones(s)
    det = None
    m = a
    for k in range(n):
        size = n - k
        if size == 1:
            det = m[0, 0] if det is None else det * m[0, 0]
            break
        col = np.abs(dual.primal(m[:, 0]))
        piv = np.argmax(col, axis=0)
        if np.any(piv != 0):
            rows = np.repeat(np.arange(size)[:, None], s, axis=1)
            rows[0, :] = piv
            rows[piv, batch] = 0
            m = m[rows[:, None, :], np.arange(size)[None, :, None], batch[None, None, :]]
            sign = np.where(piv != 0, -sign, sign)
        p = m[0, 0]
        det = p if det is None else det * p
        pv = dual.primal(p)
        safe = p + np.where(pv == 0.0, 1.0, 0.0)
        m = m[1:, 1:] - m[1:, 0:1] * (m[0:1, 1:] / safe)
    det = det * sign
    return det[0] if squeeze else det


def minors_tangent(jac):
    """Tangent of the level set from signed maximal minors.

    ``jac`` has shape (N, N+1) or (N, N+1, S) (plain or dual). Component
    ``i`` is ``(-1)**i`` times the determinant of ``jac`` with column ``i``
    removed, so ``x . T == det([x; jac])`` for every vector ``x``.
    """
    n = jac.shape[0]
    comps = []
    for i in range(n + 1):
        cols = [j for j in range(n + 1) if j != i]
        sub = jac[:, cols] if not dual.is_dual(jac) else _take_cols(jac, cols)
        d = det_lu(sub)
        comps.append(d if i % 2 == 0 else -d)
    return dual.stack(comps) if any(dual.is_dual(c) for c in comps) else np.stack(comps)


def _take_cols(jac, cols):
    idx = np.asarray(cols)
    return jac[:, idx]


def nullspace_qr(jac: np.ndarray) -> np.ndarray:
    """Unit null vectors of a batch of full-rank (N, N+1) matrices.

    ``jac`` has shape (S, N, N+1). The sign is fixed so that
    ``det([t; jac]) > 0``, which matches the orientation of
    :func:`minors_tangent`. Returns ``(t, rdiag)`` with ``rdiag`` the
    absolute diagonal of the triangular factor, for rank checks.
    """
    q, r = np.linalg.qr(np.swapaxes(jac, 1, 2), mode="complete")
    t = q[:, :, -1]
    rdiag = np.abs(np.diagonal(r, axis1=1, axis2=2))
    bordered = np.concatenate([t[:, None, :], jac], axis=1)
    sgn = np.sign(np.linalg.det(bordered))
    sgn[sgn == 0] = 1.0
    return t * sgn[:, None], rdiag
