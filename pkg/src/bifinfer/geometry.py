"""Tangent field, bifurcation measure and its parameter gradient along traced curves.

Batched quantities follow the convention: samples first, ``(S, ...)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dual
from .errors import DegenerateGeometryError, UndefinedMeasureError
from .linalg import det_lu, minors_tangent, nullspace_qr
from .model import ModelDef, _theta, as_z, jet

__all__ = [
    "EPS_DEN",
    "RANK_TOL",
    "MeasureGradient",
    "tangent_field",
    "determinant",
    "directional_det_derivative",
    "bifurcation_measure",
    "measure_from",
    "total_measure",
    "deformation_field",
    "grad_total_measure",
    "annotate_branch",
    "sample_terms",
]

EPS_DEN = 1e-12
RANK_TOL = 1e-12
CHUNK = 256


@dataclass(frozen=True)
class MeasureGradient:
    value: float
    grad: np.ndarray


def measure_from(det, slope, eps: float = EPS_DEN):
    """phi = 1 / (1 + |det| / (|slope| + eps))."""
    det = np.asarray(det, float)
    slope = np.asarray(slope, float)
    return 1.0 / (1.0 + np.abs(det) / (np.abs(slope) + eps))


# -- first-order pass --------------------------------------------------------------------


def _first_order(model, zs, theta):
    """Return J (S, N, N+1) and F_theta (S, N, M) in raw parameter coordinates."""
    n, m = model.state_dim, model.param_dim
    nv = n + 1 + m
    f, (ta,) = jet(model, zs, theta, [np.eye(nv)])
    d = np.asarray(dual.partial(f, ta, nv), float)  # (nv, N, S)
    d = np.transpose(d, (2, 1, 0))
    return d[:, :, : n + 1], d[:, :, n + 1 :]


def _unit_tangents(jac, ref=None, start=0):
    t, rdiag = nullspace_qr(jac)
    bad = rdiag.min(axis=1) < RANK_TOL * np.maximum(rdiag.max(axis=1), 1e-300)
    if ref is not None:
        sgn = np.sign(np.einsum("ij,ij->i", t, ref))
        sgn[sgn == 0] = 1.0
        t = t * sgn[:, None]
    return t, bad


def _det_and_gradient(model, zs, theta):
    """det(dF/du) and its z-gradient, batched: (S,), (S, N+1)."""
    n, m = model.state_dim, model.param_dim
    nv = n + 1 + m
    ua = np.eye(nv)[:n]
    zb = np.eye(nv)[: n + 1]
    f, (ta, tb) = jet(model, zs, theta, [ua, zb])
    d = det_lu(dual.partial(f, ta, n))
    return np.asarray(dual.primal(d), float), np.asarray(dual.partial(d, tb, n + 1), float).T


# -- single-point operations ----------------------------------------------------------


def tangent_field(model: ModelDef, theta, z, method: str = "minors"):
    """Tangent of the steady-state curve at ``z``: (unnormalized T, unit T-hat).

    ``method="minors"`` returns the signed-minor vector as T; ``"qr"`` returns
    the QR null vector (already unit). Both share the orientation
    ``det([T; J]) > 0``.
    """
    z = as_z(model, z)
    theta = _theta(model, theta)
    jac, _ = _first_order(model, z[None, :], theta)
    t, rdiag = nullspace_qr(jac)
    if rdiag[0].min() < RANK_TOL * max(rdiag[0].max(), 1e-300):
        raise DegenerateGeometryError("dF/dz is rank deficient; tangent undefined", index=0)
    if method == "qr":
        return t[0].copy(), t[0].copy()
    if method != "minors":
        from .errors import UsageError

        raise UsageError(f"unknown tangent method {method!r}")
    tm = np.asarray(minors_tangent(jac[0]), float)
    return tm, tm / np.linalg.norm(tm)


def determinant(model: ModelDef, theta, z) -> float:
    """det(dF/du) by pivoted LU."""
    from .model import Derivative, differentiate

    return float(det_lu(differentiate(model, z, theta, Derivative.DF_DU)))


def directional_det_derivative(model: ModelDef, theta, z) -> float:
    """Derivative of det(dF/du) along the unit tangent."""
    z = as_z(model, z)
    theta = _theta(model, theta)
    _, that = tangent_field(model, theta, z, method="qr")
    _, g = _det_and_gradient(model, z[None, :], theta)
    return float(g[0] @ that)


def bifurcation_measure(model: ModelDef, theta, z, eps: float = EPS_DEN) -> float:
    """phi in [0, 1]; 1 where the determinant crosses zero with nonzero slope."""
    z = as_z(model, z)
    theta = _theta(model, theta)
    _, that = tangent_field(model, theta, z, method="qr")
    d, g = _det_and_gradient(model, z[None, :], theta)
    return float(measure_from(d[0], g[0] @ that, eps))


def deformation_field(model: ModelDef, theta, z) -> np.ndarray:
    """Normal velocity dz/dtheta = -J^T (J J^T)^{-1} dF/dtheta, shape (N+1, M)."""
    z = as_z(model, z)
    theta = _theta(model, theta)
    jac, fth = _first_order(model, z[None, :], theta)
    _, rdiag = nullspace_qr(jac)
    if rdiag[0].min() < RANK_TOL * max(rdiag[0].max(), 1e-300):
        raise DegenerateGeometryError("dF/dz is rank deficient; deformation undefined", index=0)
    return _deformation(jac, fth)[0]


def _deformation(jac, fth):
    k = jac @ np.swapaxes(jac, 1, 2)
    x = np.linalg.solve(k, fth)
    return -np.swapaxes(jac, 1, 2) @ x


# -- batched annotation -----------------------------------------------------------------


def annotate_branch(model: ModelDef, theta, zs: np.ndarray, ref_tangents: np.ndarray | None = None):
    """det, unit tangent, slope and phi at every row of ``zs``.

    Tangents come from the QR null space, oriented along ``ref_tangents``
    when given. Rank-deficient rows keep their reference tangent.
    """
    theta = np.asarray(theta, float)
    dets, tans, slopes = [], [], []
    for lo in range(0, zs.shape[0], CHUNK):
        zc = zs[lo : lo + CHUNK]
        ref = None if ref_tangents is None else ref_tangents[lo : lo + CHUNK]
        jac, _ = _first_order(model, zc, theta)
        t, bad = _unit_tangents(jac, ref)
        if ref is not None and np.any(bad):
            t[bad] = ref[bad] / np.linalg.norm(ref[bad], axis=1, keepdims=True)
        d, g = _det_and_gradient(model, zc, theta)
        dets.append(d)
        tans.append(t)
        slopes.append(np.einsum("ij,ij->i", g, t))
    det = np.concatenate(dets)
    slope = np.concatenate(slopes)
    return det, np.concatenate(tans), slope, measure_from(det, slope)


def sample_terms(model: ModelDef, theta, zs: np.ndarray, tangents: np.ndarray, eps: float = EPS_DEN) -> dict:
    """Per-sample pieces of the measure gradient.

    Returns a dict of arrays: ``phi`` (S,), ``dphi`` (S, M) the derivative
    of phi along the deformation field (explicit theta dependence plus
    transport by dz/dtheta), ``stretch`` (S, M) the tangential divergence
    of the deformation field, ``V`` (S, N+1, M) and ``bad`` (S,) marking
    rank-deficient samples.
    """
    theta = np.asarray(theta, float)
    parts = [
        _terms_chunk(model, theta, zs[lo : lo + CHUNK], tangents[lo : lo + CHUNK], eps)
        for lo in range(0, zs.shape[0], CHUNK)
    ]
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _terms_chunk(model, theta, zs, tangents, eps):
    n, m = model.state_dim, model.param_dim
    nv = n + 1 + m
    s = zs.shape[0]
    jac, fth = _first_order(model, zs, theta)
    that, bad = _unit_tangents(jac, tangents)
    kk = jac @ np.swapaxes(jac, 1, 2)  # (S, N, N)
    if np.any(bad):
        kk[bad] = np.eye(n)
    x = np.linalg.solve(kk, fth)  # (S, N, M)
    jt = np.swapaxes(jac, 1, 2)
    v = -jt @ x  # (S, N+1, M)

    # nested pass: (z, theta) basis / tangent / deformation directions
    bdir = np.zeros((1, nv, s))
    bdir[0, : n + 1] = that.T
    cdir = np.zeros((m, nv, s))
    cdir[:, : n + 1] = np.transpose(v, (2, 1, 0))
    cdir[:, n + 1 :] = np.eye(m)[:, :, None]
    f, (ta, tb, tc) = jet(model, zs, theta, [np.eye(nv), bdir, cdir])
    fa = dual.partial(f, ta, nv)  # (nv, N, S) in tags b, c
    d = det_lu(fa[:n])
    det = np.asarray(dual.primal(d), float)
    sigma = np.asarray(dual.primal(dual.partial(d, tb, 1)), float)[0]
    d_c = dual.partial(d, tc, m)  # (M, S) in tag b
    dw_det = np.asarray(dual.primal(d_c), float).T  # (S, M)
    dt_dw_det = np.asarray(dual.partial(d_c, tb, 1), float)[0].T  # (S, M)
    d2f_tw = np.asarray(dual.primal(dual.partial(dual.partial(f, tc, m), tb, 1)), float)[0]  # (M, N, S)
    d2f_tw = np.transpose(d2f_tw, (2, 1, 0))  # (S, N, M)
    dt_all = np.asarray(dual.primal(dual.partial(fa, tb, 1)), float)[0]  # (nv, N, S)
    dt_all = np.transpose(dt_all, (2, 1, 0))  # (S, N, nv)
    dt_jac, dt_fth = dt_all[:, :, : n + 1], dt_all[:, :, n + 1 :]

    # tangent rotation under the deformation: dT/dw = -J^+ D2F[T, w]
    y = jt @ np.linalg.solve(kk, d2f_tw)  # (S, N+1, M)
    ua = np.eye(nv)[:n]
    ydir = np.zeros((m, nv, s))
    ydir[:, : n + 1] = np.transpose(y, (2, 1, 0))
    f2, (ta2, te) = jet(model, zs, theta, [ua, ydir])
    dy_det = np.asarray(dual.partial(det_lu(dual.partial(f2, ta2, n)), te, m), float).T  # (S, M)
    dw_sigma = dt_dw_det - dy_det

    # tangential divergence: derivative of the deformation field along T, through the solve
    dk = dt_jac @ jt + jac @ np.swapaxes(dt_jac, 1, 2)
    dx = np.linalg.solve(kk, dt_fth - dk @ x)
    dv = -(np.swapaxes(dt_jac, 1, 2) @ x + jt @ dx)
    stretch = np.einsum("si,sim->sm", that, dv)

    phi, dphi = _dphi(det, sigma, dw_det, dw_sigma, np.sign(det), np.sign(sigma), eps)
    return {"phi": phi, "det": det, "slope": sigma, "dphi": dphi, "stretch": stretch, "V": v,
            "tangent": that, "bad": bad, "dw_det": dw_det, "dw_slope": dw_sigma}


def _dphi(det, sigma, dw_det, dw_sigma, sdet, ssig, eps=EPS_DEN):
    """phi and its derivative along the deformation, with the signs of det and slope given."""
    den = np.abs(sigma) + eps
    phi = 1.0 / (1.0 + np.abs(det) / den)
    dr = (sdet / den)[:, None] * dw_det - (np.abs(det) * ssig / den**2)[:, None] * dw_sigma
    return phi, -(phi**2)[:, None] * dr


# -- integrals ---------------------------------------------------------------------------


def _weights(ds: np.ndarray) -> np.ndarray:
    w = np.zeros_like(ds)
    w[:-1] += 0.5 * ds[1:]
    w[1:] += 0.5 * ds[1:]
    return w


def _integrals(diagram):
    i1 = i2 = 0.0
    for b in diagram.branches:
        if len(b) < 2:
            continue
        seg = b.ds[1:]
        i1 += float(np.sum(0.5 * (b.measure[:-1] + b.measure[1:]) * seg))
        i2 += float(np.sum(seg))
    return i1, i2


def total_measure(diagram) -> float:
    """Arclength-weighted mean of phi over all branches (trapezoid rule)."""
    i1, i2 = _integrals(diagram)
    if not i2 > 0:
        raise UndefinedMeasureError("total measure undefined for an empty diagram")
    return i1 / i2


def _face_normal(end: str, n: int) -> np.ndarray:
    e = np.zeros(n + 1)
    e[n if end == "p" else int(end[1:]) - 1] = 1.0
    return e


def grad_total_measure(model: ModelDef, theta, diagram) -> MeasureGradient:
    """Value and theta-gradient of the total measure without re-tracing.

    Differentiates both line integrals with the transport theorem on the
    deforming curve: pointwise change of phi along dz/dtheta, the stretch
    of arclength, and the motion of branch ends pinned to the window or
    box faces.
    """
    theta = _theta(model, theta)
    n, m = model.state_dim, model.param_dim
    i1, i2 = _integrals(diagram)
    if not i2 > 0:
        raise UndefinedMeasureError("total measure undefined for an empty diagram")
    psi = i1 / i2
    d1 = np.zeros(m)
    d2 = np.zeros(m)
    offset = 0
    for b in diagram.branches:
        if len(b) < 2:
            offset += len(b)
            continue
        t = sample_terms(model, theta, b.zs, b.tangent)
        if np.any(t["bad"]):
            idx = int(np.flatnonzero(t["bad"])[0])
            raise DegenerateGeometryError(f"rank-deficient Jacobian at sample {offset + idx}", index=offset + idx)
        w = _weights(b.ds)
        phi = b.measure
        f1 = t["dphi"] + phi[:, None] * t["stretch"]
        kinks = [i for i in b.nodes if 0 < i < len(b) - 1]
        if kinks:
            # phi has a corner at inserted nodes: integrate each side with its one-sided limit
            w = w.copy()
            for i in kinks:
                w[i] = 0.0
                for j, nb in ((i, i - 1), (i + 1, i + 1)):
                    one = np.array([i])
                    _, side = _dphi(t["det"][one], t["slope"][one], t["dw_det"][one], t["dw_slope"][one],
                                    np.sign(t["det"][[nb]]), np.sign(t["slope"][[nb]]))
                    d1 += 0.5 * b.ds[j] * (side[0] + phi[i] * t["stretch"][i])
                    d2 += 0.5 * b.ds[j] * t["stretch"][i]
        d1 += w @ f1
        d2 += w @ t["stretch"]
        for k, end in enumerate(b.ends):
            if end is None or b.closed:
                continue
            i = 0 if k == 0 else len(b) - 1
            nrm = _face_normal(end, n)
            nt = float(nrm @ t["tangent"][i])
            if abs(nt) < 1e-14:
                continue
            alpha = -(nrm @ t["V"][i]) / nt
            sgn = 1.0 if k == 1 else -1.0
            d1 += sgn * phi[i] * alpha
            d2 += sgn * alpha
        offset += len(b)
    return MeasureGradient(psi, (d1 - psi * d2) / i2)
