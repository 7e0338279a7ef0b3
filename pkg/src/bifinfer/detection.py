"""Bifurcation points: zero crossings of det(dF/du) along the traced curve."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dual
from .errors import (
    DegenerateBifurcationError,
    DegenerateSensitivityError,
    ModelEvaluationError,
    RefinementError,
    SingularityError,
)
from .geometry import RANK_TOL
from .linalg import det_lu, nullspace_qr
from .model import ModelDef, _theta, as_z, jet

__all__ = [
    "EPS_SLOPE",
    "DELTA_MERGE",
    "BifurcationPoint",
    "PredictionSet",
    "detect_crossings",
    "detect_touches",
    "refine_bifurcation",
    "grad_bifurcation",
    "predictions",
]

EPS_SLOPE = 1e-8
DELTA_MERGE = 1e-6
ZERO_DET = 1e-12


@dataclass(frozen=True, eq=False)
class BifurcationPoint:
    z: np.ndarray
    det_slope: float
    dp_dtheta: np.ndarray | None = None
    branch_id: int | None = None
    bracket: tuple | None = None

    @property
    def u(self) -> np.ndarray:
        return self.z[:-1]

    @property
    def p(self) -> float:
        return float(self.z[-1])

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "u": [float(x) for x in self.u],
            "det_slope": self.det_slope,
            "dp_dtheta": None if self.dp_dtheta is None else [float(x) for x in self.dp_dtheta],
            "branch_id": self.branch_id,
            "bracket": None if self.bracket is None else list(self.bracket),
        }


@dataclass(frozen=True)
class PredictionSet:
    points: tuple = ()
    degenerate_flags: tuple = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def p_values(self) -> np.ndarray:
        return np.array([pt.p for pt in self.points], dtype=float)

    def to_dict(self) -> dict:
        return {"points": [pt.to_dict() for pt in self.points], "degenerate": list(self.degenerate_flags)}


def _dets(branch):
    return np.asarray(getattr(branch, "det", branch), dtype=float)


def detect_crossings(branch) -> list[tuple[int, int]]:
    """Index pairs bracketing each sign change of det along a branch.

    A sample whose determinant is zero (within 1e-12) between neighbours of
    opposite sign gives a single bracket centred on it.
    """
    det = _dets(branch)
    zero = np.abs(det) <= ZERO_DET
    out = []
    for i in range(len(det) - 1):
        if zero[i] or zero[i + 1]:
            continue
        if det[i] * det[i + 1] < 0:
            out.append((i, i + 1))
    for i in np.flatnonzero(zero):
        lo, hi = i - 1, i + 1
        while lo >= 0 and zero[lo]:
            lo -= 1
        while hi < len(det) and zero[hi]:
            hi += 1
        if lo >= 0 and hi < len(det) and det[lo] * det[hi] < 0 and (i - lo) == 1:
            out.append((lo, hi))
    return sorted(set(out))


def detect_touches(branch) -> list[int]:
    """Samples where |det| has a local minimum without a sign change.

    Only minima at which the directional slope of det reverses are kept,
    which is where a quadratic touch of zero would sit.
    """
    det = _dets(branch)
    slope = np.asarray(getattr(branch, "slope", np.gradient(det)), dtype=float)
    a = np.abs(det)
    out = []
    for i in range(1, len(det) - 1):
        if det[i - 1] * det[i + 1] <= 0:
            continue
        if a[i] <= a[i - 1] and a[i] <= a[i + 1] and slope[i - 1] * slope[i + 1] < 0 and a[i] < min(a[i - 1], a[i + 1]) * 0.5:
            out.append(i)
    return out


# -- extended system -------------------------------------------------------------------


def _extended(model, z, theta):
    """F, dF/dz, dF/dtheta, det(dF/du) and its (z, theta) gradient at one point."""
    n, m = model.state_dim, model.param_dim
    nv = n + 1 + m
    eye = np.eye(nv)
    f, (ta, tb) = jet(model, z[None, :], theta, [eye[:n], eye])
    d = det_lu(dual.partial(f, ta, n))
    det = float(np.asarray(dual.primal(d))[0])
    ddet = np.asarray(dual.partial(d, tb, nv), float)[:, 0]
    full = np.asarray(dual.primal(dual.partial(f, tb, nv)), float)[..., 0].T  # (N, nv)
    fval = np.asarray(dual.primal(f), float)[:, 0]
    if not (np.all(np.isfinite(full)) and np.all(np.isfinite(ddet)) and np.isfinite(det)):
        raise ModelEvaluationError("non-finite extended system", z=z, theta=theta)
    return fval, full[:, : n + 1], full[:, n + 1 :], det, ddet[: n + 1], ddet[n + 1 :]


def _slope(jac, g, ref=None):
    t, rdiag = nullspace_qr(jac[None])
    if rdiag[0].min() < 1e-8 * max(rdiag[0].max(), 1e-300):
        return 0.0, None
    t = t[0]
    if ref is not None and t @ ref < 0:
        t = -t
    return float(g @ t), t


def refine_bifurcation(model: ModelDef, theta, z_guess, tol: float = 1e-10, max_iter: int = 25,
                       eps_slope: float = EPS_SLOPE, branch_id=None, bracket=None, ref_tangent=None) -> BifurcationPoint:
    """Damped Newton on G(z) = [F; det dF/du] = 0.

    Iterates until the residual is below ``tol`` and the Newton step has
    stalled at round-off. When successive steps shrink by a steady factor
    near one half (a double root, where G's Jacobian is singular) the step
    is doubled to restore fast convergence; such a root is reported as
    degenerate. The converged point must have a rank-N curve Jacobian and a
    determinant slope above ``eps_slope``.
    """
    z = as_z(model, z_guess).copy()
    theta = _theta(model, theta)
    n = model.state_dim
    prev = None
    ratios: list[float] = []
    double = False
    res = np.inf
    for _ in range(max_iter):
        f, jac, _, det, g, _ = _extended(model, z, theta)
        gv = np.append(f, det)
        res = float(np.max(np.abs(gv)))
        a = np.vstack([jac, g])
        try:
            step = np.linalg.solve(a, -gv)
        except np.linalg.LinAlgError:
            if res <= tol:
                break
            raise RefinementError("singular extended Jacobian during refinement")
        if not np.all(np.isfinite(step)):
            if res <= tol:
                break
            raise RefinementError("non-finite refinement step")
        size = float(np.linalg.norm(step))
        if res <= tol and size <= 1e-12 * (1.0 + float(np.linalg.norm(z))):
            break
        if prev is not None and prev > 0:
            ratios.append(size / prev)
            if len(ratios) >= 2 and all(0.35 < r < 0.65 for r in ratios[-2:]) and size < 1e-2:
                double = True
        prev = size
        lam = 2.0 if double else 1.0
        # backtrack on the residual of G
        for _ in range(8):
            zt = z + lam * step
            try:
                ft, _, _, dt, _, _ = _extended(model, zt, theta)
                rt = float(np.max(np.abs(np.append(ft, dt))))
            except ModelEvaluationError:
                rt = np.inf
            if rt < res or rt <= tol or lam <= 1.0 / 64:
                break
            lam *= 0.5
        if not np.isfinite(rt):
            raise RefinementError("refinement left the model's domain")
        z = zt
    else:
        f, jac, _, det, g, _ = _extended(model, z, theta)
        res = float(np.max(np.abs(np.append(f, det))))
        if res > tol:
            raise RefinementError(f"extended Newton did not converge (residual {res:.3e})")
    f, jac, _, det, g, _ = _extended(model, z, theta)
    res = float(np.max(np.abs(np.append(f, det))))
    if res > tol:
        raise RefinementError(f"extended Newton did not converge (residual {res:.3e})")
    slope, _ = _slope(jac, g, ref_tangent)
    if abs(slope) <= eps_slope:
        raise DegenerateBifurcationError(f"determinant slope {slope:.3e} at p={z[n]:.6g} is below {eps_slope:g}")
    if double:
        # halving steps mean G's Jacobian is singular at the root, so the
        # true slope there is zero; the residual slope is truncation error
        raise DegenerateBifurcationError(f"double root of the extended system at p={z[n]:.6g} (slope {slope:.3e})")
    return BifurcationPoint(z, slope, None, branch_id, bracket)


def grad_bifurcation(model: ModelDef, theta, bp) -> np.ndarray:
    """dp*/dtheta by the implicit function theorem on G(z; theta) = 0."""
    theta = _theta(model, theta)
    z = bp.z if isinstance(bp, BifurcationPoint) else as_z(model, bp)
    _, jac, fth, _, gz, gth = _extended(model, z, theta)
    a = np.vstack([jac, gz])
    b = np.vstack([fth, gth[None, :]])
    if a.size:
        s = np.linalg.svd(a, compute_uv=False)
        if s[-1] <= 1e-12 * max(s[0], 1e-300):
            raise DegenerateSensitivityError("extended Jacobian is singular at this point")
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateSensitivityError("extended Jacobian is singular at this point") from exc
    return -sol[-1]


def predictions(model: ModelDef, theta, diagram, eps_slope: float = EPS_SLOPE, delta_merge: float = DELTA_MERGE,
                sensitivities: bool = True) -> PredictionSet:
    """Detect, refine and merge bifurcations along every branch of ``diagram``."""
    theta = _theta(model, theta)
    found: list[BifurcationPoint] = []
    flags: list[dict] = []
    for bid, br in enumerate(diagram.branches):
        if len(br) < 2:
            continue
        candidates = [(pair, "crossing") for pair in detect_crossings(br)]
        candidates += [((i, i), "touch") for i in detect_touches(br)]
        for (i, j), kind in candidates:
            guess = _bracket_guess(br, i, j)
            ref = br.tangent[i] + br.tangent[j]
            try:
                bp = refine_bifurcation(model, theta, guess, eps_slope=eps_slope, branch_id=bid, bracket=(int(i), int(j)),
                                        ref_tangent=ref)
            except DegenerateBifurcationError as exc:
                flags.append(_flag(bid, i, j, guess, "degenerate", str(exc)))
                continue
            except (RefinementError, SingularityError, ModelEvaluationError) as exc:
                if kind == "crossing":
                    flags.append(_flag(bid, i, j, guess, "unrefined", str(exc)))
                continue
            if kind == "touch":
                # a touch that refines to a simple crossing elsewhere is not this candidate
                if np.linalg.norm(bp.z - guess) > 2.0 * diagram.settings.step:
                    continue
            if not _in_window(model, bp.z, diagram):
                continue
            found.append(bp)
    merged: list[BifurcationPoint] = []
    for bp in sorted(found, key=lambda b: (b.p, tuple(b.u))):
        if any(abs(bp.p - q.p) <= delta_merge and np.linalg.norm(bp.u - q.u) <= delta_merge for q in merged):
            continue
        merged.append(bp)
    if sensitivities:
        out = []
        for bp in merged:
            try:
                g = grad_bifurcation(model, theta, bp)
            except DegenerateSensitivityError as exc:
                flags.append(_flag(bp.branch_id, *bp.bracket, bp.z, "no_sensitivity", str(exc)))
                continue
            out.append(BifurcationPoint(bp.z, bp.det_slope, g, bp.branch_id, bp.bracket))
        merged = out
    return PredictionSet(tuple(merged), tuple(flags))


def _in_window(model, z, diagram) -> bool:
    lo, hi = diagram.p_window
    return lo - 1e-9 <= z[-1] <= hi + 1e-9


def _bracket_guess(branch, i, j):
    if i == j:
        return branch.zs[i].copy()
    d0, d1 = branch.det[i], branch.det[j]
    f = d0 / (d0 - d1) if d0 != d1 else 0.5
    if j - i > 1:
        return branch.zs[(i + j) // 2].copy()
    return branch.zs[i] + f * (branch.zs[j] - branch.zs[i])


def _flag(bid, i, j, z, reason, message):
    return {
        "branch_id": bid,
        "bracket": [int(i), int(j)],
        "p": float(z[-1]),
        "u": [float(x) for x in z[:-1]],
        "reason": reason,
        "message": message,
    }
