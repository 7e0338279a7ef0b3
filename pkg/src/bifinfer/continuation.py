"""Pseudo-arclength continuation of the steady-state curve F(u, p) = 0."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg.lapack import dgesv
from scipy.optimize import brentq
from scipy.stats import qmc

from .errors import CorrectorError, ModelEvaluationError, SingularityError, UsageError
from .model import Evaluator, ModelDef, StatePoint, _theta, as_z

__all__ = [
    "TraceSettings",
    "BranchSample",
    "Branch",
    "Diagram",
    "newton_correct",
    "find_roots_deflated",
    "trace_branches",
    "write_diagram_csv",
    "read_diagram_csv",
    "DiagramTable",
]


@dataclass(frozen=True)
class TraceSettings:
    step: float = 0.02
    max_samples: int = 10000
    tol: float = 1e-10
    max_newton: int = 25
    n_root_seeds: int = 16
    n_p_seeds: int = 5
    root_separation: float = 1e-6
    root_max_iter: int = 40
    backoff: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.step > 0:
            raise UsageError("step must be positive")
        if self.max_samples < 2:
            raise UsageError("max_samples must be at least 2")
        if not self.tol > 0:
            raise UsageError("tol must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BranchSample:
    z: np.ndarray
    det: float
    tangent: np.ndarray
    ds: float
    measure: float

    @property
    def u(self) -> np.ndarray:
        return self.z[:-1]

    @property
    def p(self) -> float:
        return float(self.z[-1])


@dataclass(frozen=True, eq=False)
class Branch:
    """An oriented polyline on the steady-state curve, stored column-wise.

    ``zs`` (S, N+1), ``det`` (S,), ``tangent`` (S, N+1) unit vectors,
    ``ds`` (S,) chord length to the previous sample, ``measure`` (S,) and
    ``slope`` (S,) the directional derivative of the determinant along the
    tangent. ``ends`` records why each end stopped: ``"p"`` or ``"u<i>"``
    when clipped to the window/box face (exactly on it), else ``None``.
    """

    zs: np.ndarray
    det: np.ndarray
    tangent: np.ndarray
    ds: np.ndarray
    measure: np.ndarray
    slope: np.ndarray
    closed: bool = False
    ends: tuple = (None, None)
    flags: tuple = ()
    nodes: tuple = ()  # indices of samples inserted at sign changes of det or slope

    def __len__(self) -> int:
        return self.zs.shape[0]

    def __getitem__(self, i: int) -> BranchSample:
        return BranchSample(self.zs[i], float(self.det[i]), self.tangent[i], float(self.ds[i]), float(self.measure[i]))

    @property
    def samples(self) -> list[BranchSample]:
        return [self[i] for i in range(len(self))]

    @property
    def length(self) -> float:
        return float(self.ds.sum())


@dataclass(frozen=True, eq=False)
class Diagram:
    branches: tuple
    theta: np.ndarray
    p_window: tuple
    settings: TraceSettings
    flags: tuple = ()

    @property
    def empty(self) -> bool:
        return not any(len(b) >= 2 for b in self.branches)

    @property
    def n_samples(self) -> int:
        return sum(len(b) for b in self.branches)


# -- Newton correctors -----------------------------------------------------------


def _solve(a, b):
    lu, piv, x, info = dgesv(a, b)
    if info != 0 or not np.isfinite(x).all():
        raise np.linalg.LinAlgError("singular matrix")
    return x


def _correct(ev, guess, direction, tol, max_iter):
    """Bordered Newton: F(z) = 0 and (z - guess) . direction = 0.

    Returns ``(z, jac, iterations)`` with ``jac`` evaluated at ``z``.
    """
    n = ev.n
    z = guess.copy()
    a = np.empty((n + 1, n + 1))
    a[n] = direction
    rhs = np.empty(n + 1)
    f, jac = ev.fj(z)
    res = float(np.abs(f).max())
    for it in range(max_iter + 1):
        if res <= tol:
            return z, jac, it
        if it == max_iter:
            break
        a[:n] = jac
        rhs[:n] = -f
        rhs[n] = -float((z - guess) @ direction)
        try:
            dz = _solve(a, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularityError("singular bordered Jacobian") from exc
        lam = 1.0
        while True:
            zt = z + lam * dz
            try:
                ft, jt = ev.fj(zt)
                rt = float(np.abs(ft).max())
            except ModelEvaluationError:
                rt = math.inf
            if rt < res or lam < 1.0 / 64 or (rt <= 2 * res and lam == 1.0):
                break
            lam *= 0.5
        if not math.isfinite(rt):
            raise CorrectorError("corrector left the model's domain", residual=res)
        z, f, jac, res = zt, ft, jt, rt
    raise CorrectorError(f"corrector did not converge, residual {res:.3e}", residual=res)


def newton_correct(model: ModelDef, theta, z_guess, constraint_direction, tol: float = 1e-10,
                   max_iter: int = 25) -> StatePoint:
    """Project ``z_guess`` onto the curve within the hyperplane orthogonal to ``constraint_direction``."""
    z_guess = as_z(model, z_guess)
    theta = _theta(model, theta)
    d = np.asarray(constraint_direction, dtype=float)
    if d.shape != z_guess.shape or not np.any(d):
        raise UsageError("constraint direction must be a nonzero vector of length N+1")
    z, _, _ = _correct(Evaluator(model, theta), z_guess, d, tol, max_iter)
    n = model.state_dim
    return StatePoint(z[:n].copy(), float(z[n]))


# -- deflated root search ----------------------------------------------------------

STALL_LIMIT = 6


def _deflated_round(ev, u0, p0, roots, tol, max_iter, span):
    """Deflated Newton from every seed at once; returns converged states (may repeat)."""
    n = ev.n
    k = u0.shape[0]
    u = u0.copy()
    active = np.ones(k, dtype=bool)
    done = np.zeros(k, dtype=bool)
    zs = np.empty((k, n + 1))
    zs[:, n] = p0
    r = np.array(roots).reshape(-1, n)
    best = np.full(k, np.inf)
    stall = np.zeros(k, dtype=int)
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            zs[idx, :n] = u[idx]
            f, jac = ev.fj_batch(zs[idx])
            ok = np.isfinite(f).all(axis=1) & np.isfinite(jac).all(axis=(1, 2))
            conv = ok & (np.abs(f).max(axis=1) <= tol)
            done[idx[conv]] = True
            active[idx[~ok | conv]] = False
            keep = ok & ~conv
            idx, f, a = idx[keep], f[keep], jac[keep][:, :, :n]
            if idx.size == 0:
                break
            res = np.abs(f).max(axis=1)
            if r.shape[0]:
                # gradient of log prod_r (1/|u-r|^2 + 1)
                d = u[idx, None, :] - r[None, :, :]
                d2 = np.einsum("krn,krn->kr", d, d)
                g = -2.0 * np.sum(d / (d2 * (d2 + 1.0))[:, :, None], axis=1)
                a = a + f[:, :, None] * g[:, None, :]
                res = res * np.prod(1.0 + 1.0 / d2, axis=1)
            # a seed whose deflated residual stops shrinking is wandering
            better = res < 0.9 * best[idx]
            best[idx] = np.where(better, res, best[idx])
            stall[idx] = np.where(better, 0, stall[idx] + 1)
            quit = stall[idx] >= STALL_LIMIT
            active[idx[quit]] = False
            idx, a, f = idx[~quit], a[~quit], f[~quit]
            if idx.size == 0:
                break
            dets = np.linalg.det(a)
            good = np.isfinite(dets) & (np.abs(dets) > 1e-300)
            active[idx[~good]] = False
            idx, a, f = idx[good], a[good], f[good]
            if idx.size == 0:
                break
            du = np.linalg.solve(a, -f[:, :, None])[:, :, 0]
            u[idx] += du
            bad = ~np.isfinite(u[idx]).all(axis=1) | (np.abs(u[idx] - u0[idx]) > span).any(axis=1)
            active[idx[bad]] = False
    return u[done]


def _polish(ev, u, p0, tol):
    n = ev.n
    guess = np.append(u, p0)
    e = np.zeros(n + 1)
    e[n] = 1.0
    z, _, _ = _correct(ev, guess, e, tol, 10)
    return z[:n]


def _seeds(model, theta, settings):
    lo, hi = model.box(theta)
    rng = np.random.Generator(np.random.Philox(settings.seed))
    sampler = qmc.LatinHypercube(d=model.state_dim, seed=rng)
    return lo + sampler.random(settings.n_root_seeds) * (hi - lo)


def _find_roots(ev, model, p0, settings, known=()):
    """Rounds of deflated Newton from all seeds until a round finds nothing new."""
    lo, hi = model.box(ev.theta)
    span = 10.0 * np.maximum(hi - lo, 1.0)
    slack = 1e-9 * (1.0 + np.abs(hi - lo))
    roots: list[np.ndarray] = [np.asarray(k, float) for k in known]
    n_known = len(roots)
    seeds = _seeds(model, ev.theta, settings)
    for _ in range(8):
        new = 0
        for u in _deflated_round(ev, seeds, p0, roots, settings.tol, settings.root_max_iter, span):
            try:
                u = _polish(ev, u, p0, settings.tol)
            except (CorrectorError, SingularityError, ModelEvaluationError):
                continue
            if np.any(u < lo - slack) or np.any(u > hi + slack):
                continue
            if any(np.linalg.norm(u - r) <= settings.root_separation for r in roots):
                continue
            roots.append(u)
            new += 1
        if new == 0:
            break
    return roots[n_known:]


def find_roots_deflated(model: ModelDef, theta, p0: float, settings: TraceSettings | None = None) -> list[np.ndarray]:
    """Distinct steady states at ``p = p0`` found by deflated Newton from Latin-hypercube seeds."""
    settings = settings or TraceSettings()
    theta = _theta(model, theta)
    lo, hi = model.p_window
    if not lo <= p0 <= hi:
        raise UsageError(f"p0={p0} outside p_window {model.p_window}")
    return _find_roots(Evaluator(model, theta), model, float(p0), settings)


# -- tracing -------------------------------------------------------------------------


def _tangent(jac, ref):
    """Unit tangent oriented along ``ref`` via the bordered system [J; ref] x = e."""
    n = jac.shape[0]
    a = np.empty((n + 1, n + 1))
    a[:n] = jac
    a[n] = ref
    e = np.zeros(n + 1)
    e[n] = 1.0
    try:
        x = _solve(a, e)
    except np.linalg.LinAlgError:
        return None, 0.0
    nx = math.sqrt(float(x @ x))
    if not math.isfinite(nx) or nx == 0.0:
        return None, 0.0
    return x / nx, 1.0 / nx


def _initial_tangent(jac):
    q, _ = np.linalg.qr(jac.T, mode="complete")
    t = q[:, -1]
    if t[-1] < 0 or (t[-1] == 0 and t[np.argmax(np.abs(t))] < 0):
        t = -t
    return t


def _exit_fraction(z0, z1, plo, phi, ulo, uhi):
    """Earliest fraction along z0->z1 where the window/box is left, with the face."""
    n = z0.size - 1
    best, face = None, None
    lows = np.append(ulo, plo)
    highs = np.append(uhi, phi)
    for i in range(n + 1):
        for bound in (lows[i], highs[i]):
            crossed = (z1[i] > bound >= z0[i]) if bound == highs[i] else (z1[i] < bound <= z0[i])
            if crossed and z1[i] != z0[i]:
                f = (bound - z0[i]) / (z1[i] - z0[i])
                if best is None or f < best:
                    best, face = f, (i, bound)
    return best, face


def _seg_distance(pt, zs):
    """Distance from ``pt`` to the polyline through the rows of ``zs``."""
    if zs.shape[0] == 1:
        return float(np.linalg.norm(zs[0] - pt))
    a = zs[:-1]
    d = zs[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", pt - a, d) / np.where(dd > 0, dd, 1.0), 0.0, 1.0)
    diff = a + t[:, None] * d - pt
    return float(np.sqrt(np.min(np.einsum("ij,ij->i", diff, diff))))


class _Walker:
    def __init__(self, model, theta, settings):
        self.model = model
        self.theta = theta
        self.ev = Evaluator(model, theta)
        self.s = settings
        self.n = model.state_dim
        self.plo, self.phi = model.p_window
        self.ulo, self.uhi = model.box(theta)
        self.lows = np.append(self.ulo, self.plo)
        self.highs = np.append(self.uhi, self.phi)

    def clip(self, z0, z1, face):
        i, bound = face
        f = (bound - z0[i]) / (z1[i] - z0[i])
        guess = z0 + f * (z1 - z0)
        guess[i] = bound
        e = np.zeros(self.n + 1)
        e[i] = 1.0
        z, jac, _ = _correct(self.ev, guess, e, self.s.tol, self.s.max_newton)
        return z, jac

    def walk(self, z0, t0, start=None, budget=None):
        """Continue from ``z0`` along ``t0`` until an exit, loop closure or failure.

        Returns (points, tangents, end, closed, flags); ``points`` excludes z0.
        """
        s = self.s
        h0 = s.step
        z, t = z0, t0
        pts, tans, flags = [], [], []
        travelled = 0.0
        budget = s.max_samples - 1 if budget is None else budget
        end, closed = None, False
        while len(pts) < budget:
            h = h0
            for _ in range(s.backoff + 1):
                guess = z + h * t
                try:
                    zn, jac, _ = _correct(self.ev, guess, t, s.tol, s.max_newton)
                    tn, cosang = _tangent(jac, t)
                except (CorrectorError, SingularityError, ModelEvaluationError):
                    tn = None
                if tn is not None and cosang > 0.5:
                    dz = zn - z
                    step = math.sqrt(float(dz @ dz))
                    if step <= 2.0 * h:
                        break
                tn = None
                h *= 0.5
            if tn is None:
                flags.append("truncated")
                break
            frac = face = None
            if (zn < self.lows).any() or (zn > self.highs).any():
                frac, face = _exit_fraction(z, zn, self.plo, self.phi, self.ulo, self.uhi)
            if frac is not None:
                if frac > 1e-12:
                    try:
                        zc, jc = self.clip(z, zn, face)
                        tc, _ = _tangent(jc, t)
                    except (CorrectorError, SingularityError, ModelEvaluationError):
                        tc = None
                    if tc is not None:
                        pts.append(zc)
                        tans.append(tc)
                    else:
                        flags.append("clip_failed")
                i = face[0]
                end = "p" if i == self.n else f"u{i + 1}"
                break
            if (start is not None and travelled > 2.0 * h0 and float(np.dot(tn, start[1])) > 0
                    and float(np.linalg.norm(zn - start[0])) < 2.0 * h0 + step):
                if _seg_distance(start[0], np.stack([z, zn])) < 0.5 * h0:
                    closed = True
                    break
            travelled += step
            pts.append(zn)
            tans.append(tn)
            z, t = zn, tn
        else:
            flags.append("max_samples")
        return pts, tans, end, closed, flags


def _trace_one(walker, z0, jac0):
    t0 = _initial_tangent(jac0)
    fwd = walker.walk(z0, t0, start=(z0, t0))
    pts_f, tans_f, end_f, closed, flags = fwd
    if closed:
        zs = [z0] + pts_f + [z0.copy()]
        ts = [t0] + tans_f + [t0.copy()]
        return np.array(zs), np.array(ts), True, (None, None), tuple(flags)
    budget = walker.s.max_samples - 1 - len(pts_f)
    pts_b, tans_b, end_b, _, flags_b = walker.walk(z0, -t0, budget=max(budget, 0))
    zs = pts_b[::-1] + [z0] + pts_f
    ts = [-t for t in tans_b[::-1]] + [t0] + tans_f
    return np.array(zs), np.array(ts), False, (end_b, end_f), tuple(dict.fromkeys(flags_b + flags))


def _on_existing(z, traced, tol):
    return any(_seg_distance(z, zs) < tol for zs in traced)


def _overlap_fraction(zs, traced, tol):
    if not traced:
        return 0.0
    hits = sum(1 for z in zs if _on_existing(z, traced, tol))
    return hits / len(zs)


def trace_branches(model: ModelDef, theta, settings: TraceSettings | None = None, annotate: bool = True) -> Diagram:
    """Trace every branch of the steady-state curve reachable from the seed p-values."""
    from .geometry import annotate_branch

    settings = settings or TraceSettings()
    theta = _theta(model, theta)
    walker = _Walker(model, theta, settings)
    plo, phi = model.p_window
    p_seeds = [plo] + [plo + (phi - plo) * k / (settings.n_p_seeds + 1) for k in range(1, settings.n_p_seeds + 1)]
    tol_dup = 0.5 * settings.step
    traced: list[np.ndarray] = []
    raw = []
    flags: list[str] = []
    n = model.state_dim
    for p0 in p_seeds:
        known = []
        for zs in traced:
            for u in _crossings_at(zs, p0):
                try:
                    known.append(_polish(walker.ev, u, p0, settings.tol))
                except (CorrectorError, SingularityError, ModelEvaluationError):
                    pass
        try:
            roots = _find_roots(walker.ev, model, p0, settings, known=known)
        except ModelEvaluationError:
            flags.append("root_search_failed")
            continue
        for u in roots:
            z0 = np.append(u, p0)
            if _on_existing(z0, traced, tol_dup):
                continue
            try:
                _, jac0 = walker.ev.fj(z0)
                zs, ts, closed, ends, bflags = _trace_one(walker, z0, jac0)
            except (ModelEvaluationError, np.linalg.LinAlgError):
                flags.append("branch_failed")
                continue
            if zs.shape[0] < 2:
                continue
            if _overlap_fraction(zs, traced, tol_dup) > 0.5:
                continue
            traced.append(zs)
            raw.append((zs, ts, closed, ends, bflags))
    branches = []
    for zs, ts, closed, ends, bflags in raw:
        if ts[0, n] < 0:
            zs, ts, ends = zs[::-1].copy(), -ts[::-1], ends[::-1]
        branches.append(_make_branch(model, theta, zs, ts, closed, ends, bflags, annotate, annotate_branch))
    if not branches:
        flags.append("no_branches")
    if any("truncated" in b.flags for b in branches):
        flags.append("truncated")
    return Diagram(tuple(branches), theta.copy(), tuple(model.p_window), settings, tuple(dict.fromkeys(flags)))


def _make_branch(model, theta, zs, ts, closed, ends, bflags, annotate, annotate_branch):
    nodes = ()
    if annotate:
        det, tangent, slope, measure = annotate_branch(model, theta, zs, ts)
        extra_z, extra_t, at = _kink_nodes(model, theta, zs, tangent, det, slope)
        if at:
            nodes = tuple(int(a) + k for k, a in enumerate(at))
            zs = np.insert(zs, at, extra_z, axis=0)
            ts = np.insert(tangent, at, extra_t, axis=0)
            det, tangent, slope, measure = annotate_branch(model, theta, zs, ts)
    else:
        det = slope = measure = np.full(zs.shape[0], np.nan)
        tangent = ts
    ds = np.zeros(zs.shape[0])
    ds[1:] = np.linalg.norm(np.diff(zs, axis=0), axis=1)
    return Branch(zs, det, tangent, ds, measure, slope, closed, tuple(ends), tuple(bflags), nodes)


def _kink_nodes(model, theta, zs, tangent, det, slope):
    """Curve points where det or its slope changes sign, one per bracketing segment.

    phi has a corner wherever either changes sign; placing a quadrature
    node exactly there keeps the trapezoid error smooth in theta.
    """
    from .geometry import _det_and_gradient, _first_order, _unit_tangents

    ev = Evaluator(model, theta)

    def point(i, tau):
        chord = zs[i + 1] - zs[i]
        z, _, _ = _correct(ev, zs[i] + tau * chord, chord, 1e-12 * (1 + np.abs(zs[i]).max()), 25)
        return z, chord

    def det_at(i, tau):
        z, _ = point(i, tau)
        return float(_det_and_gradient(model, z[None, :], theta)[0][0])

    def slope_at(i, tau):
        z, chord = point(i, tau)
        jac, _ = _first_order(model, z[None, :], theta)
        t, _ = _unit_tangents(jac, chord[None, :])
        return float(_det_and_gradient(model, z[None, :], theta)[1][0] @ t[0])

    zs_new, ts_new, at = [], [], []
    for i in range(len(zs) - 1):
        for values, fn in ((det, det_at), (slope, slope_at)):
            if not values[i] * values[i + 1] < 0:
                continue
            try:
                tau = brentq(lambda x: fn(i, x), 0.0, 1.0, xtol=1e-14, rtol=1e-14)
                z, chord = point(i, tau)
            except (ValueError, RuntimeError, CorrectorError, SingularityError, ModelEvaluationError):
                continue
            if min(np.linalg.norm(z - zs[i]), np.linalg.norm(z - zs[i + 1])) < 1e-9:
                continue
            zs_new.append(z)
            ts_new.append(tangent[i] + tangent[i + 1])
            at.append(i + 1)
            break
    return zs_new, ts_new, at


def _crossings_at(zs, p0):
    """States where the polyline crosses p = p0 (linearly interpolated)."""
    p = zs[:, -1]
    out = []
    d = p - p0
    for i in range(len(p) - 1):
        if d[i] == 0.0:
            out.append(zs[i, :-1])
        elif d[i] * d[i + 1] < 0:
            f = d[i] / (d[i] - d[i + 1])
            out.append(zs[i, :-1] + f * (zs[i + 1, :-1] - zs[i, :-1]))
    if len(p) and d[-1] == 0.0:
        out.append(zs[-1, :-1])
    return out


# -- CSV ---------------------------------------------------------------------------


def _header(n):
    return (["branch_id", "p"] + [f"u_{i + 1}" for i in range(n)] + ["det", "measure", "ds"]
            + [f"t_u{i + 1}" for i in range(n)] + ["t_p"])


def write_diagram_csv(diagram: Diagram, path) -> None:
    """One row per sample; floats in shortest round-trip form."""
    n = None
    rows = []
    for bid, b in enumerate(diagram.branches):
        n = b.zs.shape[1] - 1
        for i in range(len(b)):
            z = b.zs[i]
            rows.append([bid, z[n], *z[:n], b.det[i], b.measure[i], b.ds[i], *b.tangent[i]])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(n if n is not None else 1))
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


@dataclass
class DiagramTable:
    """Branch arrays read back from a diagram CSV."""

    state_dim: int
    branches: list = field(default_factory=list)  # dicts: zs, det, measure, ds, tangent


def read_diagram_csv(path) -> DiagramTable:
    from .errors import DataError

    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            body = [r for r in reader if r]
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not header or header[:2] != ["branch_id", "p"]:
        raise DataError(f"{path}: not a diagram file")
    n = sum(1 for h in header if h.startswith("u_"))
    if n == 0 or header != _header(n):
        raise DataError(f"{path}: unexpected columns")
    if not body:
        raise DataError(f"{path}: no samples")
    try:
        data = np.array([[float(x) for x in r] for r in body])
    except ValueError as exc:
        raise DataError(f"{path}: malformed number") from exc
    if data.shape[1] != len(header) or not np.all(np.isfinite(data[:, : 2 + n])):
        raise DataError(f"{path}: ragged or non-finite rows")
    table = DiagramTable(n)
    ids = data[:, 0].astype(int)
    for bid in dict.fromkeys(ids.tolist()):
        d = data[ids == bid]
        zs = np.column_stack([d[:, 2 : 2 + n], d[:, 1]])
        table.branches.append(
            {"zs": zs, "det": d[:, 2 + n], "measure": d[:, 3 + n], "ds": d[:, 4 + n], "tangent": d[:, 5 + n :]}
        )
    return table
