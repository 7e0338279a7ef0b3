"""Model definition and exact derivatives of the right-hand side F(u, p; theta)."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dual
from .errors import ModelEvaluationError, UsageError
from .linalg import det_lu

__all__ = [
    "Transform",
    "Derivative",
    "ModelDef",
    "StatePoint",
    "as_z",
    "effective_params",
    "evaluate",
    "evaluate_batch",
    "residual_jacobian",
    "Evaluator",
    "bmat",
    "differentiate",
    "jet",
]

LN10 = math.log(10.0)


class Transform(str, enum.Enum):
    IDENTITY = "identity"
    LOG10 = "log10"


class Derivative(enum.Enum):
    """Derivative blocks available from :func:`differentiate`."""

    DF_DU = "dF/du"  # N x N
    DF_DZ = "dF/dz"  # N x (N+1)
    DF_DTHETA = "dF/dtheta"  # N x M
    DDET_DZ = "ddet/dz"  # N+1
    DDET_DTHETA = "ddet/dtheta"  # M
    D2F_DZDZ = "d2F/dzdz"  # N x (N+1) x (N+1)
    D2F_DZDTHETA = "d2F/dzdtheta"  # N x (N+1) x M


Rhs = Callable[[Sequence, object, Sequence], Sequence]


@dataclass(frozen=True)
class ModelDef:
    """An ODE right-hand side ``du/dt = F(u, p; theta)``.

    ``rhs(u, p, theta)`` receives the state as a sequence of ``N`` components,
    the control condition ``p`` and the *effective* parameters (after
    ``param_transform``) as a sequence of ``M`` components, and returns ``N``
    components. It must only use arithmetic and the functions in
    :mod:`bifinfer.dual` so that it can be evaluated on floats, numpy
    batches and dual numbers alike.

    ``jacobian`` and ``param_jacobian`` are optional closed forms of
    ``dF/d(u, p)`` and ``dF/dtheta_eff`` used as a fast path for Newton
    solves; they must agree with the automatic derivatives.
    """

    name: str
    state_dim: int
    param_dim: int
    rhs: Rhs
    param_transform: Transform = Transform.IDENTITY
    p_window: tuple[float, float] = (-3.0, 3.0)
    u_box: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | tuple | None = None
    jacobian: Callable | None = None
    param_jacobian: Callable | None = None
    theta_ref: tuple[float, ...] | None = None
    param_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.state_dim < 1:
            raise UsageError("state_dim must be positive")
        if self.param_dim < 0:
            raise UsageError("param_dim must be non-negative")
        object.__setattr__(self, "param_transform", Transform(self.param_transform))
        lo, hi = self.p_window
        if not lo < hi:
            raise UsageError(f"empty p_window {self.p_window}")

    def box(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """State bounds used for root seeding and branch termination."""
        n = self.state_dim
        if self.u_box is None:
            return np.full(n, -10.0), np.full(n, 10.0)
        if callable(self.u_box):
            lo, hi = self.u_box(effective_params(self, theta))
        else:
            lo, hi = self.u_box
        return np.broadcast_to(np.asarray(lo, float), n).copy(), np.broadcast_to(np.asarray(hi, float), n).copy()

    def with_window(self, p_window) -> "ModelDef":
        from dataclasses import replace

        return replace(self, p_window=(float(p_window[0]), float(p_window[1])))


@dataclass(frozen=True)
class StatePoint:
    u: np.ndarray
    p: float

    @property
    def z(self) -> np.ndarray:
        return np.append(np.asarray(self.u, float), self.p)


def as_z(model: ModelDef, z) -> np.ndarray:
    if isinstance(z, StatePoint):
        z = z.z
    z = np.asarray(z, dtype=float)
    if z.shape != (model.state_dim + 1,):
        raise UsageError(f"{model.name}: expected z of length {model.state_dim + 1}, got shape {z.shape}")
    return z


def _theta(model: ModelDef, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape != (model.param_dim,):
        raise UsageError(f"{model.name}: expected {model.param_dim} parameters, got {theta.size}")
    if not np.all(np.isfinite(theta)):
        raise UsageError(f"{model.name}: non-finite parameters {theta}")
    return theta


def effective_params(model: ModelDef, theta):
    """Apply the parameter transform; works on arrays and dual numbers."""
    if model.param_transform is Transform.LOG10:
        if isinstance(theta, np.ndarray):
            return 10.0**theta
        return [10.0**t for t in theta]
    return theta


def _call(model: ModelDef, u, p, theta_eff):
    out = model.rhs(u, p, theta_eff)
    if len(out) != model.state_dim:
        raise UsageError(f"{model.name}: rhs returned {len(out)} components, expected {model.state_dim}")
    return out


def evaluate(model: ModelDef, z, theta) -> np.ndarray:
    """F(u, p; theta) at a single point."""
    z = as_z(model, z)
    theta = _theta(model, theta)
    n = model.state_dim
    eff = effective_params(model, theta)
    f = np.array([float(v) for v in _call(model, list(z[:n]), z[n], list(eff))])
    if not np.all(np.isfinite(f)):
        raise ModelEvaluationError(f"{model.name}: non-finite rhs", z=z, theta=theta)
    return f


def evaluate_batch(model: ModelDef, zs, theta) -> np.ndarray:
    """F at a batch of points ``zs`` of shape (S, N+1); returns (S, N)."""
    zs = np.asarray(zs, dtype=float)
    theta = _theta(model, theta)
    n = model.state_dim
    eff = effective_params(model, theta)
    cols = [zs[:, i] for i in range(n)]
    out = _call(model, cols, zs[:, n], list(eff))
    f = np.stack([np.broadcast_to(np.asarray(v, float), zs.shape[:1]) for v in out], axis=1)
    if not np.all(np.isfinite(f)):
        bad = int(np.argmax(~np.all(np.isfinite(f), axis=1)))
        raise ModelEvaluationError(f"{model.name}: non-finite rhs", z=zs[bad], theta=theta)
    return f


def bmat(rows) -> np.ndarray:
    """Matrix from nested rows of scalars or equal-shape arrays.

    Scalar entries broadcast, so closed-form Jacobians written with it
    evaluate at a single point ``(r, c)`` or a batch ``(r, c, S)``.
    """
    try:
        return np.array(rows, dtype=float)
    except ValueError:
        shape = np.broadcast_shapes(*(np.shape(x) for row in rows for x in row))
        return np.array([[np.broadcast_to(x, shape) for x in row] for row in rows], dtype=float)


class Evaluator:
    """F and dF/dz for one fixed theta; the Newton-solver hot path.

    Uses the model's closed-form Jacobian when it has one, forward-mode
    differentiation otherwise. No argument validation.
    """

    __slots__ = ("model", "theta", "eff", "n", "closed")

    def __init__(self, model: ModelDef, theta):
        self.model = model
        self.theta = np.asarray(theta, dtype=float)
        eff = effective_params(model, self.theta)
        self.eff = np.asarray(eff, dtype=float)
        self.n = model.state_dim
        self.closed = model.jacobian is not None

    def fj(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.n
        if self.closed:
            eff = self.eff
            f = np.array(self.model.rhs(z[:n], z[n], eff), dtype=float)
            jac = np.asarray(self.model.jacobian(z[:n], z[n], eff), dtype=float)
        else:
            f, jac = self._ad(z[None, :])
            f, jac = f[0], jac[0]
        if not (np.isfinite(f).all() and np.isfinite(jac).all()):
            raise ModelEvaluationError(f"{self.model.name}: non-finite rhs or Jacobian", z=z, theta=self.theta)
        return f, jac

    def fj_batch(self, zs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched F (S, N) and dF/dz (S, N, N+1); non-finite rows are left for the caller."""
        n = self.n
        if self.closed:
            cols = [zs[:, i] for i in range(n)]
            f = np.stack([np.broadcast_to(np.asarray(v, float), zs.shape[:1]) for v in self.model.rhs(cols, zs[:, n], self.eff)], 1)
            jac = np.asarray(self.model.jacobian(cols, zs[:, n], self.eff), dtype=float)
            if jac.ndim == 2:
                jac = np.broadcast_to(jac[:, :, None], jac.shape + zs.shape[:1])
            return f, np.ascontiguousarray(np.moveaxis(jac, -1, 0))
        return self._ad(zs)

    def _ad(self, zs):
        n = self.n
        tag = dual.new_tag()
        vars_ = dual.seed([zs[:, i] for i in range(n + 1)], tag, np.eye(n + 1))
        out = _call(self.model, vars_[:n], vars_[n], list(self.eff))
        s = zs.shape[0]
        f = np.empty((s, n))
        jac = np.zeros((s, n, n + 1))
        for i, v in enumerate(out):
            if isinstance(v, dual.Dual):
                f[:, i] = v.val
                jac[:, i, :] = np.asarray(v.der).T
            else:
                f[:, i] = v
        return f, jac


def residual_jacobian(model: ModelDef, z: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``F`` and ``dF/dz`` at one point."""
    return Evaluator(model, theta).fj(np.asarray(z, dtype=float))


def jet(model: ModelDef, zs: np.ndarray, theta: np.ndarray, levels: Sequence[np.ndarray]):
    """Evaluate F on a batch with nested forward perturbations.

    ``zs`` has shape (S, N+1). Each entry of ``levels`` is a direction array
    of shape (K, N+1+M) shared by all samples, or (K, N+1+M, S) per sample,
    over the joint variable ``(u, p, theta_raw)``. Levels are nested in the
    given order, the first being innermost.

    Returns the stacked output (shape (N, S), a :class:`Dual` when any level
    is given) and the list of tags, one per level.
    """
    n, m = model.state_dim, model.param_dim
    s = zs.shape[0]
    variables: list = [zs[:, i] for i in range(n + 1)] + [np.full(s, t) for t in theta]
    tags = []
    for dirs in levels:
        dirs = np.asarray(dirs, dtype=float)
        tag = dual.new_tag()
        tags.append(tag)
        if dirs.shape[0] == 0:
            continue
        active = np.flatnonzero(np.any(dirs.reshape(dirs.shape[0], n + 1 + m, -1) != 0, axis=(0, 2)))
        seeded = dual.seed([variables[i] for i in active], tag, dirs[:, active])
        for i, v in zip(active, seeded):
            variables[i] = v
    u, p, th = variables[:n], variables[n], variables[n + 1 :]
    out = _call(model, u, p, effective_params(model, th))
    return dual.stack(out), tags


def _directions(n_vars: int, idx: Sequence[int]) -> np.ndarray:
    d = np.zeros((len(idx), n_vars))
    d[np.arange(len(idx)), idx] = 1.0
    return d


def differentiate(model: ModelDef, z, theta, which: Derivative, method: str = "auto") -> np.ndarray:
    """Exact derivative block of F at a single point.

    ``method`` is ``"ad"`` (nested forward mode), ``"closed"`` (model-supplied
    closed forms, first-order blocks only) or ``"auto"``.
    """
    if not isinstance(which, Derivative):
        raise UsageError(f"unsupported derivative selector {which!r}")
    z = as_z(model, z)
    theta = _theta(model, theta)
    n, m = model.state_dim, model.param_dim
    nv = n + 1 + m
    zs = z[None, :]
    use_closed = method == "closed" or (method == "auto" and model.jacobian is not None)
    if method not in ("auto", "ad", "closed"):
        raise UsageError(f"unknown method {method!r}")

    if which in (Derivative.DF_DU, Derivative.DF_DZ) and use_closed and model.jacobian is not None:
        jac = np.asarray(model.jacobian(z[:n], z[n], effective_params(model, theta)), float)
        out = jac[:, :n] if which is Derivative.DF_DU else jac
    elif which is Derivative.DF_DTHETA and use_closed and model.param_jacobian is not None:
        eff = effective_params(model, theta)
        out = np.asarray(model.param_jacobian(z[:n], z[n], eff), float).reshape(n, m)
        if model.param_transform is Transform.LOG10:
            out = out * (eff * LN10)[None, :]
    elif method == "closed":
        raise UsageError(f"{model.name}: no closed form for {which.value}")
    elif which in (Derivative.DF_DU, Derivative.DF_DZ, Derivative.DF_DTHETA):
        f, (ta,) = jet(model, zs, theta, [np.eye(nv)])
        full = dual.partial(f, ta, nv)[..., 0].T  # (N, nv)
        out = {Derivative.DF_DU: full[:, :n], Derivative.DF_DZ: full[:, : n + 1]}.get(which, full[:, n + 1 :])
    elif which in (Derivative.DDET_DZ, Derivative.DDET_DTHETA):
        idx = list(range(n + 1)) if which is Derivative.DDET_DZ else list(range(n + 1, nv))
        f, (ta, tb) = jet(model, zs, theta, [_directions(nv, range(n)), _directions(nv, idx)])
        a = dual.partial(f, ta, n)  # (N_col, N_row, S) as duals in tb
        d = det_lu(a)
        out = dual.partial(d, tb, len(idx))[:, 0]
    else:
        second = list(range(n + 1)) if which is Derivative.D2F_DZDZ else list(range(n + 1, nv))
        f, (ta, tb) = jet(model, zs, theta, [_directions(nv, range(n + 1)), _directions(nv, second)])
        h = dual.partial(dual.partial(f, ta, n + 1), tb, len(second))  # (K2, N+1, N, S)
        out = np.transpose(np.asarray(h)[..., 0], (2, 1, 0))
    out = np.array(out, dtype=float)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(f"{model.name}: non-finite derivative {which.value}", z=z, theta=theta)
    return out
