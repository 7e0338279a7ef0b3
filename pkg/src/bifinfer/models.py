"""Built-in model catalog with closed-form derivatives and analytic oracles."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from . import dual
from .errors import OracleDomainError, UsageError
from .model import ModelDef, Transform, bmat, effective_params

__all__ = [
    "saddle_node",
    "pitchfork",
    "toggle_switch",
    "scaling_chain",
    "degenerate_pair",
    "linear",
    "get_model",
    "MODEL_NAMES",
    "toggle_steady_relation",
    "toggle_cluster",
    "saddle_node_folds",
    "pitchfork_fold",
]


# -- minimal models -----------------------------------------------------------


def _saddle_rhs(u, p, th):
    return [p + th[0] * u[0] + th[1] * u[0] ** 3]


def _saddle_jac(u, p, th):
    return bmat([[th[0] + 3.0 * th[1] * u[0] ** 2, 1.0]])


def _saddle_pjac(u, p, th):
    return bmat([[u[0], u[0] ** 3]])


def saddle_node(p_window=(-3.0, 3.0)) -> ModelDef:
    """``F = p + theta1 u + theta2 u^3``; two folds when theta1 > 0 > theta2."""
    return ModelDef(
        name="saddle-node",
        state_dim=1,
        param_dim=2,
        rhs=_saddle_rhs,
        p_window=tuple(p_window),
        jacobian=_saddle_jac,
        param_jacobian=_saddle_pjac,
        theta_ref=(2.5, -1.0),
        param_names=("theta1", "theta2"),
    )


def _pitchfork_rhs(u, p, th):
    return [th[0] + p * u[0] + th[1] * u[0] ** 3]


def _pitchfork_jac(u, p, th):
    return bmat([[p + 3.0 * th[1] * u[0] ** 2, u[0]]])


def _pitchfork_pjac(u, p, th):
    return bmat([[1.0, u[0] ** 3]])


def pitchfork(p_window=(-2.0, 3.0)) -> ModelDef:
    """``F = theta1 + p u + theta2 u^3``; an imperfect pitchfork for theta1 != 0."""
    return ModelDef(
        name="pitchfork",
        state_dim=1,
        param_dim=2,
        rhs=_pitchfork_rhs,
        p_window=tuple(p_window),
        jacobian=_pitchfork_jac,
        param_jacobian=_pitchfork_pjac,
        theta_ref=(0.5, -1.0),
        param_names=("theta1", "theta2"),
    )


def _linear_rhs(u, p, th):
    return [p - u[0]]


def linear(p_window=(-1.0, 1.0)) -> ModelDef:
    """``F = p - u``: a single straight branch that never bifurcates."""
    return ModelDef(
        name="linear",
        state_dim=1,
        param_dim=0,
        rhs=_linear_rhs,
        p_window=tuple(p_window),
        jacobian=lambda u, p, th: np.array([[-1.0, 1.0]]),
        param_jacobian=lambda u, p, th: np.zeros((1, 0)),
        theta_ref=(),
    )


def _pair_rhs(u, p, th):
    return [p + th[0] * u[0] + th[1] * u[0] ** 3, p + th[0] * u[1] + th[1] * u[1] ** 3]


def _pair_jac(u, p, th):
    return bmat(
        [
            [th[0] + 3.0 * th[1] * u[0] ** 2, 0.0, 1.0],
            [0.0, th[0] + 3.0 * th[1] * u[1] ** 2, 1.0],
        ]
    )


def _pair_pjac(u, p, th):
    return bmat([[u[0], u[0] ** 3], [u[1], u[1] ** 3]])


def degenerate_pair(p_window=(-3.0, 3.0)) -> ModelDef:
    """Two uncoupled copies of the saddle-node model sharing theta.

    On the diagonal ``u1 = u2`` both eigenvalues vanish together at each
    fold, so the determinant touches zero quadratically there.
    """
    return ModelDef(
        name="degenerate-pair",
        state_dim=2,
        param_dim=2,
        rhs=_pair_rhs,
        p_window=tuple(p_window),
        jacobian=_pair_jac,
        param_jacobian=_pair_pjac,
        theta_ref=(2.5, -1.0),
        param_names=("theta1", "theta2"),
    )


# -- genetic toggle switch ----------------------------------------------------


def _hill(x2, a):
    return (a + x2) / (1.0 + x2)


def _toggle_rhs(u, p, th):
    a1, a2, mu1, mu2, k = th
    x = p * u[1]
    y = k * u[0]
    return [_hill(x * x, a1) - mu1 * u[0], _hill(y * y, a2) - mu2 * u[1]]


def _dhill(x, a):
    return 2.0 * x * (1.0 - a) / (1.0 + x * x) ** 2


def _toggle_jac(u, p, th):
    a1, a2, mu1, mu2, k = th
    x = p * u[1]
    y = k * u[0]
    h1 = _dhill(x, a1)
    h2 = _dhill(y, a2)
    return bmat([[-mu1, h1 * p, h1 * u[1]], [h2 * k, -mu2, 0.0]])


def _toggle_pjac(u, p, th):
    a1, a2, mu1, mu2, k = th
    x = p * u[1]
    y = k * u[0]
    return bmat(
        [
            [1.0 / (1.0 + x * x), 0.0, -u[0], 0.0, 0.0],
            [0.0, 1.0 / (1.0 + y * y), 0.0, -u[1], _dhill(y, a2) * u[0]],
        ]
    )


def _toggle_box(th):
    a1, a2, mu1, mu2, k = th
    # steady states satisfy min(a,1) <= mu u <= max(a,1)
    hi = np.array([max(a1, 1.0) / mu1, max(a2, 1.0) / mu2])
    return np.zeros(2), 2.0 * hi


# log10 coordinates of (a1, a2, mu1, mu2, k): a1 = a2 = 20, mu = k = 1,
# bistable for p in roughly [0.87, 1.11]
TOGGLE_REF = (math.log10(20.0), math.log10(20.0), 0.0, 0.0, 0.0)


def toggle_switch(p_window=(0.0, 10.0)) -> ModelDef:
    """Two mutually regulating genes with Hill coefficient 2.

    Parameters are ``(a1, a2, mu1, mu2, k)`` in log10 coordinates; the
    sensitivity of the first production term is the control condition.
    """
    return ModelDef(
        name="toggle",
        state_dim=2,
        param_dim=5,
        rhs=_toggle_rhs,
        param_transform=Transform.LOG10,
        p_window=tuple(p_window),
        u_box=_toggle_box,
        jacobian=_toggle_jac,
        param_jacobian=_toggle_pjac,
        theta_ref=TOGGLE_REF,
        param_names=("a1", "a2", "mu1", "mu2", "k"),
    )


def toggle_steady_relation(u2: float, p: float, theta) -> float:
    """Ratio ``k / mu1`` implied by a toggle-switch steady state.

    Substituting the first steady-state equation into the second leaves a
    relation between ``u' = mu2 u2``, ``p`` and the parameters in which
    ``k`` and ``mu1`` only appear as their ratio. Valid for ``u'`` strictly
    between 1 and ``a2``; ``theta`` is in log10 coordinates.
    """
    a1, a2, mu1, mu2, k = 10.0 ** np.asarray(theta, dtype=float)
    up = u2 * mu2
    if not (min(1.0, a2) < up < max(1.0, a2)):
        raise OracleDomainError(f"u' = {up} outside ({min(1.0, a2)}, {max(1.0, a2)})")
    q = (p / mu2 * up) ** 2
    return (1.0 + q) * math.sqrt((a2 - up) / (up - 1.0)) / (a1 + q)


def toggle_cluster(theta) -> int:
    """1 for mutual activation (a1 < 1, a2 < 1), 2 for mutual inhibition, 0 otherwise."""
    a1, a2 = float(theta[0]), float(theta[1])  # log10 coordinates: sign of log a
    if a1 < 0 and a2 < 0:
        return 1
    if a1 > 0 and a2 > 0:
        return 2
    return 0


# -- scaling benchmark --------------------------------------------------------


def _chain_slices(n: int, m: int) -> tuple[tuple[int, ...], ...]:
    """Parameter indices summed into mu_n for states 2..N.

    The parameters after the first are split into contiguous, nearly equal
    slices, one per downstream state. With fewer parameters than downstream
    states each state takes a single parameter, cycling through them; with
    a single parameter every state reuses it.
    """
    if n == 1:
        return ()
    rest = list(range(1, m)) or [0]
    if len(rest) >= n - 1:
        return tuple(tuple(int(i) for i in s) for s in np.array_split(rest, n - 1))
    return tuple((rest[j % len(rest)],) for j in range(n - 1))


def scaling_chain(n: int, m: int, p_window=(0.0, 3.0)) -> ModelDef:
    """Chain model extensible in both state and parameter count.

    ``u1' = sin^2 p - (theta1 sin^2 p + 1) u1`` and
    ``un' = u(n-1) - (mu_n^2 + 1) un`` with ``mu_n`` a sum of parameters
    (see :func:`_chain_slices`). Downstream states are stable and linearly
    slaved to ``u1``.
    """
    if n < 1 or m < 1:
        raise UsageError("scaling_chain needs N >= 1 and M >= 1")
    slices = _chain_slices(n, m)

    def mus(th):
        out = []
        for sl in slices:
            acc = th[sl[0]]
            for j in sl[1:]:
                acc = acc + th[j]
            out.append(acc)
        return out

    def rhs(u, p, th):
        s = dual.sin(p)
        s2 = s * s
        f = [s2 - (th[0] * s2 + 1.0) * u[0]]
        for i, mu in enumerate(mus(th), start=1):
            f.append(u[i - 1] - (mu * mu + 1.0) * u[i])
        return f

    def jac(u, p, th):
        s, c = np.sin(p), np.cos(p)
        j = np.zeros((n, n + 1) + np.shape(p))
        j[0, 0] = -(th[0] * s * s + 1.0)
        j[0, n] = 2.0 * s * c * (1.0 - th[0] * u[0])
        for i, mu in enumerate(mus(th), start=1):
            j[i, i - 1] = 1.0
            j[i, i] = -(mu * mu + 1.0)
        return j

    def pjac(u, p, th):
        s = np.sin(p)
        j = np.zeros((n, m) + np.shape(p))
        j[0, 0] = -s * s * u[0]
        for i, (mu, sl) in enumerate(zip(mus(th), slices), start=1):
            for k in sl:
                j[i, k] += -2.0 * mu * u[i]
        return j

    return ModelDef(
        name=f"scaling-chain-{n}x{m}",
        state_dim=n,
        param_dim=m,
        rhs=rhs,
        p_window=tuple(p_window),
        jacobian=jac,
        param_jacobian=pjac,
        theta_ref=tuple([0.5] * m),
        param_names=tuple(f"theta{i + 1}" for i in range(m)),
        meta={"slices": slices},
    )


# -- closed-form oracles --------------------------------------------------------


def saddle_node_folds(theta) -> list[tuple[float, float]]:
    """Fold points ``(u*, p*)`` of the saddle-node model, sorted by p."""
    t1, t2 = theta
    if not (t1 > 0 > t2 or t1 < 0 < t2):
        return []
    us = math.sqrt(t1 / (3.0 * abs(t2)))
    pts = [(u, -(t1 * u + t2 * u**3)) for u in (us, -us)]
    return sorted(pts, key=lambda z: z[1])


def pitchfork_fold(theta) -> tuple[float, float]:
    """Fold ``(u*, p*)`` of the imperfect pitchfork with theta2 = -1 and theta1 > 0."""
    t1, t2 = theta
    u = -((t1 / (-2.0 * t2)) ** (1.0 / 3.0))
    return u, -3.0 * t2 * u * u


# -- catalog ----------------------------------------------------------------------

MODEL_NAMES = ("saddle-node", "pitchfork", "toggle", "scaling-chain", "degenerate-pair", "linear")


@lru_cache(maxsize=None)
def _cached(name: str, n: int, m: int) -> ModelDef:
    if name in ("saddle-node", "saddle_node", "saddle"):
        return saddle_node()
    if name == "pitchfork":
        return pitchfork()
    if name in ("toggle", "toggle-switch", "toggle_switch"):
        return toggle_switch()
    if name in ("degenerate-pair", "degenerate_pair"):
        return degenerate_pair()
    if name == "linear":
        return linear()
    if name in ("scaling-chain", "scaling_chain"):
        return scaling_chain(n, m)
    raise UsageError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")


def get_model(name: str, states: int = 2, params: int = 4, p_window=None) -> ModelDef:
    """Look up a built-in model by name; ``states``/``params`` size the scaling chain."""
    model = _cached(name, int(states), int(params))
    if p_window is not None:
        model = model.with_window(p_window)
    return model


def reference_theta(model: ModelDef) -> np.ndarray:
    if model.theta_ref is None:
        raise UsageError(f"{model.name} has no reference parameters")
    return np.asarray(model.theta_ref, dtype=float)


def effective(model: ModelDef, theta) -> np.ndarray:
    return np.asarray(effective_params(model, np.asarray(theta, float)), float)
