"""Supervised error, semi-supervised loss and its gradient."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detection import DELTA_MERGE, EPS_SLOPE, PredictionSet
from .errors import EmptyPredictionError, UndefinedMeasureError, UsageError
from .geometry import EPS_DEN, grad_total_measure, total_measure

__all__ = ["TargetSet", "CostConfig", "CostReport", "supervised_error", "grad_supervised_error", "loss", "grad_loss"]

PAIR_ZERO = 1e-14


@dataclass(frozen=True)
class TargetSet:
    """Strictly increasing control-condition values where bifurcations are wanted."""

    values: tuple

    def __init__(self, values, p_window=None):
        vals = tuple(float(v) for v in np.atleast_1d(np.asarray(values, dtype=float)))
        if not vals:
            raise UsageError("target set must not be empty")
        if not all(math.isfinite(v) for v in vals):
            raise UsageError("targets must be finite")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise UsageError("targets must be strictly increasing")
        if p_window is not None:
            lo, hi = p_window
            if vals[0] < lo or vals[-1] > hi:
                raise UsageError(f"targets {vals} fall outside the p-window [{lo}, {hi}]")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.values)


@dataclass(frozen=True)
class CostConfig:
    lam: float = 1.0
    eps_den: float = EPS_DEN
    eps_slope: float = EPS_SLOPE
    delta_merge: float = DELTA_MERGE

    def __post_init__(self):
        if not self.lam >= 0:
            raise UsageError("lambda must be non-negative")


@dataclass(frozen=True)
class CostReport:
    L: float
    E: float | None
    psi: float
    n_pred: int
    n_targets: int
    grad: np.ndarray | None = None
    terms: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"L": self.L, "E": self.E, "psi": self.psi, "n_pred": self.n_pred}


def _p_values(preds) -> np.ndarray:
    if isinstance(preds, PredictionSet):
        return preds.p_values
    return np.asarray([getattr(x, "p", x) for x in preds], dtype=float)


def _targets(targets) -> np.ndarray:
    return targets.array if isinstance(targets, TargetSet) else np.asarray(targets, dtype=float)


def supervised_error(preds, targets) -> float:
    """Mean over targets of the geometric mean distance to all predictions."""
    p = _p_values(preds)
    d = _targets(targets)
    if p.size == 0:
        raise EmptyPredictionError("supervised error needs at least one prediction")
    dist = np.abs(p[None, :] - d[:, None])  # (|D|, |P|)
    return float(np.mean(np.prod(dist ** (1.0 / p.size), axis=1)))


def grad_supervised_error(preds: PredictionSet, targets) -> np.ndarray:
    """Exact gradient of :func:`supervised_error` given each prediction's dp/dtheta."""
    p = preds.p_values
    d = _targets(targets)
    if p.size == 0:
        raise EmptyPredictionError("supervised error needs at least one prediction")
    sens = np.array([pt.dp_dtheta for pt in preds.points], dtype=float)  # (|P|, M)
    diff = p[None, :] - d[:, None]
    dist = np.abs(diff)
    prod = np.prod(dist ** (1.0 / p.size), axis=1)  # (|D|,)
    safe = dist >= PAIR_ZERO
    inv = np.where(safe, np.sign(diff) / np.where(safe, dist, 1.0), 0.0)
    weights = prod[:, None] * inv  # (|D|, |P|)
    return weights.sum(axis=0) @ sens / (d.size * p.size)


def _psi_or_fail(diagram) -> float:
    try:
        return total_measure(diagram)
    except UndefinedMeasureError as exc:
        raise UndefinedMeasureError("loss undefined on an empty diagram; re-seed the parameters") from exc


def loss(model, theta, diagram, preds: PredictionSet, targets, cfg: CostConfig | None = None) -> CostReport:
    """Semi-supervised loss value (no gradient)."""
    return _assemble(model, theta, diagram, preds, targets, cfg or CostConfig(), with_grad=False)


def grad_loss(model, theta, diagram, preds: PredictionSet, targets, cfg: CostConfig | None = None) -> CostReport:
    """Loss value and its theta-gradient; the count |P| is treated as constant."""
    return _assemble(model, theta, diagram, preds, targets, cfg or CostConfig(), with_grad=True)


def _assemble(model, theta, diagram, preds, targets, cfg, with_grad):
    d = _targets(targets)
    n_p, n_d = len(preds), d.size
    psi = _psi_or_fail(diagram)
    m = np.asarray(theta).size
    coef = -n_d * cfg.lam if n_p == 0 else (n_p - n_d) * cfg.lam
    e = supervised_error(preds, d) if n_p else None
    log_term = coef * math.log(psi) if coef != 0 else 0.0
    value = log_term + (e if e is not None else 0.0)
    terms = {"unsupervised": log_term, "supervised": e, "coef": coef}
    grad = None
    if with_grad:
        grad = np.zeros(m)
        if coef != 0:
            mg = grad_total_measure(model, theta, diagram)
            grad_psi = mg.grad
            grad = grad + coef * grad_psi / psi
            terms["grad_psi"] = grad_psi
        if n_p:
            ge = grad_supervised_error(preds, d)
            grad = grad + ge
            terms["grad_E"] = ge
    return CostReport(value, e, psi, n_p, n_d, grad, terms)
