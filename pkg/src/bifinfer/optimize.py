"""Gradient descent and ADAM over model parameters, with full trajectory records."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .continuation import TraceSettings, trace_branches
from .cost import CostConfig, TargetSet, grad_loss
from .detection import predictions
from .errors import BifurcationError, UsageError
from .model import ModelDef

__all__ = [
    "OptimizerConfig",
    "OptState",
    "RunRecord",
    "init_params",
    "sample_init",
    "basin_init",
    "step",
    "run_inference",
    "run_batch",
    "batch_summary",
]

TERMINATIONS = ("converged", "max_steps", "failed_trace")


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "gd"
    learning_rate: float = 0.01
    max_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tol_E: float = 1e-2
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("gd", "adam"):
            raise UsageError(f"unknown optimizer {self.method!r}")
        if not self.learning_rate > 0:
            raise UsageError("learning rate must be positive")
        if self.max_steps < 1:
            raise UsageError("max_steps must be at least 1")
        if self.patience < 1:
            raise UsageError("patience must be at least 1")


@dataclass
class OptState:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def start(cls, theta) -> "OptState":
        theta = np.array(theta, dtype=float)
        return cls(theta, np.zeros_like(theta), np.zeros_like(theta), 0)


@dataclass
class RunRecord:
    seed: int
    thetas: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # per-iterate {L, E, psi, n_pred}
    termination: str = "max_steps"
    converged_step: int | None = None
    wall_time: float = 0.0
    final_predictions: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.termination == "converged"

    @property
    def final_theta(self) -> np.ndarray:
        return np.asarray(self.thetas[-1], dtype=float)

    @property
    def final_E(self):
        return self.steps[-1]["E"] if self.steps else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thetas"] = [[float(x) for x in t] for t in self.thetas]
        d["converged"] = self.converged
        return d


def init_params(m: int, seed: int, transform=None) -> np.ndarray:
    """Standard-normal start in raw (pre-transform) coordinates from a Philox stream."""
    if m < 0:
        raise UsageError("parameter count must be non-negative")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    return rng.standard_normal(m)


def sample_init(m: int, seed: int, accept: Callable[[np.ndarray], bool] | None = None, max_tries: int = 100000) -> np.ndarray:
    """First draw from the seed's stream that satisfies ``accept``."""
    rng = np.random.Generator(np.random.Philox(int(seed)))
    for _ in range(max_tries):
        theta = rng.standard_normal(m)
        if accept is None or accept(theta):
            return theta
    raise UsageError("no initial parameters satisfied the acceptance rule")


def basin_init(model: ModelDef, n_targets: int, radius: float | None = None,
               trace_settings: TraceSettings | None = None) -> Callable[[int], np.ndarray]:
    """Initializer drawing standard-normal starts until one has ``n_targets`` predictions.

    With ``radius`` set, draws with a larger Euclidean norm are also rejected.
    """
    settings = trace_settings or TraceSettings()

    def accept(theta):
        if radius is not None and np.linalg.norm(theta) > radius:
            return False
        try:
            diagram = trace_branches(model, theta, settings)
            return len(predictions(model, theta, diagram, sensitivities=False)) == n_targets
        except (BifurcationError, np.linalg.LinAlgError, FloatingPointError):
            return False

    def draw(seed: int) -> np.ndarray:
        return sample_init(model.param_dim, seed, accept, max_tries=1000)

    return draw


def step(state: OptState, grad, cfg: OptimizerConfig) -> OptState:
    """One optimizer update; raises on a non-finite gradient."""
    g = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    if cfg.method == "gd":
        return OptState(state.theta - cfg.learning_rate * g, state.m, state.v, state.t + 1)
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    mhat = m / (1.0 - cfg.beta1**t)
    vhat = v / (1.0 - cfg.beta2**t)
    return OptState(state.theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps), m, v, t)


def run_inference(model: ModelDef, targets, opt_cfg: OptimizerConfig, cost_cfg: CostConfig | None = None,
                  trace_settings: TraceSettings | None = None, theta0=None) -> RunRecord:
    """Trace, detect, differentiate and step until converged or out of steps."""
    cost_cfg = cost_cfg or CostConfig()
    trace_settings = trace_settings or TraceSettings()
    if not isinstance(targets, TargetSet):
        targets = TargetSet(targets, model.p_window)
    theta = init_params(model.param_dim, opt_cfg.seed) if theta0 is None else np.array(theta0, dtype=float)
    state = OptState.start(theta)
    rec = RunRecord(seed=opt_cfg.seed)
    streak = 0
    t0 = time.perf_counter()
    for k in range(opt_cfg.max_steps + 1):
        rec.thetas.append(state.theta.copy())
        try:
            diagram = trace_branches(model, state.theta, trace_settings)
            if diagram.empty:
                rec.termination = "failed_trace"
                rec.flags.append({"step": k, "reason": "empty_diagram"})
                break
            preds = predictions(model, state.theta, diagram, cost_cfg.eps_slope, cost_cfg.delta_merge)
            report = grad_loss(model, state.theta, diagram, preds, targets, cost_cfg)
        except (BifurcationError, np.linalg.LinAlgError, FloatingPointError) as exc:
            rec.termination = "failed_trace"
            rec.flags.append({"step": k, "reason": type(exc).__name__, "message": str(exc)})
            break
        rec.steps.append({"L": report.L, "E": report.E, "psi": report.psi, "n_pred": report.n_pred})
        rec.final_predictions = [pt.to_dict() for pt in preds.points]
        ok = report.E is not None and report.E < opt_cfg.tol_E and report.n_pred == len(targets)
        streak = streak + 1 if ok else 0
        if streak >= opt_cfg.patience:
            rec.termination = "converged"
            rec.converged_step = k - opt_cfg.patience + 1
            break
        if k == opt_cfg.max_steps:
            rec.termination = "max_steps"
            break
        try:
            state = step(state, report.grad, opt_cfg)
        except FloatingPointError:
            rec.termination = "failed_trace"
            rec.flags.append({"step": k, "reason": "nonfinite_gradient"})
            break
    rec.wall_time = time.perf_counter() - t0
    return rec


# -- batches -------------------------------------------------------------------------------

_BATCH: dict = {}


def _batch_worker(seed: int) -> RunRecord:
    b = _BATCH
    theta0 = None
    if b["init"] is not None:
        theta0 = b["init"](seed)
    cfg = replace(b["opt"], seed=seed)
    return run_inference(b["model"], b["targets"], cfg, b["cost"], b["trace"], theta0=theta0)


def run_batch(model: ModelDef, targets, n_runs: int, base_seed: int = 0, opt_cfg: OptimizerConfig | None = None,
              cost_cfg: CostConfig | None = None, trace_settings: TraceSettings | None = None, jobs: int = 1,
              init: Callable[[int], np.ndarray] | None = None) -> list[RunRecord]:
    """Independent runs with seeds ``base_seed .. base_seed + n_runs - 1``, ordered by seed.

    ``init(seed)`` overrides the standard-normal start. With ``jobs > 1`` the
    runs execute in forked worker processes; records are identical either way.
    """
    if n_runs < 1:
        raise UsageError("n_runs must be at least 1")
    if not isinstance(targets, TargetSet):
        targets = TargetSet(targets, model.p_window)
    _BATCH.clear()
    _BATCH.update(model=model, targets=targets, opt=opt_cfg or OptimizerConfig(), cost=cost_cfg or CostConfig(),
                  trace=trace_settings or TraceSettings(), init=init)
    seeds = list(range(base_seed, base_seed + n_runs))
    if jobs <= 1:
        return [_batch_worker(s) for s in seeds]
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    with ctx.Pool(processes=jobs) as pool:
        return pool.map(_batch_worker, seeds, chunksize=1)


def batch_summary(records: list[RunRecord], cluster: Callable[[np.ndarray], int] | None = None) -> dict:
    """Convergence fraction and, when ``cluster`` is given, cluster counts of converged runs."""
    n = len(records)
    conv = [r for r in records if r.converged]
    out = {"runs": n, "converged": len(conv), "fraction": len(conv) / n if n else math.nan}
    if cluster is not None:
        ids = [cluster(r.final_theta) for r in conv]
        out["clusters"] = {str(c): ids.count(c) for c in sorted(set(ids))}
    return out
