"""End-to-end acceptance criteria.

Every criterion records one PASS/FAIL line (shown in pytest's terminal
summary, or printed directly when this file is run as a script) and then
asserts. Runtime budgets are part of each criterion.
"""
import math
import sys
import time

import numpy as np
import pytest

from bifinfer import cli, models
from bifinfer.continuation import TraceSettings, trace_branches
from bifinfer.cost import grad_loss, loss
from bifinfer.detection import grad_bifurcation, predictions, refine_bifurcation
from bifinfer.errors import DegenerateBifurcationError
from bifinfer.geometry import (
    deformation_field,
    grad_total_measure,
    measure_from,
    tangent_field,
    total_measure,
)
from bifinfer.model import Derivative, differentiate
from bifinfer.optimize import OptimizerConfig, basin_init, batch_summary, run_batch, run_inference

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, tuple[bool, str]] = {}

SADDLE = models.saddle_node()
PITCH = models.pitchfork()
TOGGLE = models.toggle_switch()
TH_S = np.array([2.5, -1.0])
TH_P = np.array([0.5, -1.0])
TH_T = np.array(models.TOGGLE_REF)


def record(n, ok, detail, elapsed, budget):
    in_time = elapsed < budget
    ok = bool(ok and in_time)
    line = f"{detail}; {elapsed:.1f}s (budget {budget:.0f}s{'' if in_time else ', exceeded'})"
    RESULTS[n] = (ok, line)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {line}")
    assert ok, line


def _pipeline(model, theta, settings=None):
    d = trace_branches(model, theta, settings)
    return d, predictions(model, theta, d, sensitivities=False)


def _fd(fun, theta, j, h):
    tp, tm = np.array(theta, float), np.array(theta, float)
    tp[j] += h
    tm[j] -= h
    return fun(tp), fun(tm)


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_1_closed_form_folds():
    t0 = time.perf_counter()
    ps = predictions(SADDLE, TH_S, trace_branches(SADDLE, TH_S))
    pp = predictions(PITCH, TH_P, trace_branches(PITCH, TH_P))
    sp = np.sort(ps.p_values)
    ok = len(ps) == 2 and np.all(np.abs(sp - [-1.521452, 1.521452]) < 1e-4)
    ok &= len(pp) == 1 and abs(pp.points[0].p - 1.190551) < 1e-4 and abs(pp.points[0].u[0] + 0.629961) < 1e-4
    detail = f"saddle p={np.round(sp, 7).tolist()}, pitchfork (p,u)=({pp.points[0].p:.7f}, {pp.points[0].u[0]:.7f})"
    record(1, ok, detail, time.perf_counter() - t0, 5)


# -- 2 ---------------------------------------------------------------------------------

SENS_MODELS = [
    (SADDLE, TH_S),
    (PITCH, TH_P),
    (TOGGLE, TH_T),
    (models.degenerate_pair(), TH_S),
    (models.scaling_chain(3, 4), np.full(4, 0.5)),
    (models.linear(), np.zeros(0)),
]


def test_criterion_2_sensitivities():
    t0 = time.perf_counter()
    bp = refine_bifurcation(SADDLE, TH_S, [0.9, -1.5])
    g = grad_bifurcation(SADDLE, TH_S, bp)
    ok = bool(np.all(np.abs(g - [-0.912871, -0.760726]) < 1e-6))
    worst = 0.0
    h = 1e-5
    for model, theta in SENS_MODELS:
        d = trace_branches(model, theta)
        ps = predictions(model, theta, d)
        order = np.argsort(ps.p_values)
        sens = np.array([ps.points[k].dp_dtheta for k in order]).reshape(len(ps), theta.size)
        for j in range(theta.size):
            fp, fm = _fd(lambda t: np.sort(_pipeline(model, t)[1].p_values), theta, j, h)
            if not (fp.size == fm.size == len(ps)):
                ok = False
                continue
            if len(ps):
                worst = max(worst, float(np.max(np.abs((fp - fm) / (2 * h) - sens[:, j]))))
    ok &= worst < 1e-4
    record(2, ok, f"saddle dp/dtheta={np.round(g, 7).tolist()}, worst FD gap {worst:.2e}", time.perf_counter() - t0, 30)


# -- 3 ---------------------------------------------------------------------------------


def test_criterion_3_measure_gradient():
    t0 = time.perf_counter()
    h = 1e-4
    worst = 0.0
    for model, theta in [(SADDLE, TH_S), (PITCH, TH_P), (TOGGLE, TH_T)]:
        g = grad_total_measure(model, theta, trace_branches(model, theta)).grad
        for j in range(theta.size):
            fp, fm = _fd(lambda t: total_measure(trace_branches(model, t)), theta, j, h)
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(g[j] - fd) / abs(fd))
    record(3, worst < 0.02, f"worst relative error {worst:.3%}", time.perf_counter() - t0, 120)


# -- 4 ---------------------------------------------------------------------------------


def test_criterion_4_loss_gradient():
    t0 = time.perf_counter()
    h = 1e-4
    worst = 0.0
    ok = True
    for model, theta, targets in [(SADDLE, TH_S, [-1.0, 1.0]), (PITCH, TH_P, [2.0])]:
        d = trace_branches(model, theta)
        rep = grad_loss(model, theta, d, predictions(model, theta, d), targets)

        def value(t):
            dd, pp = _pipeline(model, t)
            return loss(model, t, dd, pp, targets)

        for j in range(theta.size):
            rp, rm = _fd(value, theta, j, h)
            ok &= rp.n_pred == rm.n_pred == rep.n_pred
            fd = (rp.L - rm.L) / (2 * h)
            worst = max(worst, abs(rep.grad[j] - fd) / abs(fd))
    record(4, ok and worst < 0.01, f"worst relative error {worst:.3%}", time.perf_counter() - t0, 120)


# -- 5 ---------------------------------------------------------------------------------


def test_criterion_5_saddle_inference():
    t0 = time.perf_counter()
    init = basin_init(SADDLE, 2, radius=2.0)
    cfg = OptimizerConfig(method="gd", learning_rate=0.01, max_steps=2000)
    recs = run_batch(SADDLE, [-1.0, 1.0], 10, base_seed=0, opt_cfg=cfg, init=init)
    n = sum(r.converged for r in recs)
    best = [min((s["E"] for s in r.steps if s["E"] is not None), default=math.nan) for r in recs]
    detail = (f"{n}/10 converged; terminations {[r.termination for r in recs]}; "
              f"best E per run {[round(b, 4) for b in best]}")
    record(5, n >= 8, detail, time.perf_counter() - t0, 600)


# -- 6 ---------------------------------------------------------------------------------

TOGGLE_STEPS = 500


def test_criterion_6_toggle_clusters():
    t0 = time.perf_counter()
    cfg = OptimizerConfig(method="adam", learning_rate=0.1, max_steps=TOGGLE_STEPS)
    recs = run_batch(TOGGLE, [4.0, 5.0], 40, base_seed=0, opt_cfg=cfg, trace_settings=TraceSettings(step=0.05))
    summary = batch_summary(recs, models.toggle_cluster)
    conv = [r for r in recs if r.converged]
    clustered = all(models.toggle_cluster(r.final_theta) in (1, 2) for r in conv)
    ok = summary["fraction"] >= 0.7 and clustered
    detail = f"{summary['converged']}/40 converged, clusters {summary.get('clusters', {})}, all clustered={clustered}"
    record(6, ok, detail, time.perf_counter() - t0, 1800)


# -- 7 ---------------------------------------------------------------------------------


def test_criterion_7_ratio_invariance():
    t0 = time.perf_counter()
    base = np.sort(_pipeline(TOGGLE, TH_T)[1].p_values)
    worst = 0.0
    ok = base.size > 0
    for factor in (0.5, 2.0, 10.0):
        th = TH_T.copy()
        th[[2, 4]] += math.log10(factor)
        moved = np.sort(_pipeline(TOGGLE, th)[1].p_values)
        if moved.size != base.size:
            ok = False
            continue
        worst = max(worst, float(np.max(np.abs(moved - base))))
    record(7, ok and worst < 1e-6, f"p={np.round(base, 6).tolist()}, worst shift {worst:.2e}",
           time.perf_counter() - t0, 120)


# -- 8 ---------------------------------------------------------------------------------


def test_criterion_8_scaling():
    t0 = time.perf_counter()
    rows = cli.bench_gradient([2, 4, 8, 16, 32], params=4, repeats=5)
    slope = cli.loglog_slope(rows)
    times = ", ".join(f"N={n}: {t * 1e3:.2f}ms" for n, t in rows)
    record(8, abs(slope - 2.0) <= 0.5, f"slope {slope:.3f} ({times})", time.perf_counter() - t0, 300)


# -- 9 ---------------------------------------------------------------------------------

PROP_MODELS = SENS_MODELS


def test_criterion_9_properties():
    t0 = time.perf_counter()
    failures = []
    rng = np.random.default_rng(2024)
    for model, theta in PROP_MODELS:
        d = trace_branches(model, theta)
        zs = np.vstack([b.zs for b in d.branches])
        keep = []
        for z in zs:
            sv = np.linalg.svd(differentiate(model, z, theta, Derivative.DF_DZ), compute_uv=False)
            keep.append(sv.min() > 1e-3)
        pts = zs[np.array(keep)]
        pts = pts[rng.choice(len(pts), size=100, replace=len(pts) < 100)]
        orth = norm = 0.0
        for z in pts:
            _, that = tangent_field(model, theta, z)
            orth = max(orth, float(np.max(np.abs(differentiate(model, z, theta, Derivative.DF_DZ) @ that))))
            w = deformation_field(model, theta, z)
            if w.size:
                norm = max(norm, float(np.max(np.abs(that @ w))))
        if orth >= 1e-10:
            failures.append(f"{model.name}: tangent {orth:.1e}")
        if norm >= 1e-8:
            failures.append(f"{model.name}: deformation {norm:.1e}")
        phis = np.concatenate([b.measure for b in d.branches])
        if not (np.all(phis >= 0) and np.all(phis <= 1)):
            failures.append(f"{model.name}: phi outside [0, 1]")
        fine = trace_branches(model, theta, TraceSettings(step=d.settings.step / 2))
        rel = abs(total_measure(fine) - total_measure(d)) / total_measure(d)
        if rel >= 0.01:
            failures.append(f"{model.name}: step halving {rel:.2%}")
    samples = measure_from(rng.normal(size=10_000) * 10.0 ** rng.uniform(-12, 6, 10_000),
                           rng.normal(size=10_000) * 10.0 ** rng.uniform(-12, 6, 10_000))
    if not (np.all(samples >= 0) and np.all(samples <= 1)):
        failures.append("phi outside [0, 1] on random inputs")
    cfg = OptimizerConfig(method="adam", learning_rate=0.05, max_steps=20)
    a = run_batch(PITCH, [2.0], 2, base_seed=3, opt_cfg=cfg)
    b = run_batch(PITCH, [2.0], 2, base_seed=3, opt_cfg=cfg)
    same = all(
        [t.tobytes() for t in x.thetas] == [t.tobytes() for t in y.thetas] and x.steps == y.steps for x, y in zip(a, b)
    )
    if not same:
        failures.append("seeded runs differ")
    single = run_inference(PITCH, [2.0], cfg)
    if [t.tobytes() for t in single.thetas] != [t.tobytes() for t in run_inference(PITCH, [2.0], cfg).thetas]:
        failures.append("single run not reproducible")
    record(9, not failures, "all properties hold" if not failures else "; ".join(failures),
           time.perf_counter() - t0, 300)


# -- 10 --------------------------------------------------------------------------------


def test_criterion_10_degenerate(tmp_path):
    t0 = time.perf_counter()
    m = models.degenerate_pair()
    us = math.sqrt(2.5 / 3.0)
    ps = predictions(m, TH_S, trace_branches(m, TH_S))
    flagged = [f for f in ps.degenerate_flags if f["reason"] == "degenerate"]
    # the diagonal double crossings must be flagged, never returned as points
    diag_points = [bp for bp in ps.points if abs(bp.u[0] - bp.u[1]) < 1e-3]
    diag_flags = {round(f["p"], 4) for f in flagged if abs(f["u"][0] - f["u"][1]) < 1e-3}
    try:
        refine_bifurcation(m, TH_S, [us + 1e-3, us - 1e-3, -(2.5 * us - us**3)])
        direct = False
    except DegenerateBifurcationError:
        direct = True
    rc = cli.main(["gradcheck", "--model", "saddle-node", "--theta", "0.05,-1", "--targets", "-1,1",
                   "--fd-step", "0.1", "--out", str(tmp_path)])
    ok = not diag_points and diag_flags == {-1.5215, 1.5215} and direct and rc == 3
    detail = (f"diagonal points returned {len(diag_points)}, flagged at p={sorted(diag_flags)}, "
              f"direct refinement degenerate={direct}, gradcheck exit {rc}")
    record(10, ok, detail, time.perf_counter() - t0, 60)


if __name__ == "__main__":
    import pathlib
    import tempfile

    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]
    tests.sort(key=lambda f: int(f.__name__.split("_")[2]))
    for fn in tests:
        try:
            if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(pathlib.Path(tmp))
            else:
                fn()
        except AssertionError:
            pass
    sys.exit(0 if all(ok for ok, _ in RESULTS.values()) and len(RESULTS) == len(tests) else 1)
