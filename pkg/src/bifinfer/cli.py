"""Command-line front end.

Exit codes: 0 ok, 2 solver failure, 3 gradient check untestable,
64 usage error, 65 malformed input data.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import json
import os
import re
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .continuation import TraceSettings, read_diagram_csv, trace_branches, write_diagram_csv
from .cost import CostConfig, TargetSet, grad_loss, loss
from .detection import predictions
from .errors import BifurcationError, DataError, UsageError
from .geometry import grad_total_measure, total_measure
from .models import get_model, scaling_chain, toggle_cluster
from .optimize import OptimizerConfig, basin_init, batch_summary, run_batch

EXIT_OK, EXIT_SOLVER, EXIT_UNTESTABLE, EXIT_USAGE, EXIT_DATA = 0, 2, 3, 64, 65
OUT_ENV = "BIFINFER_OUT"

# documented tolerances of gradcheck
TOL_DP_ABS = 1e-4
TOL_PSI_REL = 0.02
TOL_LOSS_REL = 0.01


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).replace(" ", "").split(",") if x != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).replace(" ", "").split(",") if x != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _range(text: str) -> tuple[float, float]:
    try:
        a, b = str(text).split(":")
        lo, hi = float(a), float(b)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}") from exc
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return lo, hi


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "out")


def _common(p: argparse.ArgumentParser, model=True):
    p.add_argument("--config", help="key = value file; keys are flag names, command-line flags win")
    if model:
        p.add_argument("--model", required=True, help="saddle-node, pitchfork, toggle, scaling-chain, degenerate-pair, linear")
        p.add_argument("--states", type=int, default=2, help="state count for scaling-chain")
        p.add_argument("--params", type=int, default=4, help="parameter count for scaling-chain")
        p.add_argument("--p-range", type=_range, help="control window a:b (default: the model's)")
        p.add_argument("--step", type=float, default=TraceSettings.step, help="continuation arclength step")
        p.add_argument("--trace-seed", type=int, default=0, help="seed of the root-search sampler")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="bifinfer", description="Fit ODE parameters to target bifurcation locations.")
    top.add_argument("--version", action="version", version=f"bifinfer {__version__}")
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("trace", help="trace a bifurcation diagram")
    _common(p)
    p.add_argument("--theta", type=_floats, required=True, help="parameters, comma-separated")
    p.add_argument("--targets", type=_floats, help="optional targets drawn in the figure")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./out)")

    p = sub.add_parser("infer", help="optimize parameters toward target bifurcations")
    _common(p)
    p.add_argument("--targets", type=_floats, required=True)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--optimizer", choices=("gd", "adam"), default="gd")
    p.add_argument("--lr", type=float, default=OptimizerConfig.learning_rate)
    p.add_argument("--max-steps", type=int, default=OptimizerConfig.max_steps)
    p.add_argument("--tol-e", type=float, default=OptimizerConfig.tol_E)
    p.add_argument("--patience", type=int, default=OptimizerConfig.patience)
    p.add_argument("--lam", type=float, default=CostConfig.lam, help="weight of the unsupervised term")
    p.add_argument("--seed", type=int, default=0, help="seed of the first run; run i uses seed + i")
    p.add_argument("--init", choices=("normal", "basin"), default="normal",
                   help="basin: redraw until the start already has |D| predictions")
    p.add_argument("--init-radius", type=float, default=None, help="with --init basin, reject starts of larger norm")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", default=None)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    _common(p)
    p.add_argument("--theta", type=_floats, required=True)
    p.add_argument("--targets", type=_floats, required=True)
    p.add_argument("--fd-step", type=float, default=1e-4)
    p.add_argument("--out", default=None)

    p = sub.add_parser("bench", help="gradient timing on the scaling chain")
    _common(p, model=False)
    p.add_argument("--states", type=_ints, default=[2, 4, 8, 16, 32])
    p.add_argument("--params", type=int, default=4)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--step", type=float, default=TraceSettings.step)
    p.add_argument("--out", default=None)

    p = sub.add_parser("render", help="draw a diagram CSV as SVG")
    _common(p, model=False)
    p.add_argument("--diagram", required=True)
    p.add_argument("--targets", type=_floats)
    p.add_argument("--state", type=int, default=1, help="which u_i to plot against p")
    p.add_argument("--out", required=True, help="SVG path")
    return top


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv[1:])
    if not known.config or not argv or argv[0].startswith("-"):
        return parser.parse_args(argv)
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(known.config) as fh:
            cp.read_string("[bifinfer]\n" + fh.read())
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from exc
    # config entries become extra leading flags so explicit flags override them
    extra = [f"--{key.replace('_', '-')}={value}" for key, value in cp["bifinfer"].items()]
    return parser.parse_args([argv[0]] + extra + argv[1:])


# -- helpers -------------------------------------------------------------------------


def _model(args):
    model = get_model(args.model, states=args.states, params=args.params)
    if args.p_range is not None:
        model = model.with_window(args.p_range)
    return model


def _settings(args) -> TraceSettings:
    if not args.step > 0:
        raise UsageError("--step must be positive")
    return TraceSettings(step=args.step, seed=args.trace_seed)


def _theta(model, values) -> np.ndarray:
    theta = np.asarray(values, dtype=float)
    if theta.size != model.param_dim:
        raise UsageError(f"{model.name} takes {model.param_dim} parameters, got {theta.size}")
    return theta


def _out_dir(args) -> Path:
    out = Path(args.out if args.out is not None else _default_out())
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def _manifest(out: Path, args, extra: dict) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("config", "argv")}
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}
    doc = {
        "command": args.command,
        "argv": list(getattr(args, "argv", sys.argv[1:])),
        "config": cfg,
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        **extra,
    }
    _write_json(out / "manifest.json", doc)


def _fig(fn, *a, **kw):
    from . import plotting

    return getattr(plotting, fn)(*a, **kw)


# -- commands -------------------------------------------------------------------------


def cmd_trace(args) -> int:
    model = _model(args)
    theta = _theta(model, args.theta)
    settings = _settings(args)
    targets = None
    if args.targets:
        targets = TargetSet(args.targets, model.p_window)
    out = _out_dir(args)
    diagram = trace_branches(model, theta, settings)
    _manifest(out, args, {"model": model.name, "theta": theta.tolist(), "p_window": list(model.p_window),
                          "trace_settings": _asdict(settings), "flags": list(diagram.flags)})
    if diagram.empty:
        print(f"no branches found in p-window {model.p_window}; flags: {', '.join(diagram.flags)}", file=sys.stderr)
        write_diagram_csv(diagram, out / "diagram.csv")
        return EXIT_SOLVER
    preds = predictions(model, theta, diagram)
    write_diagram_csv(diagram, out / "diagram.csv")
    doc = preds.to_dict()
    doc["psi"] = total_measure(diagram)
    _write_json(out / "predictions.json", doc)
    _fig("plot_diagram", diagram, out / "diagram.svg", predictions=preds,
         targets=None if targets is None else targets.array, title=model.name)
    for pt in preds.points:
        print(f"bifurcation p={pt.p!r} u={[float(x) for x in pt.u]} det_slope={pt.det_slope:.6g}")
    print(f"{len(preds)} bifurcation(s), {len(diagram.branches)} branch(es), {diagram.n_samples} samples -> {out}")
    return EXIT_OK


def _asdict(obj) -> dict:
    from dataclasses import asdict

    return asdict(obj)


def cmd_infer(args) -> int:
    model = _model(args)
    targets = TargetSet(args.targets, model.p_window)
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    opt = OptimizerConfig(method=args.optimizer, learning_rate=args.lr, max_steps=args.max_steps, tol_E=args.tol_e,
                          patience=args.patience, seed=args.seed)
    cost = CostConfig(lam=args.lam)
    settings = _settings(args)
    init = None
    if args.init == "basin":
        init = basin_init(model, len(targets), args.init_radius, settings)
    out = _out_dir(args)
    records = run_batch(model, targets, args.runs, base_seed=args.seed, opt_cfg=opt, cost_cfg=cost,
                        trace_settings=settings, jobs=args.jobs, init=init)
    cluster = toggle_cluster if model.name == "toggle" else None
    summary = batch_summary(records, cluster)
    # wall times vary between reruns, so they go to the manifest rather than runs.json
    docs = [r.to_dict() for r in records]
    wall = [d.pop("wall_time") for d in docs]
    _write_json(out / "runs.json", docs)
    m = model.param_dim
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "converged", "termination", "steps", "final_E", "final_n_pred",
                    *[f"theta_{i + 1}" for i in range(m)], "cluster"])
        for r in records:
            last = r.steps[-1] if r.steps else {}
            cl = "" if cluster is None else cluster(r.final_theta)
            w.writerow([r.seed, str(r.converged).lower(), r.termination, len(r.steps) - 1 if r.steps else 0,
                        repr(last.get("E")) if last.get("E") is not None else "", last.get("n_pred", ""),
                        *[repr(float(x)) for x in r.final_theta], cl])
    _fig("plot_history", records, out / "history.svg", tol_E=opt.tol_E)
    _manifest(out, args, {"model": model.name, "targets": list(targets.values), "p_window": list(model.p_window),
                          "seeds": [r.seed for r in records], "optimizer": _asdict(opt), "cost": _asdict(cost),
                          "trace_settings": _asdict(settings), "summary": summary,
                          "wall_time_seconds": wall})
    print(f"converged {summary['converged']}/{summary['runs']}"
          + (f", clusters {summary['clusters']}" if "clusters" in summary else "") + f" -> {out}")
    return EXIT_OK


def _pipeline(model, theta, settings):
    diagram = trace_branches(model, theta, settings)
    if diagram.empty:
        raise BifurcationError("empty diagram")
    preds = predictions(model, theta, diagram)
    return diagram, preds


def _rel_errors(a, f, floor=1e-8):
    a, f = np.asarray(a, float), np.asarray(f, float)
    return np.abs(a - f) / np.maximum(np.abs(f), floor)


def gradcheck(model, theta, targets, fd_step=1e-4, settings=None, cost=None) -> dict:
    """Analytic dp/dtheta, dPsi/dtheta and dL/dtheta against central differences of the full pipeline.

    Each component is ``pass``, ``fail`` or ``untestable`` (the two FD
    evaluations see a different number of predictions than the centre).
    """
    settings = settings or TraceSettings()
    cost = cost or CostConfig()
    theta = np.asarray(theta, float)
    diagram, preds = _pipeline(model, theta, settings)
    rep = grad_loss(model, theta, diagram, preds, targets, cost)
    g_psi = grad_total_measure(model, theta, diagram).grad
    n_p = len(preds)
    fd_p = np.zeros((n_p, theta.size))
    fd_psi = np.zeros(theta.size)
    fd_L = np.zeros(theta.size)
    counts = []
    for i in range(theta.size):
        vals = []
        for sgn in (1.0, -1.0):
            th = theta.copy()
            th[i] += sgn * fd_step
            d, P = _pipeline(model, th, settings)
            r = loss(model, th, d, P, targets, cost)
            vals.append((P.p_values, r.psi, r.L))
            counts.append(len(P))
        (pp, psip, lp), (pm, psim, lm) = vals
        if len(pp) == n_p and len(pm) == n_p:
            fd_p[:, i] = (pp - pm) / (2 * fd_step)
        fd_psi[i] = (psip - psim) / (2 * fd_step)
        fd_L[i] = (lp - lm) / (2 * fd_step)
    stable = all(c == n_p for c in counts)
    an_p = np.array([pt.dp_dtheta for pt in preds.points]).reshape(n_p, theta.size)

    def verdict(ok):
        return "pass" if ok else "fail"

    report = {
        "theta": theta.tolist(),
        "fd_step": fd_step,
        "n_pred": n_p,
        "n_pred_fd": counts,
        "dp_dtheta": {
            "analytic": an_p.tolist(),
            "fd": fd_p.tolist(),
            "max_abs_error": float(np.max(np.abs(an_p - fd_p))) if n_p else 0.0,
            "tolerance_abs": TOL_DP_ABS,
        },
        "dpsi_dtheta": {
            "analytic": g_psi.tolist(),
            "fd": fd_psi.tolist(),
            "rel_error": _rel_errors(g_psi, fd_psi).tolist(),
            "tolerance_rel": TOL_PSI_REL,
        },
        "dL_dtheta": {
            "analytic": rep.grad.tolist(),
            "fd": fd_L.tolist(),
            "rel_error": _rel_errors(rep.grad, fd_L).tolist(),
            "tolerance_rel": TOL_LOSS_REL,
        },
    }
    if stable:
        report["dp_dtheta"]["status"] = verdict(report["dp_dtheta"]["max_abs_error"] <= TOL_DP_ABS)
        report["dL_dtheta"]["status"] = verdict(max(report["dL_dtheta"]["rel_error"], default=0) <= TOL_LOSS_REL)
    else:
        report["dp_dtheta"]["status"] = "untestable"
        report["dL_dtheta"]["status"] = "untestable"
    # Psi does not depend on the prediction count
    report["dpsi_dtheta"]["status"] = verdict(max(report["dpsi_dtheta"]["rel_error"], default=0) <= TOL_PSI_REL)
    return report


def cmd_gradcheck(args) -> int:
    model = _model(args)
    theta = _theta(model, args.theta)
    targets = TargetSet(args.targets, model.p_window)
    if not args.fd_step > 0:
        raise UsageError("--fd-step must be positive")
    settings = _settings(args)
    out = _out_dir(args)
    report = gradcheck(model, theta, targets, args.fd_step, settings)
    _write_json(out / "gradcheck.json", report)
    _manifest(out, args, {"model": model.name, "theta": theta.tolist(), "targets": list(targets.values),
                          "p_window": list(model.p_window), "trace_settings": _asdict(settings)})
    statuses = {k: report[k]["status"] for k in ("dp_dtheta", "dpsi_dtheta", "dL_dtheta")}
    for k, v in statuses.items():
        print(f"{k}: {v}")
    if "untestable" in statuses.values():
        print("prediction count changes inside the FD bracket", file=sys.stderr)
        return EXIT_UNTESTABLE
    return EXIT_OK if all(v == "pass" for v in statuses.values()) else EXIT_SOLVER


def bench_gradient(states, params=4, repeats=5, settings=None) -> list[tuple[int, float]]:
    """Median seconds of one loss-gradient evaluation (diagram given) per chain length."""
    settings = settings or TraceSettings()
    rows = []
    for n in states:
        model = scaling_chain(n, params)
        theta = np.asarray(model.theta_ref, float)
        targets = TargetSet([0.5 * sum(model.p_window)], model.p_window)
        diagram = trace_branches(model, theta, settings)
        preds = predictions(model, theta, diagram)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            grad_loss(model, theta, diagram, preds, targets)
            times.append(time.perf_counter() - t0)
        rows.append((n, statistics.median(times)))
    return rows


def loglog_slope(rows) -> float | None:
    if len(rows) < 2:
        return None
    n = np.log([r[0] for r in rows])
    t = np.log([r[1] for r in rows])
    return float(np.polyfit(n, t, 1)[0])


def cmd_bench(args) -> int:
    if args.repeats < 1 or not args.states or min(args.states) < 1:
        raise UsageError("--repeats and every --states entry must be at least 1")
    out = _out_dir(args)
    settings = TraceSettings(step=args.step)
    rows = bench_gradient(args.states, args.params, args.repeats, settings)
    slope = loglog_slope(rows)
    with open(out / "scaling.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "median_seconds"])
        for n, t in rows:
            w.writerow([n, repr(t)])
    if slope is not None:
        _fig("plot_scaling", [r[0] for r in rows], [r[1] for r in rows], slope, out / "scaling.svg")
    _manifest(out, args, {"model": "scaling-chain", "trace_settings": _asdict(settings), "slope": slope})
    print("slope: undefined (needs at least two N values)" if slope is None else f"slope: {slope:.3f}")
    return EXIT_OK


def _table_crossings(br):
    from .detection import detect_crossings

    det = np.asarray(br["det"], float)
    zs = np.asarray(br["zs"], float)
    out = []
    for i, j in detect_crossings(det):
        if j - i > 1:
            out.append(zs[(i + j) // 2])
        else:
            f = det[i] / (det[i] - det[j])
            out.append(zs[i] + f * (zs[j] - zs[i]))
    return out


def cmd_render(args) -> int:
    table = read_diagram_csv(args.diagram)
    if not 1 <= args.state <= table.state_dim:
        raise UsageError(f"--state must lie in 1..{table.state_dim}")
    from .continuation import Branch, Diagram
    from .detection import BifurcationPoint, PredictionSet

    branches = []
    points = []
    for br in table.branches:
        zs = np.asarray(br["zs"], float)
        branches.append(Branch(zs, np.asarray(br["det"], float), np.asarray(br["tangent"], float),
                               np.asarray(br["ds"], float), np.asarray(br["measure"], float),
                               np.full(zs.shape[0], np.nan), False, (None, None), (), ()))
        points += [BifurcationPoint(z, float("nan")) for z in _table_crossings(br)]
    ps = np.concatenate([b.zs[:, -1] for b in branches])
    window = (float(ps.min()), float(ps.max()))
    if window[0] == window[1]:
        window = (window[0] - 0.5, window[1] + 0.5)
    diagram = Diagram(tuple(branches), np.zeros(0), window, TraceSettings())
    path = _fig("plot_diagram", diagram, args.out, predictions=PredictionSet(tuple(points)),
                targets=args.targets, state=args.state - 1)
    print(f"{len(points)} bifurcation marker(s) -> {path}")
    return EXIT_OK


COMMANDS = {"trace": cmd_trace, "infer": cmd_infer, "gradcheck": cmd_gradcheck, "bench": cmd_bench, "render": cmd_render}


_NEG = re.compile(r"^-[0-9.]")


def _join_negative(argv: list[str]) -> list[str]:
    """Turn ``--opt -3:3`` into ``--opt=-3:3`` so numeric values may start with a minus."""
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok.startswith("--") and "=" not in tok and i + 1 < len(argv) and _NEG.match(argv[i + 1]):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv=None) -> int:
    argv = _join_negative(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        args.argv = argv
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"bifinfer: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"bifinfer: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BifurcationError as exc:
        print(f"bifinfer: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
