import numpy as np
import pytest
from scipy.optimize import fsolve

from bifinfer import models
from bifinfer.continuation import (
    TraceSettings,
    find_roots_deflated,
    newton_correct,
    read_diagram_csv,
    trace_branches,
    write_diagram_csv,
)
from bifinfer.detection import predictions
from bifinfer.errors import CorrectorError, SingularityError
from bifinfer.geometry import total_measure
from bifinfer.model import Derivative, ModelDef, differentiate, evaluate, evaluate_batch

CUBIC = ModelDef(name="cubic", state_dim=1, param_dim=1, rhs=lambda u, p, th: [p - u[0] ** 3 + th[0] * u[0]])
LINE = models.linear()


def _sorted_roots(roots):
    return sorted(float(r[0]) for r in roots)


# -- deflated root finding -------------------------------------------------------------


def test_cubic_has_three_roots():
    roots = _sorted_roots(find_roots_deflated(CUBIC, [1.0], 0.0))
    np.testing.assert_allclose(roots, [-1.0, 0.0, 1.0], atol=1e-10)


def test_linear_has_one_root():
    roots = find_roots_deflated(LINE, [], 0.7)
    assert len(roots) == 1
    assert roots[0][0] == pytest.approx(0.7, abs=1e-12)


def test_no_real_root_gives_empty_list():
    m = ModelDef(name="none", state_dim=1, param_dim=1, rhs=lambda u, p, th: [u[0] * u[0] + 1.0 + th[0] * p])
    assert find_roots_deflated(m, [0.0], 0.0) == []


def _grid_oracle(model, theta, p0, n=200):
    """Roots by brute force: coarse grid minima of |F|, then polished with fsolve."""
    lo, hi = model.box(theta)
    g1 = np.linspace(lo[0], hi[0], n)
    g2 = np.linspace(lo[1], hi[1], n)
    uu, vv = np.meshgrid(g1, g2, indexing="ij")
    zs = np.column_stack([uu.ravel(), vv.ravel(), np.full(uu.size, p0)])
    r = np.linalg.norm(evaluate_batch(model, zs, theta), axis=1).reshape(n, n)
    found = []
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            win = r[i - 1 : i + 2, j - 1 : j + 2]
            if r[i, j] == win.min() and r[i, j] < 1.0:
                sol = fsolve(lambda u: evaluate(model, np.append(u, p0), theta), [g1[i], g2[j]], xtol=1e-13)
                if np.max(np.abs(evaluate(model, np.append(sol, p0), theta))) < 1e-9:
                    found.append(sol)
    uniq = []
    for s in found:
        if all(np.linalg.norm(s - t) > 1e-6 for t in uniq):
            uniq.append(s)
    return sorted(uniq, key=lambda s: s[0])


def test_toggle_bistable_roots_match_grid_oracle(toggle):
    theta = np.array(models.TOGGLE_REF)
    oracle = _grid_oracle(toggle, theta, 1.0)
    roots = sorted(find_roots_deflated(toggle, theta, 1.0), key=lambda s: s[0])
    assert len(oracle) == 3
    assert len(roots) == 3
    for r, o in zip(roots, oracle):
        np.testing.assert_allclose(r, o, atol=1e-8)


def test_root_search_is_deterministic(toggle):
    theta = np.array(models.TOGGLE_REF)
    a = find_roots_deflated(toggle, theta, 0.95)
    b = find_roots_deflated(toggle, theta, 0.95)
    assert [x.tobytes() for x in a] == [x.tobytes() for x in b]


# -- corrector ------------------------------------------------------------------------


def test_corrector_with_fixed_p(saddle):
    sp = newton_correct(saddle, [2.5, -1.0], [0.1, 0.0], [0.0, 1.0])
    assert sp.u[0] == pytest.approx(0.0, abs=1e-12)
    assert sp.p == 0.0


def test_corrector_fixed_point(saddle):
    u = 0.7
    p = -(2.5 * u - u**3)
    sp = newton_correct(saddle, [2.5, -1.0], [u, p], [0.6, 0.8])
    assert sp.u[0] == pytest.approx(u, abs=1e-12)
    assert sp.p == pytest.approx(p, abs=1e-12)


def test_corrector_toggle_perturbed_converges_fast(toggle):
    theta = np.array(models.TOGGLE_REF)
    for root in find_roots_deflated(toggle, theta, 1.0):
        z0 = np.append(root, 1.0)
        guess = z0 + 1e-3 * np.array([1.0, -1.0, 0.0])
        sp = newton_correct(toggle, theta, guess, [0.0, 0.0, 1.0], tol=1e-10, max_iter=5)
        z = np.append(sp.u, sp.p)
        assert np.max(np.abs(evaluate(toggle, z, theta))) <= 1e-10
        np.testing.assert_allclose(z, z0, atol=1e-8)


def test_corrector_nonconvergence(saddle):
    # p fixed just past the fold: no nearby root
    with pytest.raises(CorrectorError):
        newton_correct(saddle, [2.5, -1.0], [0.9, -1.6], [0.0, 1.0], max_iter=3)


def test_corrector_singular_bordered_system():
    m = ModelDef(name="parabola", state_dim=1, param_dim=1, rhs=lambda u, p, th: [u[0] * u[0] + p - th[0]])
    # at u = 0 with p pinned the bordered matrix [[0, 1], [0, 1]] is singular
    with pytest.raises(SingularityError):
        newton_correct(m, [1.0], [0.0, 0.5], [0.0, 1.0])


# -- tracing ---------------------------------------------------------------------------


def _sign_runs(det):
    s = np.sign(det[det != 0])
    return tuple(int(v) for i, v in enumerate(s) if i == 0 or v != s[i - 1])


def test_saddle_single_s_branch(saddle):
    d = trace_branches(saddle, [2.5, -1.0])
    assert len(d.branches) == 1
    b = d.branches[0]
    # det = 2.5 - 3u^2 is positive on the middle limb only
    assert _sign_runs(b.det) == (-1, 1, -1)
    assert b.zs[0, -1] == pytest.approx(-3.0) or b.zs[-1, -1] == pytest.approx(-3.0)


def test_linear_branch():
    d = trace_branches(LINE, [])
    assert len(d.branches) == 1
    b = d.branches[0]
    np.testing.assert_allclose(b.det, -1.0)
    np.testing.assert_allclose(b.zs[:, 0], b.zs[:, 1], atol=1e-12)
    assert b.ds.sum() == pytest.approx(2.0 * np.sqrt(2.0), rel=1e-9)


def test_pitchfork_single_crossing(pitch):
    d = trace_branches(pitch, [0.5, -1.0])
    assert len(d.branches) == 2
    crossings = []
    for b in d.branches:
        s = np.sign(b.det)
        idx = np.flatnonzero(s[1:] * s[:-1] < 0)
        crossings += [b.zs[i, -1] for i in idx]
        crossings += [b.zs[i, -1] for i in np.flatnonzero(b.det == 0)]
    assert len(crossings) == 1
    assert crossings[0] == pytest.approx(1.1906, abs=0.05)


def test_empty_diagram_is_flagged():
    m = ModelDef(name="none", state_dim=1, param_dim=1, rhs=lambda u, p, th: [u[0] * u[0] + 1.0 + th[0] * p * p])
    d = trace_branches(m, [1.0])
    assert d.empty
    assert d.flags


def test_closed_branch_detected():
    m = ModelDef(name="circle", state_dim=1, param_dim=1, rhs=lambda u, p, th: [u[0] * u[0] + p * p - th[0]])
    d = trace_branches(m, [1.0])
    assert len(d.branches) == 1
    assert d.branches[0].closed
    assert d.branches[0].ds.sum() == pytest.approx(2 * np.pi, rel=1e-4)


TRACED = [
    (models.saddle_node(), [2.5, -1.0]),
    (models.pitchfork(), [0.5, -1.0]),
    (models.toggle_switch(), list(models.TOGGLE_REF)),
    (models.degenerate_pair(), [2.5, -1.0]),
    (models.scaling_chain(3, 4), [0.5] * 4),
]


@pytest.fixture(scope="module", params=TRACED, ids=[m.name for m, _ in TRACED])
def traced(request):
    model, theta = request.param
    return model, np.array(theta, float), trace_branches(model, theta)


def test_samples_lie_on_curve(traced):
    model, theta, d = traced
    assert not d.empty
    for b in d.branches:
        res = evaluate_batch(model, b.zs, theta)
        assert np.max(np.abs(res)) <= 1e-10


def test_sample_spacing_and_tangents(traced):
    model, theta, d = traced
    h = d.settings.step
    for b in d.branches:
        steps = np.linalg.norm(np.diff(b.zs, axis=0), axis=1)
        # chords of the pseudo-arclength step stay close to h; only boundary exits are shorter
        assert np.all(steps > 0)
        assert np.all(steps <= 2 * h)
        assert np.median(steps) == pytest.approx(h, rel=1e-2)
        assert b.ds[0] == 0.0
        np.testing.assert_allclose(b.ds[1:], steps, rtol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(b.tangent, axis=1), 1.0, atol=1e-12)
        # consistent orientation along the branch
        assert np.all(np.sum(b.tangent[1:] * b.tangent[:-1], axis=1) > 0)
        p = b.zs[:, -1]
        lo, hi = d.p_window
        assert np.all((p >= lo - 1e-9) & (p <= hi + 1e-9))


def test_branches_do_not_overlap(traced):
    """Samples of distinct branches keep h/2 apart except where the curves truly intersect."""
    model, theta, d = traced
    h = d.settings.step
    for i, a in enumerate(d.branches):
        for b in d.branches[i + 1 :]:
            dist = np.linalg.norm(a.zs[:, None, :] - b.zs[None, :, :], axis=2)
            for ia, ib in zip(*np.nonzero(dist < h / 2)):
                # an intersection of two smooth branches is a singular point of [F_u F_p]
                near = a.zs[ia] if abs(a.det[ia]) < abs(b.det[ib]) else b.zs[ib]
                sv = np.linalg.svd(differentiate(model, near, theta, Derivative.DF_DZ), compute_uv=False)
                assert sv.min() < 2 * h * sv.max()


def _mirror(model):
    """Same curve traced with p reversed, so arclength runs the other way."""
    lo, hi = model.p_window
    return ModelDef(
        name=model.name + "-mirror",
        state_dim=model.state_dim,
        param_dim=model.param_dim,
        rhs=lambda u, p, th: model.rhs(u, -p, th),
        param_transform=model.param_transform,
        p_window=(-hi, -lo),
        u_box=model.u_box,
    )


@pytest.mark.parametrize("model, theta", TRACED[:3], ids=[m.name for m, _ in TRACED[:3]])
def test_arclength_invariant_under_reversal(model, theta):
    a = sum(b.ds.sum() for b in trace_branches(model, theta).branches)
    b = sum(b.ds.sum() for b in trace_branches(_mirror(model), theta).branches)
    assert b == pytest.approx(a, rel=1e-2)


@pytest.mark.parametrize("model, theta", TRACED[:3], ids=[m.name for m, _ in TRACED[:3]])
def test_step_halving(model, theta):
    coarse = trace_branches(model, theta, TraceSettings(step=0.02))
    fine = trace_branches(model, theta, TraceSettings(step=0.01))
    assert total_measure(fine) == pytest.approx(total_measure(coarse), rel=1e-2)
    pc = predictions(model, theta, coarse, sensitivities=False).p_values
    pf = predictions(model, theta, fine, sensitivities=False).p_values
    assert len(pc) == len(pf)
    np.testing.assert_allclose(np.sort(pc), np.sort(pf), atol=1e-4)


def test_trace_is_deterministic(toggle):
    theta = np.array(models.TOGGLE_REF)
    a = trace_branches(toggle, theta)
    b = trace_branches(toggle, theta)
    for x, y in zip(a.branches, b.branches):
        assert x.zs.tobytes() == y.zs.tobytes()


def test_csv_roundtrip(tmp_path, traced):
    model, theta, d = traced
    path = tmp_path / "d.csv"
    write_diagram_csv(d, path)
    table = read_diagram_csv(path)
    assert table.state_dim == model.state_dim
    assert len(table.branches) == len(d.branches)
    for b, t in zip(d.branches, table.branches):
        for key in ("zs", "det", "measure", "ds", "tangent"):
            np.testing.assert_array_equal(t[key], getattr(b, key))
    write_diagram_csv(d, tmp_path / "e.csv")
    assert path.read_bytes() == (tmp_path / "e.csv").read_bytes()


def test_csv_rejects_garbage(tmp_path):
    from bifinfer.errors import DataError

    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_diagram_csv(bad)
