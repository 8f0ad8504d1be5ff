"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line and the lines are repeated in
the pytest terminal summary. Tolerances are the stated acceptance
tolerances; the tests are not loosened to make them pass.
"""

import functools
import itertools
import json
import math
import time
import warnings
from dataclasses import replace

import numpy as np

from conftest import ACCEPTANCE_LINES
from picardpde.analysis import (
    brute_force_K, build_box, compute_delta, compute_delta1, compute_gamma, compute_K,
    error_bound, estimate_L, estimate_M,
)
from picardpde.cli import builtin_config, execute, main
from picardpde.mesh import Domain, Field, Grid, sample
from picardpde.picard import (
    DivergenceError, Problem, initial_condition_defect, iterate, kernel_integral, required_ghost,
)
from picardpde.problems import BUILTIN_IDS, builtin


def record(number, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {number} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def setup(id, p_max, n_t=None, n_x=None, ghost=None, domain=None, **overrides):
    bp = builtin(id, domain=domain)
    prob = bp.problem.replace(**overrides) if overrides else bp.problem
    ghost = required_ghost(prob, p_max) if ghost is None else ghost
    prob = prob.replace(domain=prob.domain.replace(ghost=ghost))
    return bp, prob, Grid(prob.domain, n_t or bp.n_t, n_x or bp.n_x)


def quiet_iterate(prob, grid, p_max, tol=1e-300):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return iterate(prob, grid, p_max, tol)


def sup_error(u, expr, grid):
    return float(np.max(np.abs(u.interior() - sample(expr, grid).interior())))


def regression(id, p_max, n_t, n_x, ghost):
    """Error of ``u_p`` against the exact solution, or ``None`` after divergence."""
    bp, prob, grid = setup(id, p_max, n_t, n_x, ghost)
    started = time.process_time()
    try:
        history = quiet_iterate(prob, grid, p_max)
    except DivergenceError as exc:
        return None, time.process_time() - started, exc.history.last.p, None
    elapsed = time.process_time() - started
    return sup_error(history.last.u, bp.exact, grid), elapsed, history.last.p, history


def fmt(err):
    return "diverged" if err is None else f"{err:.3e}"


# 1-4: regressions against closed-form solutions


def test_1_forced_heat_regression():
    err, secs, p, _ = regression("heat2d_forced", 6, 65, (33, 33), ghost=2)
    fine, _, _, _ = regression("heat2d_forced", 6, 129, (65, 65), ghost=2)
    ratio = err / fine if err is not None and fine else float("nan")
    auto, _, _, _ = regression("heat2d_forced", 6, 65, (33, 33), ghost=None)
    auto_fine, _, _, _ = regression("heat2d_forced", 6, 129, (65, 65), ghost=None)
    ok = err is not None and err <= 1e-3 and ratio >= 3.5 and secs <= 30
    record(1, "forced heat regression", ok,
           f"ghost=2 error {fmt(err)} (stopped at p={p}), refined {fmt(fine)}, ratio {ratio:.3g}, "
           f"cpu {secs:.1f}s; with auto ghost error {fmt(auto)}, refined {fmt(auto_fine)}")


def test_2_variable_coefficient_heat_regression():
    err, secs, p, history = regression("heat2d_varcoef", 8, 65, (33, 33), ghost=2)
    bp, _, grid = setup("heat2d_varcoef", 8, ghost=2)
    gap5 = sup_error(history[5].u, bp.iterate_expr(5), grid) if history is not None else None
    ok = err is not None and err <= 1e-4 and gap5 is not None and gap5 <= 1e-6
    record(2, "variable-coefficient heat regression", ok,
           f"error {fmt(err)} at p={p}, |u_5 - closed form| {fmt(gap5)}")


def test_3_nonlinear_wave_fixed_point():
    bp, prob, grid = setup("wave2d_nonlinear", 4, n_t=257)
    history = quiet_iterate(prob, grid, 4, tol=1e-9)
    gap = (history[2].u - history[1].u).sup() if len(history) > 2 else float("inf")
    ok = gap <= 1e-6 and history.stop_reason == "fixed_point" and history.last.p == 2
    record(3, "nonlinear wave fixed point", ok,
           f"|u_2 - u_1| {gap:.3e}, stop {history.stop_reason} at p={history.last.p}")


def test_4_three_dimensional_wave_regression():
    err, secs, p, _ = regression("wave3d_varcoef", 6, 65, (17, 17, 17), ghost=None)
    ok = err is not None and err <= 1e-3 and secs <= 120
    record(4, "3D wave regression", ok, f"error {fmt(err)} at p={p}, cpu {secs:.1f}s")


# 5-6: contraction and the a-priori bound on the derived time radius


def derived_interval_run(**problem_changes):
    cfg = builtin_config("heat2d_forced")
    cfg = replace(cfg, problem=replace(cfg.problem, t_lo=None, t_hi=None, **problem_changes))
    cfg = replace(cfg, run=replace(cfg.run, p_max=10, tol=1e-300))
    return execute(cfg)


def test_5_contraction():
    result = derived_interval_run()
    rep = result.report
    gamma = rep["constants"]["gamma"]
    ratios = [row["measured_ratio"] for row in rep["iterations"] if 2 <= row["p"] <= 6]
    ok = len(ratios) == 5 and max(ratios) <= gamma + 0.05 and gamma <= 0.5 + 1e-12
    record(5, "contraction", ok,
           f"t in [0, {rep['run']['t_hi']:.4g}], gamma {gamma:.4g}, max measured ratio {max(ratios):.3e}")


def test_6_error_bound_dominates():
    M = 2.5 * math.sinh(2) + 3
    result = derived_interval_run(M=M, L=1.0)
    rep = result.report
    gamma, R = rep["constants"]["gamma"], rep["constants"]["R"]
    last = result.history[10].u
    worst = 0.0
    ok = True
    for p in range(9):
        gap = (result.history[p].u - last).sup()
        bound = error_bound(R, gamma, p)
        worst = max(worst, gap / bound)
        ok = ok and gap <= bound
    record(6, "error bound dominates", ok,
           f"gamma {gamma:.4g} on [0, {rep['run']['t_hi']:.4g}], max gap/bound over p<=8 {worst:.3e}")


# 7: initial conditions are kept by every iterate


def test_7_initial_conditions_preserved():
    worst = {}
    for id in BUILTIN_IDS:
        bp, prob, grid = setup(id, 6)
        history = quiet_iterate(prob, grid, 6)
        worst[id] = max(max(initial_condition_defect(prob, s.u)) for s in history if s.p <= 6)
    ok = all(v <= 1e-6 for v in worst.values())
    record(7, "initial conditions preserved", ok,
           ", ".join(f"{id} {v:.2e}" for id, v in worst.items()))


# 8: constants


def test_8_constants():
    problems = []
    K_ok = all(compute_K(k, n, m) == brute_force_K(k, n, m)
               for k, n, m in itertools.product((1, 2, 3), (1, 2, 3), range(5)))
    if not K_ok:
        problems.append("K")

    s_half = math.sqrt(0.5)
    arithmetic = [
        (compute_delta(1, 1, 2), 0.5),
        (compute_delta(1, 2, 2), s_half),
        (compute_delta1(0.5, 1, 1, 2, 1), 0.25),
        (compute_delta1(s_half, 1, 2, 2, 1), s_half / 2),
        (compute_gamma(1, 0.25, 1), 0.25),
        (compute_gamma(0, 0.25, 1), 0.0),
        (compute_gamma(1, s_half / 2, 2), 0.125),
        (error_bound(1, 0.5, 3), 0.25),
        (error_bound(1, 0.5, 0), 2.0),
        (error_bound(2, 0.25, 2), 1 / 6),
    ]
    arith_ok = all(abs(got - want) <= 1e-12 for got, want in arithmetic)
    arith_ok = arith_ok and compute_delta(1, 1, 0) == math.inf
    arith_ok = arith_ok and compute_delta1(math.inf, 1, 1, 0, 0) == math.inf
    if not arith_ok:
        problems.append("arithmetic")

    samples = 10 ** 5
    d = Domain.unit_box(2)
    identity = Problem.from_text(1, 2, 2, "u", ["0"], d)
    cases = [("M of u on [-1, 2]", estimate_M(identity, {"u": (-1.0, 2.0)}, samples, inflation=1.0), 2.0)]
    for id, which, want in (("wave2d_nonlinear", "M", 19.0), ("heat2d_forced", "L", 1.0),
                            ("heat2d_varcoef", "L", 0.5)):
        prob = builtin(id).problem
        box = build_box(prob, Grid(prob.domain, 65, (33, 33)))
        est = estimate_M if which == "M" else estimate_L
        cases.append((f"{which} of {id}", est(prob, box, samples, inflation=1.0), want))
    sample_ok = all(abs(got - want) <= 0.1 * want for _, got, want in cases)
    if not sample_ok:
        problems.append("sampling")
    detail = "; ".join(f"{name} {got:.5g} vs {want:.5g}" for name, got, want in cases)
    record(8, "constants", not problems, f"K and arithmetic {'ok' if K_ok and arith_ok else 'bad'}; {detail}")


# 9: quadrature


def test_9_quadrature():
    worst = 0.0
    for n in (1, 2):
        for t_lo in (0.0, -1.0):
            grid = Grid(Domain(1, (0.0,), (1.0,), t_lo, 1.0), 33, (5,))
            t = grid.t[:, None]
            for degree in range(4):
                f = Field(grid, np.broadcast_to(t ** degree, grid.shape))
                exact = t ** (degree + n) * math.factorial(degree) / math.factorial(degree + n)
                got = kernel_integral(f, n).values
                worst = max(worst, float(np.max(np.abs(got - exact)) / np.max(np.abs(exact))))
    grid = Grid(Domain(1, (0.0,), (1.0,), 0.0, 1.0), 1025, (5,))
    f = Field(grid, np.broadcast_to(30 * grid.t[:, None] ** 4, grid.shape))
    quartic = float(kernel_integral(f, 2).values[-1, 0])
    ok = worst <= 1e-13 and abs(quartic - 1.0) <= 1e-10
    record(9, "quadrature", ok, f"cubic relative error {worst:.2e}, quartic integral - 1 = {quartic - 1:.2e}")


# 10: determinism


@functools.lru_cache(maxsize=None)
def cli_outputs(tmp_root, threads, tag):
    from pathlib import Path
    root = Path(tmp_root)
    config = root / "forced.ini"
    main(["export", "heat2d_forced", str(config)])
    text = config.read_text().replace("dump_fields = none", "dump_fields = all")
    config.write_text(text)
    out = root / f"out_{tag}"
    main(["run", str(config), "--threads", str(threads), "--out", str(out), "--quiet"])
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "timing.json")
    return {str(p.relative_to(out)): p.read_bytes() for p in files}


def test_10_determinism(tmp_path):
    a = cli_outputs(str(tmp_path), 1, "a")
    b = cli_outputs(str(tmp_path), 1, "b")
    c = cli_outputs(str(tmp_path), 8, "c")
    ok = bool(a) and a == b == c and json.loads(a["report.json"])["iterations"]
    record(10, "determinism", bool(ok), f"{len(a)} files compared across two 1-thread runs and one 8-thread run")
