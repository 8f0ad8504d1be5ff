import warnings

import numpy as np
import pytest

from picardpde.expr import parse
from picardpde.mesh import Domain, Grid, sample
from picardpde.picard import Problem, iterate, required_ghost
from picardpde.problems import BUILTIN_IDS, BuiltinProblem, builtin, verify_exact


def test_builtin_ids():
    assert BUILTIN_IDS == ("heat2d_forced", "heat2d_varcoef", "wave2d_nonlinear", "wave3d_varcoef")


def test_unknown_builtin():
    with pytest.raises(KeyError):
        builtin("heat9d")


@pytest.mark.parametrize("id", BUILTIN_IDS)
def test_builtin_fields(id):
    bp = builtin(id)
    assert isinstance(bp, BuiltinProblem)
    prob = bp.problem
    assert prob.R == 1.0
    assert prob.domain.lo == (0.0,) * prob.k and prob.domain.hi == (1.0,) * prob.k
    assert (prob.domain.t_lo, prob.domain.t_hi) == (0.0, 0.5)
    assert len(bp.n_x) == prob.k
    assert bp.iterate_expr(0) is not None and bp.iterate_expr(99) is None


def test_builtin_respects_radius_and_domain():
    d = Domain.unit_box(2, t_hi=0.25)
    bp = builtin("heat2d_varcoef", R=2.0, domain=d)
    assert bp.problem.R == 2.0 and bp.problem.domain.t_hi == 0.25


@pytest.mark.parametrize("id", BUILTIN_IDS)
def test_exact_solutions_satisfy_the_problem(id):
    report = verify_exact(builtin(id))
    assert report.ok(1e-10), report


def test_zero_problem_has_zero_solution():
    d = Domain.unit_box(1)
    prob = Problem.from_text(1, 1, 1, "0", ["0"], d, exact="0")
    report = verify_exact(prob)
    assert report.pde_residual == 0.0 and report.ic_residuals == (0.0,)


def test_wrong_solution_is_detected():
    bp = builtin("heat2d_varcoef")
    wrong = parse("x^2*cosh(t) + y^2*sinh(t)", 2)
    assert not verify_exact(bp, exact=wrong).ok()


def run_builtin(id, p_max, n_t=None, n_x=None):
    bp = builtin(id)
    prob = bp.problem
    prob = prob.replace(domain=prob.domain.replace(ghost=required_ghost(prob, p_max)))
    grid = Grid(prob.domain, n_t or bp.n_t, n_x or bp.n_x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return bp, grid, iterate(prob, grid, p_max, tol=1e-300 if id != "wave2d_nonlinear" else 1e-6)


def iterate_gaps(id, p_max, **kw):
    bp, grid, history = run_builtin(id, p_max, **kw)
    gaps = {}
    for p, e in bp.printed_iterates:
        if p < len(history):
            gaps[p] = float(np.max(np.abs(history[p].u.interior() - sample(e, grid).interior())))
    return gaps


@pytest.mark.parametrize("id, p_max, kw", [
    ("heat2d_forced", 5, {}),
    ("heat2d_varcoef", 5, {}),
    ("wave2d_nonlinear", 2, {}),
    ("wave3d_varcoef", 2, {"n_x": (9, 9, 9)}),
])
def test_closed_form_iterates_are_reproduced(id, p_max, kw):
    gaps = iterate_gaps(id, p_max, **kw)
    assert set(gaps) == set(range(p_max + 1))
    assert max(gaps.values()) <= 1e-8, gaps


def test_iterate_gap_shrinks_with_time_resolution():
    # a non-polynomial time dependence leaves a quadrature error that falls off quickly
    coarse = iterate_gaps("heat2d_forced", 3, n_t=9, n_x=(17, 17))[3]
    fine = iterate_gaps("heat2d_forced", 3, n_t=17, n_x=(17, 17))[3]
    assert fine < coarse or fine <= 1e-13
