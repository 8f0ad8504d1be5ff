"""Built-in benchmark problems with closed-form solutions and known iterates.

Every entry carries the exact solution and the closed-form Picard iterates
``(p, u_p)`` obtained by symbolic iteration, which serve as regression
oracles for the numerical iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .expr import Expr, evaluate, parse
from .mesh import Domain
from .picard import Problem

__all__ = ["BuiltinProblem", "ResidualReport", "BUILTIN_IDS", "builtin", "verify_exact"]


@dataclass(frozen=True)
class BuiltinProblem:
    id: str
    problem: Problem
    exact: Expr
    printed_iterates: tuple
    n_t: int = 65
    n_x: tuple = (33, 33)
    p_max: int = 8
    description: str = ""

    def iterate_expr(self, p: int) -> Expr | None:
        for q, e in self.printed_iterates:
            if q == p:
                return e
        return None


_S = "sinh(x+y)"

_SPECS = {
    "heat2d_forced": dict(
        description="2D heat-type equation with forcing, u_t = u_xx - u_yy - u + (1+t) sinh(x+y)",
        n=1, m=2, k=2,
        F="u_xx - u_yy - u + (1+t)*sinh(x+y)",
        G="u_xx - u_yy - u", g="(1+t)*sinh(x+y)",
        c=["sinh(x+y)"],
        exact="(t+exp(-t))*sinh(x+y)",
        p_max=8,
        iterates=[
            (0, f"{_S}*(1 + t + t^2/2)"),
            (1, f"{_S}*(1 - t^3/6)"),
            (2, f"{_S}*(1 + t^2/2 + t^4/24)"),
            (3, f"{_S}*(1 + t^2/2 - t^3/6 - t^5/120)"),
            (4, f"{_S}*(1 + t^2/2 - t^3/6 + t^4/24 + t^6/720)"),
            (5, f"{_S}*(1 + t^2/2 - t^3/6 + t^4/24 - t^5/120 - t^7/5040)"),
        ],
    ),
    "heat2d_varcoef": dict(
        description="2D heat-type equation with variable coefficients, u_t = (y^2 u_xx + x^2 u_yy)/2",
        n=1, m=2, k=2,
        F="(y^2/2)*u_xx + (x^2/2)*u_yy",
        c=["y^2"],
        exact="y^2*cosh(t) + x^2*sinh(t)",
        p_max=8,
        iterates=[
            (0, "y^2"),
            (1, "y^2 + x^2*t"),
            (2, "y^2*(1 + t^2/2) + x^2*t"),
            (3, "y^2*(1 + t^2/2) + x^2*(t + t^3/6)"),
            (4, "y^2*(1 + t^2/2 + t^4/24) + x^2*(t + t^3/6)"),
            (5, "y^2*(1 + t^2/2 + t^4/24) + x^2*(t + t^3/6 + t^5/120)"),
        ],
    ),
    "wave2d_nonlinear": dict(
        description="2D nonlinear wave-type equation, u_tt = 2x^2 + 2y^2 + 15/2 (x u_xx^2 + y u_yy^2)",
        n=2, m=2, k=2,
        F="(15/2)*x*u_xx^2 + (15/2)*y*u_yy^2 + 2*x^2 + 2*y^2",
        G="(15/2)*x*u_xx^2 + (15/2)*y*u_yy^2", g="2*x^2 + 2*y^2",
        c=["0", "0"],
        exact="t^2*(x^2+y^2) + t^6*(x+y)",
        n_t=257,
        p_max=4,
        iterates=[
            (0, "t^2*(x^2+y^2)"),
            (1, "t^2*(x^2+y^2) + t^6*(x+y)"),
            (2, "t^2*(x^2+y^2) + t^6*(x+y)"),
        ],
    ),
    "wave3d_varcoef": dict(
        description="3D wave-type equation with variable coefficients, "
                    "u_tt = (x^2 u_xx + y^2 u_yy + z^2 u_zz)/2 + x^2 + y^2 + z^2",
        n=2, m=2, k=3,
        F="(x^2*u_xx + y^2*u_yy + z^2*u_zz)/2 + x^2 + y^2 + z^2",
        G="(x^2*u_xx + y^2*u_yy + z^2*u_zz)/2", g="x^2 + y^2 + z^2",
        c=["0", "x^2 + y^2 - z^2"],
        exact="(x^2+y^2)*exp(t) + z^2*exp(-t) - (x^2+y^2+z^2)",
        n_x=(17, 17, 17),
        p_max=6,
        iterates=[
            (0, "t*(x^2+y^2-z^2) + t^2/2*(x^2+y^2+z^2)"),
            (1, "(x^2+y^2)*(t + t^2/2 + t^3/6 + t^4/24) + z^2*(-t + t^2/2 - t^3/6 + t^4/24)"),
            (2, "(x^2+y^2)*(t + t^2/2 + t^3/6 + t^4/24 + t^5/120 + t^6/720)"
                " + z^2*(-t + t^2/2 - t^3/6 + t^4/24 - t^5/120 + t^6/720)"),
        ],
    ),
}

BUILTIN_IDS = tuple(_SPECS)


def builtin(id: str, R: float = 1.0, domain: Domain | None = None) -> BuiltinProblem:
    """Built-in problem ``id`` on ``[0, 1]^k x [0, 0.5]`` with ball radius ``R``."""
    if id not in _SPECS:
        raise KeyError(f"unknown builtin {id!r}; choose from {', '.join(BUILTIN_IDS)}")
    s = _SPECS[id]
    k = s["k"]
    if domain is None:
        domain = Domain.unit_box(k)
    prob = Problem.from_text(s["n"], s["m"], k, s["F"], s["c"], domain, R=R,
                             G=s.get("G"), g=s.get("g"), exact=s["exact"])
    iterates = tuple((p, parse(text, k)) for p, text in s["iterates"])
    return BuiltinProblem(id=id, problem=prob, exact=prob.exact, printed_iterates=iterates,
                          n_t=s.get("n_t", 65), n_x=s.get("n_x", (33,) * k), p_max=s["p_max"],
                          description=s["description"])


@dataclass(frozen=True)
class ResidualReport:
    pde_residual: float
    ic_residuals: tuple
    points: int

    def ok(self, tol: float = 1e-6) -> bool:
        return self.pde_residual <= tol and all(r <= tol for r in self.ic_residuals)


def _derivative(e: Expr, a0: int, alpha: tuple[int, ...], names: tuple[str, ...]) -> Expr:
    for _ in range(a0):
        e = ex.diff(e, "t")
    for name, order in zip(names, alpha):
        for _ in range(order):
            e = ex.diff(e, name)
    return e


def verify_exact(bp: BuiltinProblem | Problem, exact: Expr | None = None, points: int = 64,
                 seed: int = 7) -> ResidualReport:
    """Residuals of the PDE and the initial conditions for the exact solution.

    All derivatives of the exact solution are taken symbolically and the
    residuals are evaluated at ``points`` random points of the problem's
    space-time box (and of the space box at ``t = 0``).
    """
    prob = bp.problem if isinstance(bp, BuiltinProblem) else bp
    if exact is None:
        exact = bp.exact if isinstance(bp, BuiltinProblem) else prob.exact
    if exact is None:
        raise ValueError("no exact solution to verify")
    d = prob.domain
    names = d.axis_names
    rng = np.random.default_rng(seed)
    env = {"t": rng.uniform(d.t_lo, d.t_hi, points)}
    for name, a, b in zip(names, d.lo, d.hi):
        env[name] = rng.uniform(a, b, points)

    for name in ex.placeholders(prob.F):
        a0, alpha = ex.placeholder_orders(name, prob.k)
        env[name] = np.broadcast_to(evaluate(_derivative(exact, a0, alpha, names), env), (points,))
    lhs = evaluate(_derivative(exact, prob.n, (0,) * prob.k, names), env)
    rhs = evaluate(prob.F, env)
    pde = float(np.max(np.abs(np.broadcast_to(lhs - rhs, (points,)))))

    env0 = dict(env, t=np.zeros(points))
    ic = []
    for i, ci in enumerate(prob.c):
        got = evaluate(_derivative(exact, i, (0,) * prob.k, names), env0)
        want = evaluate(ci, env0)
        ic.append(float(np.max(np.abs(np.broadcast_to(got - want, (points,))))))
    return ResidualReport(pde_residual=pde, ic_residuals=tuple(ic), points=points)
