"""Picard iteration ``u_p = T u_{p-1}`` for ``d^n u / dt^n = F(t, x, u, derivatives of u)``.

The operator is

    T u (t, x) = u0(t, x) + int_0^t (t - s)^(n-1) / (n-1)! F(s, x, u, ...) ds

with ``u0`` the Taylor polynomial of the initial data. Iterates live on a
:class:`~picardpde.mesh.Grid`; derivatives of the previous iterate come from
finite differences and the time integral from product quadrature weights.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import expr as ex
from .expr import Expr, ExprDomainError, ExprError, evaluate, free_vars, parse, placeholder_orders
from .mesh import Domain, Field, Grid, cn_norm, derivative_values, fd_derivative, sample, stencil_radius

log = logging.getLogger(__name__)

__all__ = [
    "Problem", "ProblemError", "EvaluationError", "DivergenceError",
    "BallEscapeWarning", "RimContaminationWarning",
    "IterationState", "IterationHistory",
    "u0_expr", "build_u0", "build_u0_bar", "kernel_weights", "kernel_integral",
    "apply_T", "iterate", "initial_condition_defect", "evaluate_F", "required_ghost", "stencil_reach", "DEFAULT_SCHEME",
]

CHUNK_COLUMNS = 8192
DEFAULT_SCHEME = "composed"


class ProblemError(ValueError):
    pass


class EvaluationError(RuntimeError):
    """F (or the result of T) could not be evaluated at some node."""

    def __init__(self, message: str, coords: dict | None = None):
        super().__init__(message)
        self.coords = coords


class DivergenceError(RuntimeError):
    def __init__(self, message: str, history: "IterationHistory"):
        super().__init__(message)
        self.history = history


class BallEscapeWarning(UserWarning):
    pass


class RimContaminationWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class Problem:
    """Initial value problem ``d^n u/dt^n = F`` with ``d^(i-1)u/dt^(i-1)(0, x) = c[i-1](x)``.

    ``G`` and ``g`` optionally split ``F = G + g`` with ``g`` free of the
    unknown; the iteration then starts from the improved first guess.
    """

    n: int
    m: int
    k: int
    F: Expr
    c: tuple
    domain: Domain
    R: float = 1.0
    G: Expr | None = None
    g: Expr | None = None
    exact: Expr | None = None
    L_override: float | None = None
    M_override: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(self.c))
        object.__setattr__(self, "R", float(self.R))
        if self.n < 1 or self.m < 0 or self.k < 1:
            raise ProblemError("need n >= 1, m >= 0, k >= 1")
        if self.domain.k != self.k:
            raise ProblemError("domain dimension does not match k")
        if len(self.c) != self.n:
            raise ProblemError(f"need {self.n} initial functions, got {len(self.c)}")
        if self.R <= 0:
            raise ProblemError("ball radius R must be positive")
        allowed = {"t", *self.domain.axis_names}
        for name in ex.placeholders(self.F):
            a0, alpha = placeholder_orders(name, self.k)
            if a0 >= self.n or a0 + sum(alpha) > self.m:
                raise ProblemError(f"F uses {name}, outside the orders allowed for n={self.n}, m={self.m}")
        if not free_vars(self.F) - ex.placeholders(self.F) <= allowed:
            raise ProblemError(f"F has unknown variables {sorted(free_vars(self.F) - allowed)}")
        for i, ci in enumerate(self.c, start=1):
            bad = free_vars(ci) - set(self.domain.axis_names)
            if bad:
                raise ProblemError(f"initial function c{i} may depend on space only, found {sorted(bad)}")
        if self.exact is not None and not free_vars(self.exact) <= allowed:
            raise ProblemError("exact solution may depend on t and space only")
        if (self.G is None) != (self.g is None):
            raise ProblemError("a split needs both G and g")
        if self.g is not None:
            if not free_vars(self.g) <= allowed:
                raise ProblemError("forcing g may depend on t and space only")
            self._check_split()
        for name in ("L_override", "M_override"):
            value = getattr(self, name)
            if value is not None and not value >= 0:
                raise ProblemError(f"{name} must be nonnegative")

    def _check_split(self):
        rng = np.random.default_rng(12345)
        d = self.domain
        env = {"t": rng.uniform(d.t_lo, d.t_hi, 64)}
        for name, a, b in zip(d.axis_names, d.lo, d.hi):
            env[name] = rng.uniform(a, b, 64)
        for name in sorted(ex.placeholders(self.F) | ex.placeholders(self.G)):
            env[name] = rng.uniform(-1.0, 1.0, 64)
        try:
            full = np.broadcast_to(evaluate(self.F, env), (64,))
            parts = np.broadcast_to(evaluate(self.G, env), (64,)) + np.broadcast_to(evaluate(self.g, env), (64,))
        except ExprError as exc:
            raise ProblemError(f"cannot check F = G + g: {exc}") from exc
        if not np.all(np.abs(full - parts) <= 1e-12 * np.maximum(1.0, np.abs(full))):
            raise ProblemError("F differs from G + g")

    @classmethod
    def from_text(cls, n: int, m: int, k: int, F: str, c: Sequence[str], domain: Domain,
                  R: float = 1.0, G: str | None = None, g: str | None = None,
                  exact: str | None = None, **overrides) -> "Problem":
        def p(text, **kw):
            return None if text is None else parse(text, k, **kw)
        return cls(n=n, m=m, k=k, F=p(F, n=n, m=m), c=tuple(p(ci) for ci in c), domain=domain,
                   R=R, G=p(G, n=n, m=m), g=p(g), exact=p(exact), **overrides)

    @property
    def N(self) -> int:
        return max(self.m, self.n)

    @property
    def has_split(self) -> bool:
        return self.g is not None

    def replace(self, **changes) -> "Problem":
        values = {name: getattr(self, name) for name in (
            "n", "m", "k", "F", "c", "domain", "R", "G", "g", "exact", "L_override", "M_override")}
        values.update(changes)
        return Problem(**values)


@dataclass
class IterationState:
    p: int
    u: Field = dc_field(repr=False)
    increment_norm: float
    measured_ratio: float | None
    increment_sup: float
    increment_cn: float
    ball_escape: bool = False


@dataclass
class IterationHistory:
    """Iteration records in order of ``p`` plus why the loop stopped."""

    states: list = dc_field(default_factory=list)
    stop_reason: str = ""
    warnings: list = dc_field(default_factory=list)

    def __iter__(self):
        return iter(self.states)

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        return self.states[i]

    @property
    def last(self) -> IterationState:
        return self.states[-1]


# --------------------------------------------------------------------------
# starting functions


def u0_expr(prob: Problem) -> Expr:
    """Taylor polynomial ``sum_i c_i(x) t^(i-1)/(i-1)!`` as an expression."""
    total: Expr | None = None
    for i, ci in enumerate(prob.c):
        if isinstance(ci, ex.Const) and ci.value == 0.0:
            continue
        term = ci
        if i > 0:
            power = ex.Var("t") if i == 1 else ex.Binary("^", ex.Var("t"), ex.Const(float(i)))
            term = ex.Binary("*", ci, power)
            if i > 1:
                term = ex.Binary("/", term, ex.Const(float(math.factorial(i))))
        total = term if total is None else ex.Binary("+", total, term)
    return ex.Const(0.0) if total is None else total


def build_u0(prob: Problem, grid: Grid) -> Field:
    return sample(u0_expr(prob), grid)


def build_u0_bar(prob: Problem, grid: Grid, threads: int = 1) -> Field:
    """``u0`` plus the kernel integral of the forcing ``g``."""
    if not prob.has_split:
        raise ProblemError("problem has no F = G + g split")
    return build_u0(prob, grid) + kernel_integral(sample(prob.g, grid), prob.n, threads)


# --------------------------------------------------------------------------
# quadrature


def _gauss01(points: int):
    x, w = np.polynomial.legendre.leggauss(points)
    return (x + 1.0) / 2.0, w / 2.0


def _lagrange4(q: np.ndarray) -> np.ndarray:
    """Cubic Lagrange basis on nodes 0, 1, 2, 3, evaluated at ``q``."""
    return np.stack([
        -(q - 1) * (q - 2) * (q - 3) / 6.0,
        q * (q - 2) * (q - 3) / 2.0,
        -q * (q - 1) * (q - 3) / 2.0,
        q * (q - 1) * (q - 2) / 6.0,
    ], axis=-1)


@lru_cache(maxsize=32)
def _kernel_matrix(n_t: int, zero: int, dt: float, n: int) -> np.ndarray:
    tau, wg = _gauss01(n // 2 + 2)
    norm = dt ** n / math.factorial(n - 1)
    W = np.zeros((n_t, n_t))
    for j in range(n_t):
        if j == zero:
            continue
        lo, hi = min(j, zero), max(j, zero)
        sign = 1.0 if j > zero else -1.0
        # stay inside [0, t_j] when it holds a full cubic stencil
        rlo, rhi = (lo, hi) if hi - lo >= 3 else (0, n_t - 1)
        a = np.arange(lo, hi)
        start = np.clip(a - 1, rlo, rhi - 3)
        xi = a[:, None] + tau[None, :]                       # (intervals, gauss)
        kern = (j - xi) ** (n - 1)
        basis = _lagrange4(xi - start[:, None])              # (intervals, gauss, 4)
        contrib = np.einsum("g,ig,igr->ir", wg, kern, basis) * (sign * norm)
        np.add.at(W[j], (start[:, None] + np.arange(4)[None, :]).ravel(), contrib.ravel())
    W.setflags(write=False)
    return W


def kernel_weights(grid: Grid, n: int) -> np.ndarray:
    """Matrix ``W`` with ``(W @ f)[j] ~ int_0^{t_j} (t_j - s)^(n-1)/(n-1)! f(s) ds``.

    ``f`` is replaced by its local cubic interpolant on each time step and
    the kernel times the interpolant is integrated exactly, so the result is
    exact for ``f`` of degree <= 3 and fourth-order accurate otherwise.
    """
    if n < 1:
        raise ValueError("time order n must be >= 1")
    return _kernel_matrix(grid.n_t, grid.zero_index, grid.dt, n)


def _map_columns(W: np.ndarray, flat: np.ndarray, threads: int) -> np.ndarray:
    out = np.empty_like(flat)
    spans = [(s, min(s + CHUNK_COLUMNS, flat.shape[1])) for s in range(0, flat.shape[1], CHUNK_COLUMNS)]

    def work(span):
        a, b = span
        out[:, a:b] = W @ flat[:, a:b]

    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, spans))
    else:
        for span in spans:
            work(span)
    return out


def kernel_integral(f: Field, n: int, threads: int = 1) -> Field:
    """Apply the kernel integral in time at every spatial node of ``f``."""
    W = kernel_weights(f.grid, n)
    flat = np.ascontiguousarray(f.values.reshape(f.grid.n_t, -1))
    return Field(f.grid, _map_columns(W, flat, threads).reshape(f.grid.shape))


# --------------------------------------------------------------------------
# operator


def stencil_reach(prob: Problem, scheme: str = DEFAULT_SCHEME) -> int:
    """Spatial layers a single application of T spoils at the grid rim."""
    reach = 0
    for name in ex.placeholders(prob.F):
        _, alpha = placeholder_orders(name, prob.k)
        for order in alpha:
            reach = max(reach, stencil_radius(order, scheme))
    return reach


def required_ghost(prob: Problem, p_max: int, scheme: str = DEFAULT_SCHEME) -> int:
    """Ghost layers keeping the box free of rim stencils for ``p_max`` iterations.

    ``N`` extra layers keep the derivatives in the discrete ``C^N`` norm
    from reading spoiled rim values as well.
    """
    return prob.N + p_max * stencil_reach(prob, scheme)


def _placeholder_arrays(prob: Problem, u: Field, threads: int, scheme: str) -> dict[str, np.ndarray]:
    names = sorted(ex.placeholders(prob.F))
    orders = {name: placeholder_orders(name, prob.k) for name in names}
    cache: dict = {(0, (0,) * prob.k): u.values}
    # spatial chains first so mixed t-derivatives reuse them
    spatial = sorted({alpha for _, alpha in orders.values()})

    def spatial_work(alpha):
        return alpha, derivative_values(u, 0, alpha, scheme=scheme)

    if threads > 1 and len(spatial) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(spatial_work, spatial))
    else:
        results = [spatial_work(alpha) for alpha in spatial]
    for alpha, values in results:
        cache[(0, alpha)] = values
    return {name: derivative_values(u, *orders[name], cache=cache, scheme=scheme) for name in names}


def evaluate_F(prob: Problem, u: Field, threads: int = 1, expr: Expr | None = None,
               scheme: str = DEFAULT_SCHEME) -> Field:
    """``F`` (or ``expr``) evaluated with the derivatives of ``u`` plugged in."""
    e = prob.F if expr is None else expr
    grid = u.grid
    env = dict(grid.coordinates())
    env.update(_placeholder_arrays(prob, u, threads, scheme))
    try:
        values = evaluate(e, env)
    except ExprDomainError as exc:
        where = _coords_of(grid, exc.index)
        raise EvaluationError(f"F failed: {exc} at {where}", where) from exc
    values = np.broadcast_to(np.asarray(values, dtype=np.float64), grid.shape)
    bad = ~np.isfinite(values)
    if np.any(bad):
        where = _coords_of(grid, tuple(int(i) for i in np.argwhere(bad)[0]))
        raise EvaluationError(f"F is not finite at {where}", where)
    return Field(grid, values)


def _coords_of(grid: Grid, index) -> dict | None:
    if index is None:
        return None
    names = ("t",) + grid.domain.axis_names
    nodes = (grid.t,) + grid.axes
    return {name: float(arr[i]) for name, arr, i in zip(names, nodes, index) if len(arr) > 1 and i < len(arr)}


def apply_T(prob: Problem, u_prev: Field, u0: Field | None = None, threads: int = 1,
            scheme: str = DEFAULT_SCHEME) -> Field:
    """One application of the Picard operator to ``u_prev``."""
    grid = u_prev.grid
    if u0 is None:
        u0 = build_u0(prob, grid)
    integrand = evaluate_F(prob, u_prev, threads, scheme=scheme)
    W = kernel_weights(grid, prob.n)
    flat = np.ascontiguousarray(integrand.values.reshape(grid.n_t, -1))
    values = u0.values + _map_columns(W, flat, threads).reshape(grid.shape)
    bad = ~np.isfinite(values)
    if np.any(bad):
        where = _coords_of(grid, tuple(int(i) for i in np.argwhere(bad)[0]))
        raise EvaluationError(f"T u is not finite at {where}", where)
    result = Field(grid, values)
    if float(np.max(np.abs(values - u0.values)[grid.interior])) > prob.R:
        warnings.warn("T u left the ball of radius R around u0; the time interval may be too long",
                      BallEscapeWarning, stacklevel=2)
    return result


# --------------------------------------------------------------------------
# driver


def iterate(prob: Problem, grid: Grid, p_max: int, tol: float, norm_kind: str = "sup",
            threads: int = 1, scheme: str = DEFAULT_SCHEME) -> IterationHistory:
    """Run ``u_p = T u_{p-1}`` until the increment drops to ``tol`` or ``p = p_max``.

    The record with ``p = 0`` holds the starting function: the improved
    first guess when ``F = G + g`` is split, ``u0`` otherwise. Its
    ``increment_norm`` is the distance between that start and ``u0``.

    ``scheme`` selects the finite-difference stencils for the derivatives
    of the previous iterate (see :func:`~picardpde.mesh.fd_derivative`).

    Raises
    ------
    DivergenceError
        When the increment grew three times in a row and exceeds ``10 R``.
    """
    if p_max < 1:
        raise ValueError("p_max must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if norm_kind not in ("sup", "cN"):
        raise ValueError("norm_kind must be 'sup' or 'cN'")
    if grid.domain.k != prob.k:
        raise ProblemError("grid dimension does not match the problem")

    N = prob.N
    u0 = build_u0(prob, grid)
    start = build_u0_bar(prob, grid, threads) if prob.has_split else u0
    history = IterationHistory()
    diff0 = start - u0
    history.states.append(IterationState(
        p=0, u=start, increment_norm=_norm(diff0, norm_kind, N), measured_ratio=None,
        increment_sup=diff0.sup(), increment_cn=cn_norm(diff0, N)))

    reach = stencil_reach(prob, scheme)
    warned_rim = False
    growth = 0
    u = start
    for p in range(1, p_max + 1):
        if not warned_rim and p * reach > grid.ghost:
            message = (f"iteration {p}: one-sided rim stencils reach the box "
                       f"(ghost={grid.ghost}, needs {p * reach})")
            warnings.warn(message, RimContaminationWarning, stacklevel=2)
            history.warnings.append(message)
            warned_rim = True
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", BallEscapeWarning)
            new = apply_T(prob, u, u0, threads, scheme)
        escaped = any(issubclass(w.category, BallEscapeWarning) for w in caught)
        delta = new - u
        inc_sup = delta.sup()
        inc_cn = cn_norm(delta, N)
        inc = inc_sup if norm_kind == "sup" else inc_cn
        prev = history.states[-1].increment_norm
        ratio = inc / prev if p >= 2 and prev > 0 else None
        history.states.append(IterationState(p, new, inc, ratio, inc_sup, inc_cn, escaped))
        if escaped:
            history.warnings.append(f"iteration {p}: left the ball of radius R around u0")
        log.debug("p=%d increment=%.3e ratio=%s", p, inc, ratio)
        u = new
        if inc <= tol:
            history.stop_reason = "fixed_point"
            return history
        growth = growth + 1 if p >= 2 and inc > prev else 0
        if growth >= 3 and inc > 10 * prob.R:
            history.stop_reason = "diverged"
            raise DivergenceError(
                f"increment grew for {growth} steps to {inc:.3e} > 10 R; "
                "try a shorter time interval (smaller delta1)", history)
    history.stop_reason = "max_iterations"
    return history


def initial_condition_defect(prob: Problem, u: Field, accuracy: int = 6) -> list[float]:
    """``max_x |d^(i-1)u/dt^(i-1)(0, x) - c_i(x)|`` for ``i = 1..n`` over the box nodes.

    Time derivatives come from finite differences of the given ``accuracy``;
    the default keeps the truncation error far below the values of interest
    on moderate grids.
    """
    grid = u.grid
    j0 = grid.zero_index
    coords = grid.coordinates()
    space = (slice(None),) * grid.k
    out = []
    for i, ci in enumerate(prob.c):
        d = u if i == 0 else fd_derivative(u, "t", i, accuracy=accuracy)
        target = np.broadcast_to(evaluate(ci, coords), grid.shape)
        gap = np.abs(d.values[(j0,) + space] - target[(j0,) + space])
        out.append(float(np.max(gap[grid.interior[1:]])))
    return out


def _norm(f: Field, kind: str, N: int) -> float:
    return f.sup() if kind == "sup" else cn_norm(f, N)
