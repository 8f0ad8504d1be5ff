"""Constants behind the local existence result and the a-priori error bound.

The quantities are

* ``K``: number of derivative arguments of ``F``,
* the box of admissible argument values around the derivatives of ``u0``,
* ``M = sup |F|`` and the Lipschitz constant ``L`` over that box,
* the time radii ``delta`` and ``delta1`` and the contraction factor
  ``gamma = L delta1^n / (n-1)!``,
* the bound ``R gamma^p / (1 - gamma)`` on the distance of ``u_p`` from the
  solution.

``M`` and ``L`` are estimated by sampling (Latin hypercube plus the corners of
the sampled box), unless the problem carries overrides.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from . import expr as ex
from .expr import ExprDomainError, evaluate, placeholder_name
from .mesh import Grid, derivative_values, multi_indices
from .picard import EvaluationError, Problem, build_u0, build_u0_bar, u0_expr

__all__ = [
    "ConstantsReport", "compute_K", "brute_force_K", "build_box", "estimate_M", "estimate_L",
    "compute_delta", "compute_delta1", "compute_gamma", "error_bound", "compute_constants",
    "INFLATION", "DEFAULT_SAMPLES", "DEFAULT_SEED",
]

INFLATION = 1.1
DEFAULT_SAMPLES = 20000
DEFAULT_SEED = 20240611
BATCH = 4096
MAX_CORNER_DIMS = 12
# relative step of the nearby partner used for local difference quotients
NEAR_STEP = 1e-4


# --------------------------------------------------------------------------
# argument count


def compute_K(k: int, n: int, m: int) -> int:
    """Number of derivative arguments ``F`` may depend on.

    For ``m < n`` this is ``((k+1)^(m+1) - 1)/k``. For ``m >= n`` it is
    ``((k+1)^(n-1) - 1)/k + (k+1)^(n-1) (k^(m-n+2) - 1)/(k-1)``, where the
    last geometric sum becomes ``m - n + 2`` terms when ``k = 1``.
    """
    if k < 1 or n < 1 or m < 0:
        raise ValueError("need k >= 1, n >= 1, m >= 0")
    if m < n:
        return ((k + 1) ** (m + 1) - 1) // k
    head = ((k + 1) ** (n - 1) - 1) // k
    tail_terms = m - n + 2 if k == 1 else (k ** (m - n + 2) - 1) // (k - 1)
    return head + (k + 1) ** (n - 1) * tail_terms


def brute_force_K(k: int, n: int, m: int) -> int:
    """Count ordered derivative tuples directly.

    Arguments are words over the ``k + 1`` directions ``t, x1, ..., xk``.
    With ``m < n`` every word of length ``<= m`` counts. With ``m >= n``
    words of length ``<= n - 2`` use all directions, and longer ones are a
    word of length ``n - 1`` over all directions followed by up to
    ``m - n + 1`` spatial directions.
    """
    directions = range(k + 1)
    count = 0
    if m < n:
        for length in range(m + 1):
            count += sum(1 for _ in itertools.product(directions, repeat=length))
        return count
    for length in range(n - 1):
        count += sum(1 for _ in itertools.product(directions, repeat=length))
    for extra in range(m - n + 2):
        for head in itertools.product(directions, repeat=n - 1):
            count += sum(1 for _ in itertools.product(range(1, k + 1), repeat=extra))
    return count


# --------------------------------------------------------------------------
# box


def _allowed_indices(prob: Problem):
    for a0, alpha in multi_indices(prob.k, prob.m, prob.n - 1):
        yield a0, alpha


def build_box(prob: Problem, grid: Grid, center: str = "u0") -> dict[str, tuple[float, float]]:
    """Intervals ``[min D u0 - R, max D u0 + R]`` for every allowed derivative ``D``.

    Derivatives with t-order below ``n`` and total order up to ``m`` are
    included. Minima and maxima are taken over the non-ghost grid nodes.

    Parameters
    ----------
    center : {"u0", "u0_bar"}
        ``"u0"`` differentiates the Taylor polynomial of the initial data
        symbolically. ``"u0_bar"`` centres the box on the improved start of
        a split problem, whose derivatives come from finite differences.
    """
    if center not in ("u0", "u0_bar"):
        raise ValueError("center must be 'u0' or 'u0_bar'")
    R = prob.R
    box: dict[str, tuple[float, float]] = {}
    if center == "u0":
        base = u0_expr(prob)
        coords = grid.coordinates()
        for a0, alpha in _allowed_indices(prob):
            e = base
            for _ in range(a0):
                e = ex.diff(e, "t")
            for name, order in zip(grid.domain.axis_names, alpha):
                for _ in range(order):
                    e = ex.diff(e, name)
            values = np.broadcast_to(evaluate(e, coords), grid.shape)[grid.interior]
            box[placeholder_name(a0, alpha)] = (float(values.min()) - R, float(values.max()) + R)
        return box
    start = build_u0_bar(prob, grid) if prob.has_split else build_u0(prob, grid)
    cache: dict = {}
    for a0, alpha in _allowed_indices(prob):
        values = derivative_values(start, a0, alpha, cache=cache)[grid.interior]
        box[placeholder_name(a0, alpha)] = (float(values.min()) - R, float(values.max()) + R)
    return box


# --------------------------------------------------------------------------
# sampling of M and L


def _sample_axes(prob: Problem, box: dict) -> tuple[list[str], np.ndarray, np.ndarray, int]:
    """Free variables of F with their ranges; placeholders come last."""
    d = prob.domain
    names = sorted(ex.free_vars(prob.F))
    coords = [v for v in names if not ex.is_placeholder(v)]
    holders = [v for v in names if ex.is_placeholder(v)]
    lo, hi = [], []
    for v in coords:
        if v == "t":
            lo.append(d.t_lo), hi.append(d.t_hi)
        else:
            i = d.axis_names.index(v)
            lo.append(d.lo[i]), hi.append(d.hi[i])
    for v in holders:
        if v not in box:
            raise ValueError(f"box has no interval for {v}")
        lo.append(box[v][0]), hi.append(box[v][1])
    return coords + holders, np.array(lo, float), np.array(hi, float), len(coords)


def _eval_F(prob: Problem, names: list[str], points: np.ndarray) -> np.ndarray:
    env = {name: points[:, i] for i, name in enumerate(names)}
    try:
        values = evaluate(prob.F, env)
    except ExprDomainError as exc:
        where = None
        if exc.index is not None:
            where = {name: float(points[exc.index[0], i]) for i, name in enumerate(names)}
        raise EvaluationError(f"F failed while sampling: {exc}", where) from exc
    values = np.broadcast_to(np.asarray(values, dtype=np.float64), (points.shape[0],))
    if not np.all(np.isfinite(values)):
        raise EvaluationError("F is not finite at a sampled point")
    return values


def _corners(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    d = lo.size
    if d == 0 or d > MAX_CORNER_DIMS:
        return np.empty((0, d))
    bits = np.array(list(itertools.product((0.0, 1.0), repeat=d)))
    return lo + bits * (hi - lo)


def _batch_plan(samples: int, seed: int) -> list[tuple[int, np.random.SeedSequence]]:
    if samples < 1:
        raise ValueError("samples must be >= 1")
    count = -(-samples // BATCH)
    children = np.random.SeedSequence(seed).spawn(count)
    sizes = [BATCH] * (count - 1) + [samples - BATCH * (count - 1)]
    return list(zip(sizes, children))


def _lhs(d: int, size: int, ss: np.random.SeedSequence) -> np.ndarray:
    # always draw a full batch so smaller sample counts see a subset of the points
    return qmc.LatinHypercube(d, rng=np.random.default_rng(ss)).random(BATCH)[:size]


def _parallel_max(work, items, threads: int) -> float:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(item) for item in items]
    return max(results, default=0.0)


def estimate_M(prob: Problem, box: dict, samples: int = DEFAULT_SAMPLES, seed: int = DEFAULT_SEED,
               threads: int = 1, inflation: float = INFLATION) -> float:
    """Sampled ``sup |F|`` over the time interval times the space box times ``box``.

    The maximum over ``samples`` Latin-hypercube points and all corners of
    the sampled box is multiplied by ``inflation``. ``prob.M_override``
    short-circuits the sampling.
    """
    if prob.M_override is not None:
        return float(prob.M_override)
    names, lo, hi, _ = _sample_axes(prob, box)
    if not names:
        return abs(float(evaluate(prob.F, {}))) * inflation
    span = hi - lo

    def work(item):
        size, ss = item
        points = lo + _lhs(len(names), size, ss) * span
        return float(np.max(np.abs(_eval_F(prob, names, points))))

    best = _parallel_max(work, _batch_plan(samples, seed), threads)
    corners = _corners(lo, hi)
    if corners.size:
        best = max(best, float(np.max(np.abs(_eval_F(prob, names, corners)))))
    return best * inflation


def _pair_quotients(prob, names, base, partner_values, axis, span_i):
    moved = base.copy()
    moved[:, axis] = partner_values
    step = np.abs(moved[:, axis] - base[:, axis])
    keep = step > 1e-12 * max(span_i, 1e-300)
    if not np.any(keep):
        return 0.0
    diff = np.abs(_eval_F(prob, names, moved[keep]) - _eval_F(prob, names, base[keep]))
    return float(np.max(diff / step[keep]))


def _near(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    step = NEAR_STEP * (hi - lo)
    up = values + step
    return np.where(up <= hi, up, values - step)


def estimate_L(prob: Problem, box: dict, samples: int = DEFAULT_SAMPLES, seed: int = DEFAULT_SEED,
               threads: int = 1, inflation: float = INFLATION) -> float:
    """Sampled Lipschitz constant of ``F`` in its derivative arguments.

    ``(t, x)`` is held fixed inside each pair and only one argument changes,
    so ``|F(y) - F(z)| / sum |y_i - z_i|`` probes the largest partial
    derivative, which is the sharp constant for the l1 distance. Each sample
    is paired with a random value and with a nearby value of every
    argument; box corners are paired with their neighbours and opposite
    endpoints. ``prob.L_override`` short-circuits the sampling.
    """
    if prob.L_override is not None:
        return float(prob.L_override)
    names, lo, hi, n_coords = _sample_axes(prob, box)
    d = len(names)
    if d == n_coords:
        return 0.0
    span = hi - lo
    axes = range(n_coords, d)

    def work(item):
        size, ss = item
        u = _lhs(2 * d, size, ss)
        base = lo + u[:, :d] * span
        other = lo + u[:, d:] * span
        best = 0.0
        for i in axes:
            best = max(best, _pair_quotients(prob, names, base, other[:, i], i, span[i]))
            best = max(best, _pair_quotients(prob, names, base, _near(base[:, i], lo[i], hi[i]), i, span[i]))
        return best

    best = _parallel_max(work, _batch_plan(samples, seed), threads)
    corners = _corners(lo, hi)
    if corners.size:
        for i in axes:
            opposite = lo[i] + hi[i] - corners[:, i]
            best = max(best, _pair_quotients(prob, names, corners, opposite, i, span[i]))
            best = max(best, _pair_quotients(prob, names, corners, _near(corners[:, i], lo[i], hi[i]), i, span[i]))
    return best * inflation


# --------------------------------------------------------------------------
# radii, contraction factor, bound


def compute_delta(R: float, n: int, M: float) -> float:
    """``(R (n-1)! / M)^(1/n)``, or ``inf`` when ``M = 0``."""
    if R <= 0:
        raise ValueError("R must be positive")
    if M < 0:
        raise ValueError("M must be nonnegative")
    if M == 0:
        return math.inf
    return (R * math.factorial(n - 1) / M) ** (1.0 / n)


def compute_delta1(delta: float, R: float, n: int, M: float, L: float) -> float:
    """``min(delta/2, (R (n-1)!/(2M))^(1/n), ((n-1)!/(2L))^(1/n))``; zero M or L drops a term."""
    f = math.factorial(n - 1)
    terms = [delta / 2.0]
    terms.append(math.inf if M == 0 else (R * f / (2.0 * M)) ** (1.0 / n))
    terms.append(math.inf if L == 0 else (f / (2.0 * L)) ** (1.0 / n))
    return min(terms)


def compute_gamma(L: float, delta1: float, n: int) -> float:
    """Contraction factor ``L delta1^n / (n-1)!`` (0 when ``L = 0``)."""
    if L == 0:
        return 0.0
    if not math.isfinite(delta1):
        raise ValueError("delta1 must be finite when L > 0")
    return L * delta1 ** n / math.factorial(n - 1)


def error_bound(R: float, gamma: float, p: int) -> float:
    """A-priori bound ``R gamma^p / (1 - gamma)`` on ``||u - u_p||``."""
    if not 0 <= gamma < 1:
        raise ValueError(f"error bound needs 0 <= gamma < 1, got {gamma}")
    if p < 0:
        raise ValueError("p must be nonnegative")
    return R * gamma ** p / (1.0 - gamma)


# --------------------------------------------------------------------------
# report


def _json_number(value: float):
    return None if not math.isfinite(value) else value


@dataclass(frozen=True)
class ConstantsReport:
    K: int
    box: dict
    M: float
    L: float
    delta: float
    delta1: float
    gamma: float
    R: float
    samples: int
    seed: int

    def to_dict(self) -> dict:
        """JSON-ready mapping; infinite radii become ``None``."""
        return {
            "K": self.K,
            "box": {name: [lo, hi] for name, (lo, hi) in self.box.items()},
            "M": self.M,
            "L": self.L,
            "delta": _json_number(self.delta),
            "delta1": _json_number(self.delta1),
            "gamma": self.gamma,
            "R": self.R,
            "samples": self.samples,
            "seed": self.seed,
        }

    def bound(self, p: int) -> float | None:
        return error_bound(self.R, self.gamma, p) if self.gamma < 1 else None


def compute_constants(prob: Problem, grid: Grid, samples: int = DEFAULT_SAMPLES,
                      seed: int = DEFAULT_SEED, threads: int = 1, center: str = "u0") -> ConstantsReport:
    """Box, M, L, delta, delta1 and gamma for ``prob`` on the nodes of ``grid``."""
    box = build_box(prob, grid, center)
    M = estimate_M(prob, box, samples, seed, threads)
    L = estimate_L(prob, box, samples, seed, threads)
    delta = compute_delta(prob.R, prob.n, M)
    delta1 = compute_delta1(delta, prob.R, prob.n, M, L)
    gamma = compute_gamma(L, delta1, prob.n)
    return ConstantsReport(K=compute_K(prob.k, prob.n, prob.m), box=box, M=M, L=L, delta=delta,
                           delta1=delta1, gamma=gamma, R=prob.R, samples=samples, seed=seed)
