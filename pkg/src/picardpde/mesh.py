"""Tensor-product space-time grids, sampled fields and finite differences."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np

from .expr import Expr, ExprDomainError, ExprError, evaluate, free_vars, spatial_names

__all__ = [
    "Domain", "Grid", "Field", "GridError", "SampleError",
    "sample", "fd_derivative", "fd_weights", "cn_norm", "multi_indices",
    "derivative_values", "stencil_radius", "SCHEMES",
    "field_binop", "field_scale", "write_csv",
]


class GridError(ValueError):
    pass


class SampleError(ExprError):
    """Evaluation of an expression failed at a grid node."""

    def __init__(self, message: str, coords: dict | None = None):
        super().__init__(message)
        self.coords = coords


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box ``[lo, hi]`` in space times ``[t_lo, t_hi]`` in time.

    ``ghost`` extra layers of nodes are added on every spatial side. Closed
    form data (initial functions, forcing) is sampled on them so that
    stencils near the box faces stay centered.
    """

    k: int
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    t_lo: float = 0.0
    t_hi: float = 0.5
    ghost: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        object.__setattr__(self, "t_lo", float(self.t_lo))
        object.__setattr__(self, "t_hi", float(self.t_hi))
        if self.k < 1:
            raise GridError("spatial dimension must be >= 1")
        if len(self.lo) != self.k or len(self.hi) != self.k:
            raise GridError(f"need {self.k} lower and upper bounds")
        for a, b in zip(self.lo, self.hi):
            if not a < b:
                raise GridError(f"empty spatial interval [{a}, {b}]")
        if not (self.t_lo <= 0.0 <= self.t_hi) or self.t_lo == self.t_hi:
            raise GridError(f"time interval [{self.t_lo}, {self.t_hi}] must contain 0")
        if self.ghost < 0:
            raise GridError("ghost layer count must be nonnegative")

    @classmethod
    def unit_box(cls, k: int, t_hi: float = 0.5, t_lo: float = 0.0, ghost: int = 0) -> "Domain":
        return cls(k, (0.0,) * k, (1.0,) * k, t_lo, t_hi, ghost)

    def replace(self, **changes) -> "Domain":
        values = dict(k=self.k, lo=self.lo, hi=self.hi, t_lo=self.t_lo,
                      t_hi=self.t_hi, ghost=self.ghost)
        values.update(changes)
        return Domain(**values)

    @property
    def axis_names(self) -> tuple[str, ...]:
        return spatial_names(self.k)


@dataclass(frozen=True)
class Grid:
    """Uniform nodes on a :class:`Domain`; ``t = 0`` is always a node."""

    domain: Domain
    n_t: int
    n_x: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "n_x", tuple(int(v) for v in self.n_x))
        if len(self.n_x) != self.domain.k:
            raise GridError(f"need {self.domain.k} spatial node counts")
        if self.n_t < 5 or self.n_t % 2 == 0:
            raise GridError(f"n_t must be odd and >= 5, got {self.n_t}")
        if min(self.n_x) < 5:
            raise GridError("every spatial axis needs at least 5 nodes")
        d = self.domain
        ratio = -d.t_lo / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, abs(ratio)):
            raise GridError("t = 0 does not fall on a time node")

    @property
    def k(self) -> int:
        return self.domain.k

    @property
    def ghost(self) -> int:
        return self.domain.ghost

    @property
    def dt(self) -> float:
        return (self.domain.t_hi - self.domain.t_lo) / (self.n_t - 1)

    @property
    def zero_index(self) -> int:
        return int(round(-self.domain.t_lo / self.dt))

    @property
    def h(self) -> tuple[float, ...]:
        d = self.domain
        return tuple((b - a) / (n - 1) for a, b, n in zip(d.lo, d.hi, self.n_x))

    @cached_property
    def t(self) -> np.ndarray:
        nodes = (np.arange(self.n_t) - self.zero_index) * self.dt
        nodes.setflags(write=False)
        return nodes

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        """Spatial node coordinates, ghost layers included."""
        g = self.ghost
        out = []
        for a, step, n in zip(self.domain.lo, self.h, self.n_x):
            nodes = a + np.arange(-g, n + g) * step
            nodes.setflags(write=False)
            out.append(nodes)
        return tuple(out)

    @property
    def shape(self) -> tuple[int, ...]:
        g = self.ghost
        return (self.n_t,) + tuple(n + 2 * g for n in self.n_x)

    @property
    def interior(self) -> tuple[slice, ...]:
        """Index selecting the nodes inside the box (no ghost layers)."""
        g = self.ghost
        return (slice(None),) + tuple(slice(g, g + n) for n in self.n_x)

    def spacing(self, axis: str) -> float:
        return self.dt if axis == "t" else self.h[self.axis_index(axis) - 1]

    def axis_index(self, axis: str) -> int:
        """Array axis of a coordinate name (``t`` is axis 0)."""
        if axis == "t":
            return 0
        names = self.domain.axis_names
        if axis in names:
            return names.index(axis) + 1
        if axis.startswith("x") and axis[1:].isdigit() and 1 <= int(axis[1:]) <= self.k:
            return int(axis[1:])
        raise GridError(f"axis {axis!r} is not a grid coordinate")

    def coordinates(self) -> dict[str, np.ndarray]:
        """Broadcastable coordinate arrays keyed by variable name."""
        ndim = self.k + 1
        coords = {"t": self.t.reshape((-1,) + (1,) * self.k)}
        for i, (name, nodes) in enumerate(zip(self.domain.axis_names, self.axes)):
            shape = [1] * ndim
            shape[i + 1] = -1
            coords[name] = nodes.reshape(shape)
        return coords

    def refined(self) -> "Grid":
        """Grid with both time and space steps halved."""
        return Grid(self.domain, 2 * self.n_t - 1, tuple(2 * n - 1 for n in self.n_x))

    def with_domain(self, domain: Domain) -> "Grid":
        return Grid(domain, self.n_t, self.n_x)


@dataclass(frozen=True, eq=False)
class Field:
    """Real values on every node of a grid, ghost layers included."""

    grid: Grid
    values: np.ndarray = dc_field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise GridError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(values))[0])
            raise GridError(f"non-finite field value at node {bad}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def interior(self) -> np.ndarray:
        return self.values[self.grid.interior]

    def sup(self) -> float:
        """Max absolute value over the non-ghost nodes."""
        return float(np.max(np.abs(self.interior())))

    def __add__(self, other: "Field") -> "Field":
        return field_binop(self, other, np.add)

    def __sub__(self, other: "Field") -> "Field":
        return field_binop(self, other, np.subtract)

    def __mul__(self, other: "Field") -> "Field":
        return field_binop(self, other, np.multiply)

    def __neg__(self) -> "Field":
        return field_scale(self, -1.0)


def field_binop(a: Field, b: Field, op: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Field:
    if a.grid != b.grid:
        raise GridError("fields live on different grids")
    return Field(a.grid, op(a.values, b.values))


def field_scale(a: Field, c: float) -> Field:
    return Field(a.grid, a.values * float(c))


def sample(e: Expr, grid: Grid) -> Field:
    """Evaluate a closed-form expression on every node of ``grid``."""
    allowed = {"t", *grid.domain.axis_names}
    extra = free_vars(e) - allowed
    if extra:
        raise SampleError(f"expression depends on {sorted(extra)}, cannot sample it")
    coords = grid.coordinates()
    try:
        values = evaluate(e, coords)
    except ExprDomainError as exc:
        raise SampleError(f"{exc} at {_node_coords(grid, exc.index)}",
                          _node_coords(grid, exc.index)) from exc
    values = np.broadcast_to(np.asarray(values, dtype=np.float64), grid.shape)
    if not np.all(np.isfinite(values)):
        index = tuple(int(i) for i in np.argwhere(~np.isfinite(values))[0])
        where = _node_coords(grid, index)
        raise SampleError(f"non-finite value at {where}", where)
    return Field(grid, values)


def _node_coords(grid: Grid, index: tuple | None) -> dict | None:
    if index is None:
        return None
    names = ("t",) + grid.domain.axis_names
    nodes = (grid.t,) + grid.axes
    out = {}
    for name, arr, i in zip(names, nodes, index):
        if len(arr) > 1 and i < len(arr):
            out[name] = float(arr[i])
    return out


# --------------------------------------------------------------------------
# finite differences


@lru_cache(maxsize=None)
def fd_weights(order: int, offsets: tuple[int, ...]) -> tuple[float, ...]:
    """Finite-difference weights at offset 0 (unit spacing), Fornberg's recursion."""
    z = np.asarray(offsets, dtype=np.float64)
    n = len(z)
    if order >= n:
        raise GridError(f"{n} nodes cannot resolve a derivative of order {order}")
    c = np.zeros((n, order + 1))
    c1 = 1.0
    c4 = z[0]
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = z[i]
        for j in range(i):
            c3 = z[i] - z[j]
            c2 *= c3
            if j == i - 1:
                for s in range(mn, 0, -1):
                    c[i, s] = c1 * (s * c[i - 1, s - 1] - c5 * c[i - 1, s]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for s in range(mn, 0, -1):
                c[j, s] = (c4 * c[j, s] - s * c[j, s - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return tuple(float(v) for v in c[:, order])


SCHEMES = ("compact", "composed")


def _stencil_sizes(order: int, accuracy: int) -> tuple[int, int]:
    radius = (order + 1) // 2 + accuracy // 2 - 1
    return radius, order + accuracy


def _stencil_pass(a: np.ndarray, order: int, step: float, accuracy: int) -> np.ndarray:
    radius, one_sided = _stencil_sizes(order, accuracy)
    n = a.shape[0]
    if n < max(2 * radius + 1, one_sided):
        raise GridError(f"{n} nodes are too few for a derivative of order {order}")
    out = np.empty_like(a)
    scale = step ** order
    central = fd_weights(order, tuple(range(-radius, radius + 1)))
    acc = np.zeros_like(a[radius:n - radius])
    for w, off in zip(central, range(-radius, radius + 1)):
        if w != 0.0:
            acc += w * a[radius + off:n - radius + off]
    out[radius:n - radius] = acc / scale
    for i in itertools.chain(range(radius), range(n - radius, n)):
        start = 0 if i < radius else n - one_sided
        offsets = tuple(j - i for j in range(start, start + one_sided))
        w = np.asarray(fd_weights(order, offsets))
        out[i] = np.tensordot(w, a[start:start + one_sided], axes=(0, 0)) / scale
    return out


def _diff_along(values: np.ndarray, axis: int, order: int, step: float, accuracy: int,
                scheme: str = "compact") -> np.ndarray:
    if order == 0:
        return values.copy()
    a = np.moveaxis(values, axis, 0)
    if scheme == "compact":
        out = _stencil_pass(a, order, step, accuracy)
    elif scheme == "composed":
        out = a
        for _ in range(order):
            out = _stencil_pass(out, 1, step, accuracy)
    else:
        raise GridError(f"unknown stencil scheme {scheme!r}")
    return np.moveaxis(out, 0, axis)


def stencil_radius(order: int, scheme: str = "compact", accuracy: int = 2) -> int:
    """Nodes on each side that one derivative of ``order`` reads."""
    if order == 0:
        return 0
    if scheme == "composed":
        return order * _stencil_sizes(1, accuracy)[0]
    return _stencil_sizes(order, accuracy)[0]


def fd_derivative(f: Field, axis: str, order: int, accuracy: int = 2,
                  scheme: str = "compact") -> Field:
    """Finite-difference derivative of ``f`` along one coordinate.

    Central stencils are used wherever they fit and one-sided stencils of the
    same accuracy at the array edges. With the default ``accuracy=2``
    first and second derivatives are exact for quadratics in ``axis``.

    ``scheme="compact"`` uses the narrowest stencil for ``order`` (for a
    second derivative ``(f[i-1] - 2 f[i] + f[i+1]) / h^2``).
    ``scheme="composed"`` applies the first-derivative stencil ``order``
    times; it is blind to the sawtooth mode, which keeps repeated
    differentiation of noisy iterates from blowing up.
    """
    if order < 0:
        raise GridError("derivative order must be nonnegative")
    if accuracy < 2 or accuracy % 2:
        raise GridError("accuracy must be a positive even integer")
    index = f.grid.axis_index(axis)
    values = _diff_along(f.values, index, order, f.grid.spacing(axis), accuracy, scheme)
    return Field(f.grid, values)


def multi_indices(k: int, total: int, max_t_order: int | None = None):
    """All ``(a0, alpha)`` with ``a0 + |alpha| <= total``, ``alpha`` of length ``k``."""
    out = []
    for a0 in range(total + 1):
        if max_t_order is not None and a0 > max_t_order:
            break
        for alpha in itertools.product(range(total - a0 + 1), repeat=k):
            if a0 + sum(alpha) <= total:
                out.append((a0, tuple(alpha)))
    out.sort(key=lambda ix: (ix[0] + sum(ix[1]), ix[0], tuple(-a for a in ix[1])))
    return out


def derivative_values(f: Field, a0: int, alpha: tuple[int, ...], accuracy: int = 2,
                      cache: dict | None = None, scheme: str = "compact") -> np.ndarray:
    """Mixed derivative array, applying one axis at a time (spatial first, then t)."""
    key = (a0, alpha)
    if cache is not None and key in cache:
        return cache[key]
    grid = f.grid
    values = f.values
    orders = list(alpha) + [a0]
    axes = list(range(1, grid.k + 1)) + [0]
    steps = list(grid.h) + [grid.dt]
    # reuse the longest cached prefix of the per-axis chain
    done = 0
    if cache is not None:
        for j in range(len(orders), 0, -1):
            prefix = tuple(orders[:j]) + (0,) * (len(orders) - j)
            pkey = (prefix[-1], tuple(prefix[:-1]))
            if pkey in cache:
                values = cache[pkey]
                done = j
                break
    for j in range(done, len(orders)):
        if orders[j]:
            values = _diff_along(values, axes[j], orders[j], steps[j], accuracy, scheme)
        if cache is not None:
            prefix = tuple(orders[:j + 1]) + (0,) * (len(orders) - j - 1)
            cache.setdefault((prefix[-1], tuple(prefix[:-1])), values)
    return values


def cn_norm(f: Field, N: int, cap_t_order: int | None = None) -> float:
    """Discrete C^N norm: sum over derivative orders of the max absolute value.

    Every ``(a0, alpha)`` with ``a0 + |alpha| <= N`` contributes the largest
    absolute finite-difference derivative over the non-ghost nodes.
    ``cap_t_order`` drops terms whose time order exceeds it.
    """
    if N < 0:
        raise GridError("N must be nonnegative")
    cache: dict = {(0, (0,) * f.grid.k): f.values}
    inner = f.grid.interior
    total = 0.0
    for a0, alpha in multi_indices(f.grid.k, N, cap_t_order):
        d = derivative_values(f, a0, alpha, cache=cache)
        total += float(np.max(np.abs(d[inner])))
    return total


def write_csv(f: Field, path, include_ghost: bool = False) -> None:
    """Dump ``f`` as ``t,<space coordinates>,value`` rows, time-major, 17 significant digits."""
    grid = f.grid
    if include_ghost:
        axes = grid.axes
        values = f.values
    else:
        g = grid.ghost
        axes = tuple(ax[g:len(ax) - g] for ax in grid.axes)
        values = f.interior()
    mesh = np.meshgrid(grid.t, *axes, indexing="ij")
    columns = [m.ravel() for m in mesh] + [values.ravel()]
    header = ",".join(["t", *grid.domain.axis_names, "value"])
    np.savetxt(path, np.column_stack(columns), fmt="%.17g", delimiter=",",
               header=header, comments="")
