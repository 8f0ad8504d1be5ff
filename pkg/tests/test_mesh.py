import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from picardpde.expr import parse
from picardpde.mesh import (
    Domain, Field, Grid, GridError, SampleError, cn_norm, fd_derivative, fd_weights,
    field_binop, field_scale, multi_indices, sample, stencil_radius, write_csv,
)


def grid2(n_t=9, n_x=(9, 9), ghost=0, t_lo=0.0, t_hi=0.5):
    return Grid(Domain(2, (0.0, 0.0), (1.0, 1.0), t_lo, t_hi, ghost), n_t, n_x)


def grid1(n_t=9, n_x=9, t_lo=-1.0, t_hi=1.0, ghost=0):
    return Grid(Domain(1, (0.0,), (1.0,), t_lo, t_hi, ghost), n_t, (n_x,))


def s(text, grid):
    return sample(parse(text, grid.k), grid)


# grid construction


def test_domain_validation():
    with pytest.raises(GridError):
        Domain(2, (0.0, 1.0), (1.0, 1.0))
    with pytest.raises(GridError):
        Domain(1, (0.0,), (1.0,), 0.1, 0.5)
    with pytest.raises(GridError):
        Domain(1, (0.0,), (1.0,), ghost=-1)


@pytest.mark.parametrize("n_t, n_x", [(4, 9), (8, 9), (3, 9), (9, 4)])
def test_grid_rejects_bad_counts(n_t, n_x):
    with pytest.raises(GridError):
        grid1(n_t, n_x)


def test_zero_must_be_a_node():
    with pytest.raises(GridError):
        Grid(Domain(1, (0.0,), (1.0,), -0.3, 1.0), 5, (5,))
    g = Grid(Domain(1, (0.0,), (1.0,), -0.25, 0.75), 5, (5,))
    assert g.t[g.zero_index] == 0.0


def test_ghost_layers_extend_axes():
    g = grid2(ghost=2)
    assert g.shape == (9, 13, 13)
    assert g.axes[0][0] == pytest.approx(-0.25)
    assert g.axes[0][g.interior[1]][0] == 0.0


# sampling


def test_sample_zero():
    f = s("0", grid2(ghost=1))
    assert not f.values.any()


def test_sample_initial_condition_example():
    g = grid2()
    f = s("y^2", g)
    i = list(g.axes[0]).index(0.5)
    assert np.all(f.values[:, i, -1] == 1.0)


def test_sample_t_is_time_coordinate():
    g = grid1()
    f = s("t", g)
    np.testing.assert_array_equal(f.values[:, 3], g.t)


def test_sample_reports_failing_node():
    g = grid1()
    with pytest.raises(SampleError) as info:
        s("log(x)", g)
    assert info.value.coords["x"] == 0.0


def test_field_rejects_non_finite_values():
    g = grid1()
    values = np.zeros(g.shape)
    values[2, 3] = np.nan
    with pytest.raises(GridError):
        Field(g, values)


# finite differences


def test_fd_weights_known_stencils():
    assert fd_weights(2, (-1, 0, 1)) == pytest.approx((1, -2, 1))
    assert fd_weights(1, (0, 1, 2)) == pytest.approx((-1.5, 2, -0.5))
    assert fd_weights(2, (0, 1, 2, 3)) == pytest.approx((2, -5, 4, -1))


@pytest.mark.parametrize("scheme", ["compact", "composed"])
def test_second_difference_exact_on_quadratic(scheme):
    g = grid2(ghost=0)
    d = fd_derivative(s("x^2", g), "x", 2, scheme=scheme)
    np.testing.assert_allclose(d.values, 2.0, rtol=0, atol=1e-11)


def test_second_difference_of_y_squared_along_x_is_zero():
    g = grid2()
    d = fd_derivative(s("y^2", g), "x", 2)
    assert np.max(np.abs(d.values)) == 0.0


def test_first_difference_second_order_convergence():
    errors = []
    for n in (17, 33, 65):
        g = grid2(n_t=5, n_x=(n, n))
        d = fd_derivative(s("sinh(x+y)", g), "x", 1)
        errors.append(np.max(np.abs(d.values - s("cosh(x+y)", g).values)))
    ratios = [errors[i] / errors[i + 1] for i in range(2)]
    assert all(3.5 <= r <= 4.5 for r in ratios), ratios


def test_time_derivative_and_accuracy_parameter():
    g = grid1(n_t=33, t_lo=0.0, t_hi=1.0)
    f = s("exp(t)*x", g)
    low = fd_derivative(f, "t", 1)
    high = fd_derivative(f, "t", 1, accuracy=6)
    err_low = np.max(np.abs(low.values - f.values))
    err_high = np.max(np.abs(high.values - f.values))
    assert err_high < 1e-3 * err_low


def test_fd_errors():
    g = grid1()
    f = s("x", g)
    with pytest.raises(GridError):
        fd_derivative(f, "y", 1)
    with pytest.raises(GridError):
        fd_derivative(f, "x", 1, accuracy=3)
    small = Grid(Domain(1, (0.0,), (1.0,)), 5, (5,))
    with pytest.raises(GridError):
        fd_derivative(s("x", small), "x", 5)


def test_composed_scheme_ignores_the_sawtooth():
    g = grid1(n_x=17)
    i = np.arange(g.shape[1])
    f = Field(g, np.broadcast_to((-1.0) ** i, g.shape))
    composed = fd_derivative(f, "x", 2, scheme="composed")
    compact = fd_derivative(f, "x", 2, scheme="compact")
    h = g.h[0]
    assert np.max(np.abs(composed.interior()[:, 2:-2])) == 0.0
    assert np.max(np.abs(compact.interior()[:, 2:-2])) == pytest.approx(4 / h ** 2)


def test_stencil_radius():
    assert stencil_radius(2) == 1
    assert stencil_radius(2, "composed") == 2
    assert stencil_radius(0, "composed") == 0


def test_fd_commutes_across_axes():
    g = grid2(n_t=9, n_x=(21, 21))
    f = s("sin(2*x)*exp(y) + x*y^3", g)
    xy = fd_derivative(fd_derivative(f, "x", 1), "y", 1)
    yx = fd_derivative(fd_derivative(f, "y", 1), "x", 1)
    assert np.max(np.abs(xy.values - yx.values)) <= 1e-8


def test_ghost_extension_consistency():
    base = s("sinh(x+y)*cos(t)", grid2(ghost=0))
    for ghost in (1, 2, 3):
        g = grid2(ghost=ghost)
        f = s("sinh(x+y)*cos(t)", g)
        d = fd_derivative(f, "x", 2).interior()
        ref = fd_derivative(s("sinh(x+y)*cos(t)", grid2(ghost=1)), "x", 2).interior()
        np.testing.assert_allclose(d, ref, rtol=0, atol=1e-9)
    assert base.interior().shape == f.interior().shape


# norms and arithmetic


def test_cn_norm_examples():
    g = grid1(n_t=9, n_x=9)
    assert cn_norm(s("t", g), 1) == pytest.approx(2.0, abs=1e-12)
    assert cn_norm(s("0", g), 3) == 0.0
    assert cn_norm(s("x*t", g), 2) == pytest.approx(4.0, abs=1e-12)


def test_cn_norm_t_order_cap():
    g = grid1(n_t=9, n_x=9)
    # drops |d_t (x t)| = |x| <= 1 and the mixed term
    assert cn_norm(s("x*t", g), 2, cap_t_order=0) == pytest.approx(2.0, abs=1e-12)


def test_multi_indices_counts():
    assert len(multi_indices(2, 2)) == 10
    assert len(multi_indices(2, 2, max_t_order=0)) == 6


def random_field(seed):
    g = grid1(n_t=9, n_x=9)
    return Field(g, np.random.default_rng(seed).normal(size=g.shape))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6), st.floats(-5, 5), st.integers(0, 2))
def test_cn_norm_is_a_norm(seed_a, seed_b, c, N):
    a, b = random_field(seed_a), random_field(seed_b)
    na, nb = cn_norm(a, N), cn_norm(b, N)
    assert na > 0
    assert cn_norm(a + b, N) <= na + nb + 1e-9 * (na + nb)
    assert cn_norm(field_scale(a, c), N) == pytest.approx(abs(c) * na, rel=1e-12, abs=1e-12)


def test_field_arithmetic():
    g = grid2()
    a = s("sin(x)*t", g)
    assert not (a - a).values.any()
    assert not field_scale(a, 0).values.any()
    u1 = s("y^2", g) + field_binop(s("t", g), s("x^2", g), np.multiply)
    np.testing.assert_allclose(u1.values, s("y^2 + x^2*t", g).values, atol=1e-15)


def test_fields_on_different_grids_do_not_mix():
    with pytest.raises(GridError):
        s("x", grid2()) + s("x", grid2(n_t=11))


def test_write_csv(tmp_path):
    g = grid1(n_t=5, n_x=5, ghost=1)
    f = s("x + t", g)
    path = tmp_path / "f.csv"
    write_csv(f, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "x", "value"]
    assert len(rows) == 1 + 5 * 5
    t, x, v = map(float, rows[7])
    assert v == pytest.approx(t + x)
