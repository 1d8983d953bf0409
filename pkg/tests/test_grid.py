import numpy as np
import pytest

from ksls.grid import (
    Field,
    FieldError,
    GridError,
    combine,
    constant_field,
    field_from_function,
    make_grid,
    reduce,
)


class TestMakeGrid:
    def test_1d_spacing(self):
        g = make_grid(1, [4], [1.0])
        assert g.spacing == (0.25,)
        assert g.cell_volume == 0.25

    def test_2d_spacing_and_measure(self):
        g = make_grid(2, [8, 4], [2.0, 1.0])
        assert g.spacing == (0.25, 0.25)
        assert g.volume == pytest.approx(2.0)
        assert g.n_cells == 32

    def test_rejects_too_few_cells(self):
        with pytest.raises(GridError, match="cells must be >= 2"):
            make_grid(1, [0], [1.0])

    def test_rejects_bad_dim(self):
        with pytest.raises(GridError, match="dim must be 1 or 2"):
            make_grid(3, [4, 4, 4], [1.0, 1.0, 1.0])

    def test_rejects_nonpositive_length(self):
        with pytest.raises(GridError, match="lengths must be positive"):
            make_grid(1, [4], [-1.0])

    def test_total_measure_is_cell_sum(self):
        g = make_grid(2, [8, 4], [2.0, 1.0])
        assert g.n_cells * g.cell_volume == pytest.approx(g.volume, rel=1e-15)


class TestReduce:
    def test_constant_field(self):
        g = make_grid(2, [8, 4], [2.0, 1.0])
        r = reduce(constant_field(g, 3.0))
        assert r.integral == pytest.approx(6.0, rel=1e-14)
        assert r.mean == pytest.approx(3.0, rel=1e-14)
        assert r.linf == 3.0

    def test_single_entry(self):
        g = make_grid(1, [4], [1.0])
        vals = np.zeros(4)
        vals[2] = -1.0
        r = reduce(Field(g, vals))
        assert r.l1 == pytest.approx(0.25)
        assert r.min == -1.0

    def test_midpoint_rule_on_cosine(self):
        # analytic integral of cos(pi x) over [0, 1] is exactly 0
        g = make_grid(1, [64], [1.0])
        f = field_from_function(g, lambda x: np.cos(np.pi * x))
        assert abs(reduce(f).integral) <= 1e-3

    def test_mean_of_constant_exact(self):
        for cells, lengths in ([(7,), (1.3,)], [(5, 9), (0.7, 2.1)]):
            g = make_grid(len(cells), cells, lengths)
            assert reduce(constant_field(g, 2.5)).mean == 2.5

    def test_l1_equals_integral_for_nonnegative(self):
        rng = np.random.default_rng(42)
        g = make_grid(2, [6, 5], [1.0, 1.0])
        f = Field(g, rng.uniform(0.0, 2.0, size=g.shape))
        r = reduce(f)
        assert r.l1 == r.integral


class TestCombine:
    def test_product(self):
        g = make_grid(1, [8], [1.0])
        a = constant_field(g, 2.0)
        b = constant_field(g, 3.0)
        out = combine(lambda x, y: x * y, a, b)
        assert np.all(out.values == 6.0)

    def test_additive_identity(self):
        g = make_grid(1, [8], [1.0])
        rng = np.random.default_rng(0)
        a = Field(g, rng.normal(size=g.shape))
        b = Field(g, rng.normal(size=g.shape))
        out = a + 0.0 * b
        assert np.array_equal(out.values, a.values)

    def test_symmetry_zero(self):
        g = make_grid(1, [8], [1.0])
        m = 1.7
        u = constant_field(g, m)
        assert np.all((u - m).values == 0.0)

    def test_grid_mismatch(self):
        a = constant_field(make_grid(1, [8], [1.0]), 1.0)
        b = constant_field(make_grid(1, [16], [1.0]), 1.0)
        with pytest.raises(GridError):
            _ = a + b

    def test_integral_additivity(self):
        rng = np.random.default_rng(7)
        g = make_grid(2, [16, 8], [1.0, 2.0])
        for _ in range(20):
            a = Field(g, rng.normal(size=g.shape))
            b = Field(g, rng.normal(size=g.shape))
            lhs = reduce(a + b).integral
            rhs = reduce(a).integral + reduce(b).integral
            scale = abs(lhs) + abs(rhs) + 1.0
            assert abs(lhs - rhs) <= 1e-12 * scale


class TestFieldInvariants:
    def test_rejects_nan(self):
        g = make_grid(1, [4], [1.0])
        vals = np.ones(4)
        vals[1] = np.nan
        with pytest.raises(FieldError, match="non-finite"):
            Field(g, vals)

    def test_rejects_wrong_size(self):
        g = make_grid(1, [4], [1.0])
        with pytest.raises(FieldError, match="entries"):
            Field(g, np.ones(5))

    def test_values_read_only(self):
        g = make_grid(1, [4], [1.0])
        f = constant_field(g, 1.0)
        with pytest.raises(ValueError):
            f.values[0] = 2.0
