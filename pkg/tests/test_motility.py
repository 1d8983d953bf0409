import math

import numpy as np
import pytest

from ksls.motility import (
    MotilityError,
    big_gamma,
    check_derivative_consistency,
    classify,
    gamma_eval,
    make_motility,
    motility_names,
)

BUILTINS = ["exp_decay", "linear", "log1p", "sin_offset", "constant"]


class TestGammaEval:
    def test_exp_decay_at_ln2(self):
        mf = make_motility("exp_decay")
        out = gamma_eval(mf, math.log(2.0))
        assert out.value == pytest.approx(0.5, rel=1e-14)
        assert out.deriv == pytest.approx(-0.5, rel=1e-14)

    def test_linear_at_three(self):
        out = gamma_eval(make_motility("linear"), 3.0)
        assert out.value == 3.0
        assert out.deriv == 1.0

    def test_sin_offset_at_half_pi(self):
        out = gamma_eval(make_motility("sin_offset"), math.pi / 2.0)
        assert out.value == pytest.approx(3.0, rel=1e-14)
        assert out.deriv == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("s", [0.0, -1.0])
    def test_domain_error(self, s):
        with pytest.raises(MotilityError, match="s > 0"):
            gamma_eval(make_motility("linear"), s)

    @pytest.mark.parametrize("name", BUILTINS)
    def test_positive_on_range(self, name):
        mf = make_motility(name)
        s = np.geomspace(1e-3, 50.0, 200)
        assert np.all(mf.eval(s) > 0.0)

    @pytest.mark.parametrize("name", BUILTINS)
    def test_derivative_consistency(self, name):
        # central differences at 100 log-spaced points, h = 1e-5 * s
        assert check_derivative_consistency(make_motility(name)) <= 1e-6


class TestBigGamma:
    def test_linear_closed_form(self):
        assert big_gamma(make_motility("linear"), 3.0, 1.0) == pytest.approx(4.0)

    @pytest.mark.parametrize("name", BUILTINS)
    def test_zero_at_floor(self, name):
        assert big_gamma(make_motility(name), 2.0, 2.0) == pytest.approx(0.0, abs=1e-14)

    def test_sin_offset_closed_form(self):
        val = big_gamma(make_motility("sin_offset"), 5.0, 1.0)
        assert val == pytest.approx(8.0 + math.cos(1.0) - math.cos(5.0), rel=1e-14)

    def test_below_floor_rejected(self):
        with pytest.raises(MotilityError, match="v_floor"):
            big_gamma(make_motility("linear"), 0.5, 1.0)

    def test_vectorized(self):
        mf = make_motility("log1p")
        s = np.array([1.0, 2.0, 4.0])
        out = big_gamma(mf, s, 1.0)
        assert out.shape == (3,)
        assert out[0] == pytest.approx(0.0, abs=1e-14)
        assert np.all(np.diff(out) > 0)

    @pytest.mark.parametrize("name", BUILTINS)
    def test_quadrature_matches_primitive(self, name):
        # strip the declared primitive; adaptive Simpson must agree to 1e-10
        from dataclasses import replace

        mf = make_motility(name)
        bare = replace(mf, primitive=None)
        v_floor = 0.5
        for s in (1.0, 7.3, 50.0):
            exact = big_gamma(mf, s, v_floor)
            quad = big_gamma(bare, s, v_floor)
            assert quad == pytest.approx(exact, rel=1e-10, abs=1e-10)

    @pytest.mark.parametrize("name", ["linear", "log1p", "constant"])
    def test_monotone_bound_by_s_gamma(self, name):
        # 0 <= Gamma(s) <= s * gamma(s) for monotone non-decreasing motility
        mf = make_motility(name)
        v_floor = 0.3
        s = np.geomspace(v_floor, 100.0, 200)
        gam = big_gamma(mf, s, v_floor)
        assert np.all(gam >= 0.0)
        assert np.all(gam <= s * mf.eval(s) + 1e-12)

    @pytest.mark.parametrize("name", ["linear", "log1p"])
    @pytest.mark.parametrize("eps", [1.0, 0.1, 0.01])
    def test_linear_slack_for_unbounded(self, name, eps):
        # for unbounded monotone motility there is s_eps with
        # s <= eps * Gamma(s) + s_eps on the whole sampled range
        mf = make_motility(name)
        v_floor = 0.5
        s = np.geomspace(v_floor, 1e6, 4000)
        slack = s - eps * big_gamma(mf, s, v_floor)
        s_eps = float(slack.max())
        assert s_eps <= 1e6
        assert np.all(s <= eps * big_gamma(mf, s, v_floor) + s_eps + 1e-9)


class TestClassify:
    def test_sin_offset_tau_two(self):
        c = classify(make_motility("sin_offset"), tau=2.0, v_floor=0.5, s_max=200.0)
        assert c.gamma_inf_estimate == pytest.approx(1.0)
        assert c.nondegenerate_for_tau  # 1 > 1/2
        assert not c.monotone_nondecreasing

    def test_linear_tau_one(self):
        c = classify(make_motility("linear"), tau=1.0, v_floor=0.5, s_max=100.0)
        assert c.gamma_inf_estimate == math.inf
        assert c.nondegenerate_for_tau
        assert c.monotone_nondecreasing
        assert c.gamma_star_estimate == pytest.approx(0.5, rel=1e-6)

    def test_exp_decay_degenerate(self):
        c = classify(make_motility("exp_decay"), tau=1.0, v_floor=0.5, s_max=100.0)
        assert c.gamma_inf_estimate == 0.0
        assert not c.nondegenerate_for_tau

    def test_empirical_tail_estimate(self):
        # no declared liminf: the tail minimum stands in
        mf = make_motility("sin_offset")
        from dataclasses import replace

        bare = replace(mf, declared_gamma_inf=None)
        c = classify(bare, tau=2.0, v_floor=0.5, s_max=400.0)
        assert c.gamma_inf_estimate == pytest.approx(1.0, abs=1e-3)

    def test_requires_range(self):
        with pytest.raises(MotilityError, match="s_max"):
            classify(make_motility("linear"), tau=1.0, v_floor=1.0, s_max=5.0)

    def test_declaration_wins_with_note(self):
        from dataclasses import replace

        wrong = replace(make_motility("sin_offset"), declared_monotone=True)
        c = classify(wrong, tau=1.0, v_floor=0.5, s_max=100.0)
        assert c.monotone_nondecreasing
        assert any("declared monotone" in note for note in c.notes)


class TestCatalog:
    def test_names(self):
        assert set(BUILTINS) <= set(motility_names())

    def test_unknown_name(self):
        with pytest.raises(MotilityError, match="unknown motility"):
            make_motility("does-not-exist")

    def test_constant_requires_positive(self):
        with pytest.raises(MotilityError, match="positive"):
            make_motility("constant", value=0.0)

    def test_table_motility(self):
        knots = np.linspace(0.1, 20.0, 60)
        mf = make_motility("table", knots=knots.tolist(),
                           values=(2.0 + np.sin(knots)).tolist())
        s = np.linspace(0.5, 18.0, 50)
        assert np.abs(mf.eval(s) - (2.0 + np.sin(s))).max() <= 1e-3
        gam = big_gamma(mf, 5.0, 1.0)
        assert gam == pytest.approx(8.0 + math.cos(1.0) - math.cos(5.0), abs=1e-3)

    def test_table_rejects_bad_knots(self):
        with pytest.raises(MotilityError, match="increasing"):
            make_motility("table", knots=[1.0, 1.0, 2.0, 3.0], values=[1, 1, 1, 1])

    def test_table_rejects_nonpositive_values(self):
        with pytest.raises(MotilityError, match="positive"):
            make_motility("table", knots=[1.0, 2.0, 3.0, 4.0], values=[1, -1, 1, 1])
