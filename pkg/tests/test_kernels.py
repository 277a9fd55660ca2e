import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import gamma as gamma_fn

from volterra_control.kernels import (
    BernsteinMeasure,
    DiscreteKernel,
    FractionalKernel,
    KernelError,
    ShiftedFractionalKernel,
    alpha_index,
    check_shifted_cm,
    discretize,
    eval_kernel,
    finite_mixture,
    fit_error,
    kernel_from_json,
    kernel_to_json,
    laplace,
    max_shift,
)


def single_node(kappa=1.0, weight=1.0):
    return DiscreteKernel(BernsteinMeasure([kappa], [weight]))


@st.composite
def measures(draw):
    n = draw(st.integers(min_value=1, max_value=6))
    nodes = draw(
        st.lists(
            st.floats(min_value=1e-3, max_value=50.0),
            min_size=n,
            max_size=n,
            unique=True,
        )
    )
    weights = draw(
        st.lists(st.floats(min_value=1e-3, max_value=10.0), min_size=n, max_size=n)
    )
    return BernsteinMeasure(sorted(nodes), weights)


class TestConstruction:
    def test_rejects_unsorted_nodes(self):
        with pytest.raises(KernelError):
            BernsteinMeasure([2.0, 1.0], [1.0, 1.0])

    def test_rejects_nonpositive_weights(self):
        with pytest.raises(KernelError):
            BernsteinMeasure([1.0, 2.0], [1.0, 0.0])

    def test_rejects_negative_nodes(self):
        with pytest.raises(KernelError):
            BernsteinMeasure([-1.0], [1.0])

    def test_rejects_empty(self):
        with pytest.raises(KernelError):
            BernsteinMeasure([], [])

    def test_beta_range_enforced(self):
        with pytest.raises(KernelError):
            FractionalKernel(1.0)
        with pytest.raises(KernelError):
            FractionalKernel(0.0)
        with pytest.raises(KernelError):
            ShiftedFractionalKernel(0.5, sigma0=-0.1)

    def test_finite_mixture_sorts_and_merges(self):
        kern = finite_mixture([(2.0, 1.0), (0.5, 0.3), (2.0, 0.5)])
        assert np.allclose(kern.measure.nodes, [0.5, 2.0])
        assert np.allclose(kern.measure.weights, [0.3, 1.5])

    def test_total_mass_is_value_at_zero_plus(self):
        m = BernsteinMeasure([0.5, 2.0], [0.6, 0.9])
        assert m.total_mass == pytest.approx(
            eval_kernel(DiscreteKernel(m), 1e-12), rel=1e-9
        )


class TestEval:
    def test_single_exponential(self):
        assert eval_kernel(single_node(), 0.5) == pytest.approx(np.exp(-0.5), abs=1e-15)

    def test_fractional_closed_form(self):
        # oracle: Gamma-function evaluation
        assert eval_kernel(FractionalKernel(0.4), 1.0) == pytest.approx(
            1.0 / gamma_fn(0.4), rel=1e-14
        )

    def test_fractional_diverges_at_origin(self):
        small = eval_kernel(FractionalKernel(0.4), 1e-12)
        assert small > 1e6

    def test_rejects_nonpositive_time(self):
        with pytest.raises(KernelError):
            eval_kernel(single_node(), 0.0)
        with pytest.raises(KernelError):
            eval_kernel(FractionalKernel(0.5), -1.0)

    def test_shifted_fractional_is_damped_power_law(self):
        spec = ShiftedFractionalKernel(0.4, sigma0=0.7, scale=2.0)
        t = np.array([0.3, 1.5, 4.0])
        expected = 2.0 * np.exp(-0.7 * t) * t ** (-0.6) / gamma_fn(0.4)
        assert np.allclose(eval_kernel(spec, t), expected, rtol=1e-14)

    @given(measures(), st.floats(min_value=1e-3, max_value=20.0))
    @settings(max_examples=60, deadline=None)
    def test_discrete_positive_decreasing_convex(self, measure, t0):
        spec = DiscreteKernel(measure)
        h = max(t0 * 1e-2, 1e-4)
        ts = np.array([t0, t0 + h, t0 + 2 * h])
        vals = eval_kernel(spec, ts)
        assert np.all(vals > 0.0)
        assert vals[1] < vals[0]
        assert vals[0] - 2 * vals[1] + vals[2] >= -1e-12 * vals[0]


class TestLaplace:
    def test_single_term(self):
        assert laplace(single_node(), 2.0) == pytest.approx(1.0 / 3.0, rel=1e-15)

    def test_fractional_closed_form(self):
        assert laplace(FractionalKernel(0.5), 4.0) == pytest.approx(0.5, rel=1e-15)

    def test_decay_at_infinity(self):
        for spec in (single_node(), FractionalKernel(0.3), ShiftedFractionalKernel(0.5, 1.0)):
            assert laplace(spec, 1e9) < 1e-2
            assert laplace(spec, 1e9) < laplace(spec, 1e6) < laplace(spec, 1e3)

    def test_domain(self):
        with pytest.raises(KernelError):
            laplace(single_node(), 0.0)
        # shifted family admits s > -sigma0
        spec = ShiftedFractionalKernel(0.5, sigma0=1.0)
        assert laplace(spec, -0.5) == pytest.approx(0.5**-0.5, rel=1e-14)
        with pytest.raises(KernelError):
            laplace(spec, -1.0)

    @given(measures(), st.floats(min_value=0.1, max_value=10.0))
    @settings(max_examples=30, deadline=None)
    def test_consistent_with_time_integral(self, measure, s):
        # oracle: numerical quadrature of exp(-s t) a(t) over [0, T_big],
        # done on log-spaced panels so the concentration near 0 is resolved
        spec = DiscreteKernel(measure)
        t_big = 50.0 / (s + float(measure.nodes[0]))
        panels = np.geomspace(1e-12, t_big, 14)
        val = quad(lambda t: np.exp(-s * t) * eval_kernel(spec, t), 0.0, panels[0])[0]
        for lo, hi in zip(panels[:-1], panels[1:]):
            val += quad(lambda t: np.exp(-s * t) * eval_kernel(spec, t), lo, hi, limit=200)[0]
        assert val == pytest.approx(laplace(spec, s), rel=1e-6)


class TestAlpha:
    def test_fractional(self):
        rep = alpha_index(FractionalKernel(0.4))
        assert rep.alpha == pytest.approx(0.6)
        assert rep.singular_enough

    def test_fractional_fail(self):
        rep = alpha_index(FractionalKernel(0.6))
        assert rep.alpha == pytest.approx(0.4)
        assert not rep.singular_enough

    def test_discrete_is_zero(self):
        rep = alpha_index(finite_mixture([(0.5, 1.0), (3.0, 2.0)]))
        assert rep.alpha == 0.0
        assert not rep.singular_enough

    def test_integral_criterion_matches_closed_form(self):
        # oracle: the defining integral, evaluated numerically just above
        # and below the closed-form index.
        spec = FractionalKernel(0.4)
        alpha = alpha_index(spec).alpha

        def tail_integral(rho, upper):
            val, _ = quad(lambda s: s ** (rho - 2.0) / laplace(spec, s), 1.0, upper, limit=200)
            return val

        below = [tail_integral(alpha - 0.3, u) for u in (1e3, 1e6)]
        above = [tail_integral(alpha + 0.3, u) for u in (1e3, 1e6)]
        assert below[1] / below[0] < 1.5  # convergent: nearly saturated
        assert above[1] / above[0] > 5.0  # divergent: keeps growing

    def test_shifted_matches_plain(self):
        for beta in (0.2, 0.5, 0.8):
            assert alpha_index(ShiftedFractionalKernel(beta, 2.0)).alpha == pytest.approx(
                alpha_index(FractionalKernel(beta)).alpha
            )


class TestShiftedCm:
    def test_discrete_pass(self):
        spec = finite_mixture([(0.5, 1.0), (2.0, 1.0)])
        assert check_shifted_cm(spec, 0.4).passes

    def test_discrete_fail_witness(self):
        spec = finite_mixture([(0.5, 1.0), (2.0, 1.0)])
        res = check_shifted_cm(spec, 0.6)
        assert not res.passes
        assert res.witness == pytest.approx(0.5)

    def test_fractional_fails_any_positive_shift(self):
        res = check_shifted_cm(FractionalKernel(0.4), 0.1)
        assert not res.passes
        # oracle: the shifted kernel must stop decreasing past the witness
        t_star = res.witness
        assert t_star == pytest.approx((1.0 - 0.4) / 0.1)
        shifted = lambda t: np.exp(0.1 * t) * eval_kernel(FractionalKernel(0.4), t)
        assert shifted(t_star * 0.5) > shifted(t_star * 0.9)
        assert shifted(t_star * 1.1) < shifted(t_star * 2.0)

    def test_shifted_fractional_threshold(self):
        spec = ShiftedFractionalKernel(0.5, sigma0=0.8)
        assert check_shifted_cm(spec, 0.8).passes
        assert not check_shifted_cm(spec, 0.9).passes

    def test_sigma_zero_always_passes(self):
        for spec in (single_node(), FractionalKernel(0.7), ShiftedFractionalKernel(0.3, 0.0)):
            assert check_shifted_cm(spec, 0.0).passes

    def test_max_shift(self):
        assert max_shift(single_node(0.5)) == pytest.approx(0.5)
        assert max_shift(FractionalKernel(0.5)) == 0.0
        assert max_shift(ShiftedFractionalKernel(0.5, 1.2)) == pytest.approx(1.2)


class TestDiscretize:
    def test_fractional_fit_quality(self):
        # frozen from running fit_error against the closed-form kernel
        rep = discretize(FractionalKernel(0.5), 20, 1e-5, 1e4, window=(1e-2, 10.0))
        assert rep.sup_rel_error < 5e-2
        assert rep.parent_alpha == pytest.approx(0.5)
        assert rep.t_window == (1e-2, 10.0)

    def test_discrete_identity(self):
        spec = single_node(2.0, 1.5)
        rep = discretize(spec, 1, 1.0, 4.0, window=(0.1, 2.0))
        assert rep.measure is spec.measure
        assert rep.sup_rel_error == pytest.approx(0.0, abs=1e-13)
        assert rep.l1_error == pytest.approx(0.0, abs=1e-13)

    def test_refinement_monotonicity(self):
        spec = FractionalKernel(0.5)
        e20 = discretize(spec, 20, 1e-4, 1e4, window=(1e-2, 10.0)).sup_rel_error
        e40 = discretize(spec, 40, 1e-4, 1e4, window=(1e-2, 10.0)).sup_rel_error
        assert e40 <= e20

    def test_errors_grow_outside_resolved_window(self):
        spec = FractionalKernel(0.5)
        inside = discretize(spec, 16, 1e-2, 1e3, window=(1e-2, 1.0)).sup_rel_error
        outside = discretize(spec, 16, 1e-2, 1e3, window=(50.0, 500.0)).sup_rel_error
        assert outside > inside
        assert np.isfinite(outside)

    def test_mass_conserved_on_range(self):
        # oracle: quadrature of the mixing density over the binned range
        spec = FractionalKernel(0.4, scale=1.3)
        rep = discretize(spec, 25, 1e-2, 1e2)
        coeff = 1.3 * np.sin(np.pi * 0.4) / np.pi
        expected, _ = quad(lambda k: coeff * k ** (-0.4), 1e-2, 1e2)
        assert rep.measure.total_mass == pytest.approx(expected, rel=1e-10)

    def test_shifted_fractional_bins(self):
        # the mixing density blows up at the damping rate, so the grid must
        # start close to it to capture the near-singular mass
        spec = ShiftedFractionalKernel(0.5, sigma0=0.5, scale=1.0)
        rep = discretize(spec, 24, 0.501, 1e3, window=(1e-2, 1.0))
        assert np.all(rep.measure.nodes > 0.5)
        assert rep.sup_rel_error < 0.1
        with pytest.raises(KernelError):
            discretize(spec, 8, 0.4, 1e3)

    def test_degenerate_range_rejected(self):
        with pytest.raises(KernelError):
            discretize(FractionalKernel(0.5), 10, 2.0, 2.0)
        with pytest.raises(KernelError):
            discretize(FractionalKernel(0.5), 0, 0.1, 10.0)


class TestFitError:
    def test_exact_measure_has_zero_error(self):
        m = BernsteinMeasure([0.3, 1.7], [0.4, 2.2])
        sup_rel, l1 = fit_error(DiscreteKernel(m), m, (0.05, 5.0), samples=50)
        assert sup_rel == 0.0
        assert l1 == 0.0

    def test_window_validation(self):
        m = BernsteinMeasure([1.0], [1.0])
        with pytest.raises(KernelError):
            fit_error(DiscreteKernel(m), m, (0.0, 1.0))
        with pytest.raises(KernelError):
            fit_error(DiscreteKernel(m), m, (2.0, 1.0))


class TestJson:
    def test_round_trip_discrete(self):
        spec = DiscreteKernel(BernsteinMeasure([0.5, 2.0], [1.0, 3.0]), parent_alpha=0.6)
        back = kernel_from_json(kernel_to_json(spec))
        assert np.allclose(back.measure.nodes, spec.measure.nodes)
        assert np.allclose(back.measure.weights, spec.measure.weights)
        assert back.parent_alpha == pytest.approx(0.6)

    def test_round_trip_fractional(self):
        spec = FractionalKernel(0.4, scale=2.0)
        assert kernel_from_json(kernel_to_json(spec)) == spec

    def test_round_trip_shifted(self):
        spec = ShiftedFractionalKernel(0.3, sigma0=0.2, scale=0.5)
        assert kernel_from_json(kernel_to_json(spec)) == spec

    def test_mixture_variant(self):
        spec = kernel_from_json({"variant": "mixture", "pairs": [[2.0, 1.0], [0.5, 0.25]]})
        assert np.allclose(spec.measure.nodes, [0.5, 2.0])

    def test_unknown_fields_rejected(self):
        with pytest.raises(KernelError):
            kernel_from_json({"variant": "fractional", "beta": 0.4, "bogus": 1})
        with pytest.raises(KernelError):
            kernel_from_json({"variant": "nope"})
