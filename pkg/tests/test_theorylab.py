import math

import numpy as np
import pytest

from augtransfer.attack import AttackConfig
from augtransfer.theorylab import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    SQRT_2_OVER_PI,
    GradientField,
    Smoother,
    check_bound,
    constant_field,
    directional_derivative,
    estimate_lipschitz,
    is_monotone_in_sigma,
    linear_field,
    model_field,
    sign_field,
    slope_curve,
    smooth_gradient,
    smoothness_vs_transfer,
    spearman,
    tanh_field,
    theorem_bounds,
    verdict,
)


class TestSmoothGradient:
    def test_constant(self):
        mean, se = smooth_gradient(constant_field([2.0, -1.0]), Smoother.gaussian(1.0, 5000), [0.3, 0.1])
        np.testing.assert_allclose(mean, [2.0, -1.0])
        np.testing.assert_allclose(se, 0.0)

    def test_sign_is_erf(self):
        for x in (-1.0, 0.0, 0.7):
            mean, se = smooth_gradient(sign_field(), Smoother.gaussian(1.0, 100_000), [x], rng=2)
            assert abs(mean[0] - math.erf(x / math.sqrt(2))) <= 4 * se[0]

    def test_linear(self):
        mean, se = smooth_gradient(linear_field(2), Smoother.gaussian(1.0, 20_000), [0.5, -0.25], rng=1)
        assert np.all(np.abs(mean - [0.5, -0.25]) <= 4 * se)

    def test_se_halves_with_four_times_samples(self):
        _, a = smooth_gradient(sign_field(), Smoother.gaussian(1.0, 10_000), [0.2], rng=3)
        _, b = smooth_gradient(sign_field(), Smoother.gaussian(1.0, 20_000), [0.2], rng=4)
        assert 1.3 <= a[0] / b[0] <= 1.6

    def test_min_samples(self):
        with pytest.raises(ValueError):
            Smoother.gaussian(1.0, 10)

    def test_custom_needs_sampler(self):
        with pytest.raises(ValueError):
            Smoother("custom")

    def test_uniform(self):
        mean, _ = smooth_gradient(sign_field(), Smoother("uniform", 1.0, 50_000), [0.5], rng=0)
        assert mean[0] == pytest.approx(0.5, abs=0.02)


class TestLipschitz:
    def test_linear(self):
        assert estimate_lipschitz(lambda x: 3 * x[:, 0], [-1], [1]).value == pytest.approx(3.0, rel=0.01)

    def test_abs(self):
        assert estimate_lipschitz(lambda x: np.abs(x[:, 0]), [-1], [1]).value == pytest.approx(1.0, rel=0.01)

    def test_gradient_refinement(self):
        est = estimate_lipschitz(lambda x: np.sin(4 * x[:, 0]), [-1], [1], grad=lambda x: 4 * np.cos(4 * x))
        assert 3.9 <= est.value <= 4.0 + 1e-12 and est.lower_bound

    def test_too_few_probes(self):
        with pytest.raises(ValueError):
            estimate_lipschitz(lambda x: x[:, 0], [0], [1], probes=10)

    def test_model_loss_reproducible(self, tiny_cnn):
        x0 = np.full((3, 8, 8), 0.5)

        def J(pts):
            return tiny_cnn.loss(pts.reshape(-1, 3, 8, 8), np.zeros(len(pts), dtype=int))

        def G(pts):
            return tiny_cnn.loss_and_grad(pts.reshape(-1, 3, 8, 8), np.zeros(len(pts), dtype=int))[1].reshape(len(pts), -1)

        lo, hi = np.zeros(x0.size), np.ones(x0.size)
        a = estimate_lipschitz(J, lo, hi, rng=0, grad=G).value
        b = estimate_lipschitz(J, lo, hi, rng=1, grad=G).value
        assert a > 0 and np.isfinite(a)
        assert abs(a - b) / a < 0.05


class TestBounds:
    def test_t1_tight(self):
        rep = check_bound(sign_field(), Smoother.gaussian(1.0), "T1", grid=[[0.0], [0.5]])
        assert 0.72 <= rep.max_estimate <= 0.88
        assert rep.max_estimate <= rep.bound + 3 * rep.max_se
        assert rep.verdict == PASS

    def test_t1_requires_unit_sigma(self):
        with pytest.raises(ValueError):
            theorem_bounds("T1", 1.0, Smoother.gaussian(2.0))

    def test_constant_field(self):
        rep = check_bound(constant_field([1.0, 1.0]), Smoother.gaussian(1.0, 2000), "T1", grid=[[0.0, 0.0]])
        assert rep.max_estimate == pytest.approx(0.0, abs=1e-9)
        assert rep.verdict == PASS

    def test_sigma_doubling_halves_slope(self):
        curve = slope_curve(sign_field(), [1.0, 2.0], grid=[[0.0]])
        assert curve[1][1] == pytest.approx(0.399, abs=0.03)
        assert curve[0][1] / curve[1][1] == pytest.approx(2.0, rel=0.06)

    @pytest.mark.parametrize("field", [sign_field(), tanh_field(), sign_field(2)])
    def test_monotone_in_sigma(self, field):
        grid = np.zeros((1, field.dim))
        assert is_monotone_in_sigma(slope_curve(field, [0.5, 1.0, 2.0, 4.0], 20_000, grid, n_directions=4))

    def test_t2_bounds_and_discrepancy(self):
        b = theorem_bounds("T2", 1.0, Smoother.gaussian(2.0))
        assert b["stated_bound"] == pytest.approx(SQRT_2_OVER_PI / 4)
        assert b["derived_bound"] == pytest.approx(SQRT_2_OVER_PI / 2)
        rep = check_bound(sign_field(), Smoother.gaussian(2.0), "T2", grid=[[0.0]])
        assert rep.verdict == INCONCLUSIVE and rep.notes

    def test_t2_at_unit_sigma_is_t1(self):
        rep = check_bound(sign_field(), Smoother.gaussian(1.0), "T2", grid=[[0.0]])
        assert rep.verdict == PASS and not rep.notes

    def test_t3_needs_a(self):
        with pytest.raises(ValueError):
            check_bound(sign_field(), Smoother("uniform", 1.0, 2000), "T3")

    def test_t3_uniform(self):
        # uniform(-1, 1) smoothing of sign has slope 1 at 0; A = 1 for this density
        rep = check_bound(sign_field(), Smoother("uniform", 1.0, 100_000), "T3", grid=[[0.0]], A=1.0)
        assert rep.max_estimate == pytest.approx(1.0, abs=0.05)
        assert rep.verdict in (PASS, INCONCLUSIVE)

    def test_unknown_theorem(self):
        with pytest.raises(ValueError):
            theorem_bounds("T4", 1.0, Smoother.gaussian())

    def test_unknown_lipschitz(self):
        with pytest.raises(ValueError):
            check_bound(linear_field(), Smoother.gaussian(1.0, 2000), "T1")

    def test_write(self, tmp_path):
        rep = check_bound(sign_field(), Smoother.gaussian(1.0, 2000), "T1", grid=[[0.0]])
        rep.write(tmp_path / "t.csv")
        assert (tmp_path / "t.csv").read_text().startswith("point,direction,estimate,se,bound,verdict")


class TestVerdict:
    def test_three_values(self):
        assert verdict(1.0, 0.01, 2.0) == PASS
        assert verdict(3.0, 0.01, 2.0) == FAIL
        assert verdict(2.0, 0.5, 2.0) == INCONCLUSIVE
        assert verdict(2.005, 0.002, 2.0) == PASS

    def test_directional_derivative_zero_field(self):
        f = GradientField(lambda x: np.zeros_like(x), 2, 0.0)
        est, se = directional_derivative(f, Smoother.gaussian(1.0, 1000), [0, 0], [1, 0])
        assert est == 0.0 and se == 0.0


class TestSmoothness:
    def test_cosine_study_small(self, tiny_mlp, tiny_cnn, images):
        comps = {"none": "identity", "gauss": "[gaussian_noise,gaussian_noise]", "dst": "dst"}
        pts, rho = smoothness_vs_transfer(tiny_mlp, [tiny_cnn], images, np.array([0, 1, 2]), comps,
                                          AttackConfig(0.05, iters=3))
        assert [p.composition for p in pts] == ["none", "gauss", "dst"]
        assert all(-1 <= p.mean_cosine <= 1 for p in pts)
        assert all(0 <= p.transfer <= 100 for p in pts)
        assert -1 <= rho <= 1 or np.isnan(rho)

    def test_needs_two_iterations(self, tiny_mlp, images):
        with pytest.raises(ValueError):
            smoothness_vs_transfer(tiny_mlp, [tiny_mlp], images, np.zeros(3, dtype=int),
                                   {"a": "identity", "b": "dst", "c": "gsdt"}, AttackConfig(0.05, iters=1))

    def test_model_field(self, tiny_mlp):
        f = model_field(tiny_mlp, 1, np.zeros((3, 8, 8)))
        out = f(np.full((2, f.dim), 0.5))
        assert out.shape == (2, 192)

    def test_spearman(self):
        assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
