import numpy as np
import pytest
from scipy.stats import norm

from arblab import models, pde
from arblab.errors import (
    ConfigInvalid,
    DomainError,
    ParamInvalid,
    StabilityViolation,
    UnsupportedDimension,
)
from arblab.exitmc import estimate_exit_probability
from arblab.pde import GridSpec, PdeSolution, apply_generator, solve_min_solution, solve_weight_equation
from arblab.sde import SimConfig


def killed_radial_survival(tau, x, barrier):
    """Exact survival of the single-asset capitalization above an absorbing
    barrier: first-passage law of the radial 3-D Brownian part."""
    return 1.0 - (barrier / x) * 2.0 * norm.sf((x - barrier) / np.sqrt(tau))


@pytest.fixture(scope="module")
def bessel_sol(bessel3):
    grid = GridSpec(n=1, lower=(0.05,), upper=(20.0,), points_per_axis=401,
                    d_tau=0.05, horizon=1.0)
    return solve_min_solution(bessel3, grid)


@pytest.fixture(scope="module")
def volstab_sol(volstab2):
    grid = GridSpec(n=2, lower=(0.01, 0.01), upper=(8.0, 8.0),
                    points_per_axis=97, d_tau=0.25, horizon=1.0)
    return solve_min_solution(volstab2, grid)


@pytest.fixture(scope="module")
def weight_sol(volstab2):
    grid = GridSpec(n=1, lower=(1e-4,), upper=(1 - 1e-4,), points_per_axis=513,
                    d_tau=0.05, horizon=1.0)
    return solve_weight_equation(volstab2, grid)


class TestOrthantSolver:
    def test_bessel3_matches_exact_barrier_survival(self, bessel_sol):
        for tau in (0.25, 0.5, 1.0):
            for x in (0.5, 1.0, 2.0):
                got = float(bessel_sol.value_at(tau, [x]))
                want = killed_radial_survival(tau, x, 0.05)
                assert got == pytest.approx(want, abs=5e-3)

    def test_bessel3_default_grid_near_one(self, bessel3):
        sol = solve_min_solution(bessel3, GridSpec.default_box([1.0], 1.0))
        val = float(sol.value_at(1.0, [1.0]))
        assert val >= 0.99
        assert val == pytest.approx(killed_radial_survival(1.0, 1.0, 0.01), abs=5e-3)

    def test_initial_slice_identically_one(self, bessel_sol, volstab_sol):
        assert np.all(bessel_sol.values[0] == 1.0)
        assert np.all(volstab_sol.values[0] == 1.0)

    def test_values_bounded_and_monotone_in_tau(self, volstab_sol):
        v = volstab_sol.values
        assert v.min() >= 0.0 and v.max() <= 1.0
        assert np.all(np.diff(v, axis=0) <= 1e-12)

    def test_volstab_agrees_with_matched_barrier_exit_mc(self, volstab2, volstab_sol):
        # the solver kills at the inner truncation offset; the exit estimator
        # with the same detection threshold estimates the same quantity
        cfg = SimConfig.for_horizon(1.0, dt=5e-4, seed=97, hit_epsilon=0.01,
                                    scheme="full_truncation_euler")
        est = estimate_exit_probability(volstab2, [1.0, 1.0], 1.0, 20000, cfg)
        got = float(volstab_sol.value_at(1.0, [1.0, 1.0]))
        assert abs(got - est.value) < 0.02

    def test_truncation_monotonicity(self, bessel3):
        small = solve_min_solution(bessel3, GridSpec(
            n=1, lower=(0.05,), upper=(15.0,), points_per_axis=301,
            d_tau=0.25, horizon=1.0))
        large = solve_min_solution(bessel3, GridSpec(
            n=1, lower=(0.02,), upper=(25.0,), points_per_axis=501,
            d_tau=0.25, horizon=1.0))
        for x in (0.5, 1.0, 3.0):
            u_small = float(small.value_at(1.0, [x]))
            u_large = float(large.value_at(1.0, [x]))
            assert u_large >= u_small - 1e-6

    def test_dimension_mismatch_rejected(self, volstab2):
        with pytest.raises(ConfigInvalid):
            solve_min_solution(volstab2, GridSpec(
                n=1, lower=(0.1,), upper=(5.0,), points_per_axis=33,
                d_tau=0.1, horizon=0.5))

    def test_stability_budget_refusal(self, bessel3):
        with pytest.raises(StabilityViolation):
            solve_min_solution(bessel3, GridSpec(
                n=1, lower=(1e-5,), upper=(1.0,), points_per_axis=10001,
                d_tau=0.5, horizon=1.0))

    def test_three_dimensional_smoke(self, volstab3):
        grid = GridSpec(n=3, lower=(0.05,) * 3, upper=(6.0,) * 3,
                        points_per_axis=21, d_tau=0.25, horizon=0.5)
        sol = solve_min_solution(volstab3, grid)
        v = float(sol.value_at(0.5, [1.0, 1.0, 1.0]))
        assert 0.0 < v < 1.0
        assert np.all(np.diff(sol.values, axis=0) <= 1e-12)


class TestOperatorStencil:
    def test_cross_terms_exact_on_quadratics(self):
        # centered stencils differentiate x1*x2 exactly, so the discrete
        # operator must equal a_12(x) + bhat_1 x_2 + bhat_2 x_1 node-exactly
        sigma = np.array([[0.9, 0.0], [0.3, 0.7]])
        m = models.constant_coefficient("corr2", [0.2, 0.2], sigma,
                                        H_linear=[0.2, 0.2])
        grid = GridSpec(n=2, lower=(0.5, 0.5), upper=(3.0, 3.0),
                        points_per_axis=17, d_tau=0.1, horizon=0.1)
        mesh = np.stack(np.meshgrid(*grid.axes, indexing="ij"), axis=-1)
        field = mesh[..., 0] * mesh[..., 1]
        got = apply_generator(m, grid, field)
        A = m.frak_cov(mesh)
        B = m.aux_drift(mesh)
        want = A[..., 0, 1] + B[..., 0] * mesh[..., 1] + B[..., 1] * mesh[..., 0]
        core = (slice(1, -1), slice(1, -1))
        np.testing.assert_allclose(got[core], want[core], rtol=1e-12)


class TestWeightEquation:
    def test_survival_vs_killed_scalar_mc(self, weight_sol):
        # oracle: absorbed scalar diffusion d nu = sqrt(nu(1-nu)) dW
        dt, eps = 5e-4, 1e-4
        g = np.random.default_rng(3)
        n = 20000
        nu = np.full(n, 0.5)
        alive = np.ones(n, dtype=bool)
        for _ in range(2000):
            z = g.standard_normal(n)
            nu = np.where(alive,
                          nu + np.sqrt(np.maximum(nu * (1 - nu), 0.0) * dt) * z, nu)
            alive &= (nu > eps) & (nu < 1 - eps)
        p = alive.mean()
        se = np.sqrt(p * (1 - p) / n)
        got = float(weight_sol.value_at(1.0, [0.5]))
        assert abs(got - p) < 3.0 * se + 0.01

    def test_initial_slice_and_symmetry(self, weight_sol):
        assert np.all(weight_sol.values[0] == 1.0)
        v = weight_sol.values
        np.testing.assert_allclose(v, v[:, ::-1], atol=1e-10)

    def test_weight_form_required(self, bessel3):
        grid = GridSpec(n=1, lower=(0.01,), upper=(0.99,), points_per_axis=33,
                        d_tau=0.1, horizon=0.5)
        with pytest.raises(UnsupportedDimension):
            solve_weight_equation(bessel3, grid)

    def test_three_assets_unsupported(self, volstab3):
        grid = GridSpec(n=1, lower=(0.01,), upper=(0.99,), points_per_axis=33,
                        d_tau=0.1, horizon=0.5)
        with pytest.raises(UnsupportedDimension):
            solve_weight_equation(volstab3, grid)

    def test_interval_must_sit_inside_simplex(self, volstab2):
        grid = GridSpec(n=1, lower=(0.1,), upper=(1.5,), points_per_axis=33,
                        d_tau=0.1, horizon=0.5)
        with pytest.raises(ConfigInvalid):
            solve_weight_equation(volstab2, grid)


class TestQuery:
    def test_node_exactness(self, bessel_sol):
        ax = bessel_sol.grid.axes[0]
        k = 200
        got = float(bessel_sol.value_at(1.0, [ax[k]]))
        assert got == bessel_sol.values[-1][k]

    def test_gradient_small_in_bulk(self, bessel_sol):
        lo, hi = 0.05, 20.0
        quarter = lo + 0.25 * (hi - lo)
        for x in np.linspace(quarter, hi - 0.25 * (hi - lo), 7):
            q = bessel_sol.query(1.0, [x])
            assert abs(q["grad_log"][0]) < 0.02

    def test_gradient_symmetric_for_symmetric_model(self, volstab_sol):
        q = volstab_sol.query(1.0, [1.0, 1.0])
        assert abs(q["grad_log"][0] - q["grad_log"][1]) < 1e-8

    def test_batched_query(self, volstab_sol):
        pts = np.array([[1.0, 1.0], [2.0, 1.0], [0.5, 3.0]])
        q = volstab_sol.query(0.5, pts)
        assert q["value"].shape == (3,)
        assert q["grad_log"].shape == (3, 2)

    def test_domain_errors(self, bessel_sol):
        with pytest.raises(DomainError):
            bessel_sol.value_at(1.0, [25.0])
        with pytest.raises(DomainError):
            bessel_sol.value_at(2.0, [1.0])


class TestDiagnostic:
    def test_arbitrage_model_flags_all_horizons(self, volstab_sol):
        d = pde.proposition2_diagnostic(volstab_sol)
        assert d["premise"]
        assert d["all_horizons_arbitrage"]
        assert not d["violated"]

    def test_no_arbitrage_model_reports_truncation_warning(self, bessel_sol):
        d = pde.proposition2_diagnostic(bessel_sol)
        # near the truncation edge the killed solution dips below 1, so the
        # premise fires; in the bulk it stays at 1, so the all-horizons
        # conclusion fails and the warning flag must be raised
        assert d["premise"]
        assert not d["all_horizons_arbitrage"]
        assert d["violated"]
        assert max(d["max_interior_by_slice"]) > 1.0 - 1e-6


class TestPersistence:
    def test_export_load_roundtrip(self, weight_sol, tmp_path):
        csv_path = str(tmp_path / "sol.csv")
        head_path = str(tmp_path / "sol.json")
        weight_sol.export(csv_path, head_path)
        back = PdeSolution.load(csv_path, head_path)
        np.testing.assert_allclose(back.values, weight_sol.values, rtol=1e-15)
        assert back.kind == weight_sol.kind
        got = float(back.value_at(0.5, [0.3]))
        want = float(weight_sol.value_at(0.5, [0.3]))
        assert got == pytest.approx(want, rel=1e-12)


class TestGridSpec:
    def test_validation(self):
        with pytest.raises(ConfigInvalid):
            GridSpec(n=1, lower=(0.0,), upper=(1.0,), points_per_axis=33,
                     d_tau=0.1, horizon=1.0)
        with pytest.raises(ConfigInvalid):
            GridSpec(n=1, lower=(1.0,), upper=(0.5,), points_per_axis=33,
                     d_tau=0.1, horizon=1.0)
        with pytest.raises(ConfigInvalid):
            GridSpec(n=1, lower=(0.1,), upper=(1.0,), points_per_axis=8,
                     d_tau=0.1, horizon=1.0)
        with pytest.raises(UnsupportedDimension):
            GridSpec(n=4, lower=(0.1,) * 4, upper=(1.0,) * 4,
                     points_per_axis=17, d_tau=0.1, horizon=1.0)

    def test_default_box(self):
        g = GridSpec.default_box([2.0, 4.0], 1.0)
        assert g.lower == (0.02, 0.04)
        assert g.upper == (60.0, 120.0)
