import numpy as np
import pytest

from arblab import exitmc, models
from arblab.errors import OverflowGuard
from arblab.exitmc import (
    agreement_table,
    estimate_deflated_value,
    estimate_deflator_expectation,
    estimate_exit_probability,
)
from arblab.sde import SimConfig, simulate_market

from conftest import mean_and_se, radial3_oracle


def cfg_for(T, seed, dt=5e-4, scheme="euler", eps=None):
    return SimConfig.for_horizon(T, dt=dt, seed=seed, scheme=scheme,
                                 hit_epsilon=eps)


class TestExitProbability:
    def test_bessel3_close_to_one(self, bessel3):
        est = estimate_exit_probability(bessel3, [1.0], 1.0, 10000,
                                        cfg_for(1.0, 1, eps=1e-4))
        assert est.value >= 0.99
        assert est.ci_high <= 1.0
        assert est.method == "exit_probability"

    def test_zero_horizon_is_one(self, volstab2):
        est = estimate_exit_probability(volstab2, [1.0, 1.0], 0.0, 100,
                                        SimConfig.for_horizon(0.0, seed=2))
        assert est.value == 1.0

    def test_monotone_in_horizon_same_seed(self, volstab2):
        dt = 1e-3
        vals = []
        for n_steps in (500, 1000):
            cfg = SimConfig(dt=dt, n_steps=n_steps, seed=3, record_stride=n_steps,
                            scheme="full_truncation_euler")
            est = estimate_exit_probability(volstab2, [1.0, 1.0], n_steps * dt,
                                            4000, cfg)
            vals.append(est.value)
        assert vals[1] <= vals[0]

    def test_refinement_stability(self, volstab2):
        base = estimate_exit_probability(
            volstab2, [1.0, 1.0], 1.0, 20000,
            cfg_for(1.0, 5, dt=1e-3, scheme="full_truncation_euler", eps=4e-4))
        fine = estimate_exit_probability(
            volstab2, [1.0, 1.0], 1.0, 20000,
            cfg_for(1.0, 6, dt=2.5e-4, scheme="full_truncation_euler", eps=1e-4))
        assert abs(base.value - fine.value) < 3.0 * np.hypot(base.stderr, fine.stderr)

    def test_wilson_interval_near_edges(self):
        p, se, lo, hi = exitmc._binomial_interval(0, 100)
        assert p == 0.0 and lo == pytest.approx(0.0, abs=1e-12) and hi > 0.0
        p, se, lo, hi = exitmc._binomial_interval(100, 100)
        assert p == 1.0 and hi == 1.0 and lo < 1.0
        p, se, lo, hi = exitmc._binomial_interval(50, 100)
        assert lo == pytest.approx(0.5 - 1.96 * se, abs=1e-3)


class TestDeflatedValue:
    def test_bessel3_exactly_one(self, bessel3):
        # the deflated capitalization is constant along paths: bit-exact mean
        est = estimate_deflated_value(bessel3, [1.0], 1.0, 2000, cfg_for(1.0, 7))
        assert est.value == 1.0
        assert est.stderr == 0.0

    def test_zero_horizon_is_one(self, volstab2):
        est = estimate_deflated_value(volstab2, [1.0, 1.0], 0.0, 64,
                                      SimConfig.for_horizon(0.0, seed=1))
        assert est.value == 1.0

    def test_product_functional_identity(self, volstab2):
        # with zeta = 1 the per-path deflated value reduces to
        # (x1 x2 / (x1 + x2)) * (X1 + X2) / (X1 X2) at the terminal state
        x0 = np.array([1.0, 2.0])
        cfg = cfg_for(1.0, 11, dt=1e-3, scheme="full_truncation_euler")
        batch = simulate_market(volstab2, x0, 1.0, 2000, cfg)
        est = estimate_deflated_value(volstab2, x0, 1.0, 2000, cfg, paths=batch)
        term = batch.terminal
        w = (x0.prod() / x0.sum()) * term.sum(axis=1) / term.prod(axis=1)
        assert est.value == pytest.approx(w.mean(), rel=1e-12)

    def test_cross_estimator_agreement(self, volstab2):
        exit_est = estimate_exit_probability(
            volstab2, [1.0, 1.0], 1.0, 20000,
            cfg_for(1.0, 21, dt=5e-4, scheme="full_truncation_euler"))
        defl_est = estimate_deflated_value(
            volstab2, [1.0, 1.0], 1.0, 20000,
            cfg_for(1.0, 22, dt=5e-4, scheme="full_truncation_euler"))
        joint = np.hypot(exit_est.stderr, defl_est.stderr)
        assert abs(exit_est.value - defl_est.value) < 3.0 * joint + 0.01

    def test_supermartingale_bound(self, volstab2, bessel3):
        for model, x0, scheme in ((volstab2, [1.0, 1.0], "full_truncation_euler"),
                                  (bessel3, [1.0], "euler")):
            for T in (0.25, 1.0):
                est = estimate_deflated_value(model, x0, T, 4000,
                                              cfg_for(T, 31, dt=1e-3, scheme=scheme))
                assert est.value <= 1.0 + 3.0 * est.stderr + 1e-12

    def test_overflow_guard_trips(self):
        m = models.ModelSpec(
            name="explosive",
            n=1,
            rate_fn=lambda x: np.full(x.shape, 3.0),
            vol_fn=lambda x: np.ones(x.shape + (1,)),
            deflator_H=lambda x: -500.0 * np.log(x[..., 0]),
            deflator_k=lambda x: np.zeros(x.shape[:-1]),
            grad_H=lambda x: -500.0 / x,
        )
        with pytest.raises(OverflowGuard):
            estimate_deflator_expectation(m, [1.0], 1.0, 500, cfg_for(1.0, 1, dt=1e-3))


class TestDeflatorExpectation:
    def test_bessel3_vs_brownian_oracle(self, bessel3):
        est = estimate_deflator_expectation(bessel3, [1.0], 1.0, 20000,
                                            cfg_for(1.0, 41))
        oracle = 1.0 / radial3_oracle(1.0, 1.0, 400000, seed=9)
        m_or, se_or = mean_and_se(oracle)
        assert abs(est.value - m_or) < 3.0 * np.hypot(est.stderr, se_or)
        # strictly below one: the deflator is a strict local martingale
        assert est.value < 1.0 - 5.0 * est.stderr

    def test_supermartingale_monotone_in_horizon(self, bessel3):
        est1 = estimate_deflator_expectation(bessel3, [1.0], 1.0, 20000,
                                             cfg_for(1.0, 51, dt=1e-3))
        est4 = estimate_deflator_expectation(bessel3, [1.0], 4.0, 20000,
                                             cfg_for(4.0, 52, dt=1e-3))
        assert est4.value < est1.value
        for T, est, seed in ((1.0, est1, 61), (4.0, est4, 62)):
            oracle = 1.0 / radial3_oracle(1.0, T, 400000, seed=seed)
            m_or, se_or = mean_and_se(oracle)
            assert abs(est.value - m_or) < 3.0 * np.hypot(est.stderr, se_or)

    def test_trivial_deflator_is_one(self):
        m = models.constant_coefficient("driftless", [0.0, 0.0],
                                        [[0.4, 0.0], [0.0, 0.4]])
        assert m.params["k_const"] == 0.0
        est = estimate_deflator_expectation(m, [1.0, 1.0], 1.0, 500,
                                            cfg_for(1.0, 71, dt=1e-3))
        assert est.value == 1.0
        assert est.stderr == 0.0


class TestPlumbing:
    def test_estimate_all_and_agreement(self, volstab2):
        out = exitmc.estimate_all(volstab2, [1.0, 1.0], 0.5, 2000,
                                  cfg_for(0.5, 81, dt=1e-3,
                                          scheme="full_truncation_euler"))
        assert set(out["estimates"]) == {"exit_probability", "deflated_value",
                                         "deflator_expectation"}
        assert out["agreement"][0]["sigmas_apart"] < 4.0

    def test_estimate_to_dict_roundtrip(self, bessel3):
        est = estimate_exit_probability(bessel3, [1.0], 0.1, 200,
                                        cfg_for(0.1, 91, dt=1e-3))
        d = est.to_dict()
        assert d["method"] == "exit_probability"
        assert d["n_paths"] == 200
        assert 0.0 <= d["ci"][0] <= d["value"] <= d["ci"][1] <= 1.0

    def test_agreement_table_zero_sigma(self):
        a = exitmc.ExitEstimate(1.0, 0.0, 1.0, 1.0, 10, "deflated_value", {})
        b = exitmc.ExitEstimate(1.0, 0.0, 1.0, 1.0, 10, "exit_probability", {})
        rows = agreement_table([a, b])
        assert rows[0]["sigmas_apart"] == 0.0
