import numpy as np
import pytest

from kinkqr import (
    DgpSpec,
    LongitudinalDataset,
    Subject,
    assemble_sandwich,
    estimate,
    estimate_concordance,
    estimate_density,
    generate,
    hall_sheather_bandwidth,
    score_carrier,
)
from kinkqr.covariance import (
    assemble_lambda_h,
    clip_density,
    DensityEstimates,
    WorkingCorrelation,
    difference_quotient_density,
)
from kinkqr.errors import InvalidInputError
from kinkqr.estimator import KinkFit

import oracles

# frozen via 30-digit arithmetic: 1.57 * n^(-1/3) * (1.5*phi(z)^2/(2z^2+1))^(1/3)
HS_05_1000 = 0.097395027071205803
HS_07_500 = 0.096744714600994549


class TestHallSheather:
    def test_frozen_values(self):
        assert hall_sheather_bandwidth(0.5, 1000) == pytest.approx(
            HS_05_1000, abs=1e-12
        )
        assert hall_sheather_bandwidth(0.7, 500) == pytest.approx(
            HS_07_500, abs=1e-12
        )

    def test_symmetric_bracket_at_median(self):
        # Phi^-1(0.5) = 0 makes the bracket denominator 1
        n = 800
        want = 1.57 * n ** (-1 / 3) * (1.5 / (2 * np.pi)) ** (1 / 3)
        assert hall_sheather_bandwidth(0.5, n) == pytest.approx(want, rel=1e-12)

    def test_decreasing_in_n(self):
        taus = (0.2, 0.5, 0.8)
        for tau in taus:
            bws = [hall_sheather_bandwidth(tau, n) for n in (100, 400, 1600, 6400)]
            assert all(a > b for a, b in zip(bws, bws[1:]))

    def test_clipped_inside_levels(self):
        for tau in (0.011, 0.5, 0.989):
            bw = hall_sheather_bandwidth(tau, 50)
            assert 0.0 < bw < min(tau, 1.0 - tau)
            assert 0.001 <= tau - bw and tau + bw <= 0.999

    def test_invalid_inputs(self):
        with pytest.raises(InvalidInputError):
            hall_sheather_bandwidth(0.0, 100)
        with pytest.raises(InvalidInputError):
            hall_sheather_bandwidth(0.5, 1)


class TestDifferenceQuotientDensity:
    def test_uniform_response_density_near_one(self):
        rng = np.random.default_rng(10)
        n = 2000
        y = rng.uniform(size=n)
        X = np.ones((n, 1))
        for tau in (0.3, 0.5, 0.7):
            f, bw, nclip = difference_quotient_density(X, y, tau)
            assert nclip == 0
            assert np.allclose(f, f[0])
            assert f[0] == pytest.approx(1.0, abs=0.15)

    def test_normal_response_density_at_median(self):
        rng = np.random.default_rng(11)
        n = 2000
        y = rng.normal(size=n)
        X = np.ones((n, 1))
        f, _, _ = difference_quotient_density(X, y, 0.5)
        assert f[0] == pytest.approx(0.3989422804, abs=0.06)

    def test_crossed_or_degenerate_spacing_clipped_to_zero(self):
        spacing = np.array([-0.5, 0.0, 5e-11, 1e-3, 2.0])
        f = clip_density(spacing, bandwidth=0.05)
        assert f[0] == 0.0 and f[1] == 0.0 and f[2] == 0.0
        assert f[3] == pytest.approx(2 * 0.05 / 1e-3)
        assert f[4] == pytest.approx(0.05)

    def test_estimate_density_shapes(self, case1_small, taus5):
        fit = estimate(case1_small, taus5)
        dens = estimate_density(fit, case1_small)
        assert dens.f_hat.shape == (5, case1_small.n)
        assert np.all(dens.f_hat >= 0.0)
        assert np.all(np.isfinite(dens.f_hat))
        assert dens.zero_fraction < 0.05
        for tau, bw in zip(dens.taus, dens.bandwidths):
            assert 0.0 < bw < min(tau, 1.0 - tau)


class TestScoreCarrier:
    def test_single_level_layout(self):
        theta = np.array([3.0, 1.0, -1.0, 0.2, 5.0])
        h = score_carrier((4.0, (2.0,)), theta, 1, 1)
        assert h.tolist() == [1.0, -1.0, 0.0, 2.0, -1.0]

    def test_block_zeroing_k2_of_3(self):
        q = 1
        eta = np.array([[3.0, 1.0, -1.0, 0.2]] * 3)
        theta = np.concatenate([eta.ravel(), [5.0]])
        h = score_carrier((4.0, (2.0,)), theta, 2, 3)
        p3 = q + 3
        assert np.all(h[:p3] == 0.0)
        assert np.all(h[2 * p3:3 * p3] == 0.0)
        assert h[p3] == 1.0

    def test_right_regime_uses_beta2(self):
        theta = np.array([3.0, 1.0, -1.5, 0.2, 5.0])
        h = score_carrier((7.0, (0.0,)), theta, 1, 1)
        assert h[-1] == pytest.approx(1.5)  # -beta2


def _shim_fit(dataset, taus, residuals):
    return KinkFit(
        t_hat=5.0,
        eta_hat=np.zeros((len(taus), 3 + dataset.q)),
        objective=0.0,
        search_interval=(0.0, 10.0),
        taus=tuple(taus),
        residuals=residuals,
    )


class TestConcordance:
    def test_independence_is_definitional(self, case1_small):
        fit = _shim_fit(case1_small, (0.3, 0.7),
                        np.zeros((2, case1_small.n)))
        corr = estimate_concordance(fit, case1_small, kind="independence")
        assert corr.delta_hat(0) == pytest.approx(0.09)
        assert corr.delta_hat(1) == pytest.approx(0.49)
        assert corr.xi_hat(0, 1) == pytest.approx(0.21)
        assert corr.pair_weight(0, 1) == pytest.approx(0.0)

    def test_independent_residuals_close_to_tau_squared(self):
        rng = np.random.default_rng(21)
        N, ni = 400, 5
        ids = np.repeat([f"s{i}" for i in range(N)], ni)
        ds = LongitudinalDataset.from_arrays(
            ids, rng.normal(size=N * ni), rng.uniform(0, 10, N * ni), None
        )
        tau = 0.4
        r = rng.normal(size=(1, ds.n))
        # center residuals so a fraction tau is negative
        r = r - np.quantile(r, 1 - tau)
        r = -r
        fit = _shim_fit(ds, (tau,), r)
        corr = estimate_concordance(fit, ds, kind="exchangeable")
        npairs = np.sum(ds.counts * (ds.counts - 1))
        se = np.sqrt(tau**2 * (1 - tau**2) / npairs)
        assert abs(corr.delta_hat(0) - tau**2) <= 3 * se + 0.01

    def test_comonotone_residuals_hit_upper_bound(self):
        N, ni, tau = 200, 5, 0.3
        ids = np.repeat([f"s{i}" for i in range(N)], ni)
        x = np.random.default_rng(3).uniform(0, 10, N * ni)
        ds = LongitudinalDataset.from_arrays(ids, np.zeros(N * ni), x, None)
        # identical sign within subject; exactly tau*N subjects negative
        signs = np.where(np.arange(N) < tau * N, -1.0, 1.0)
        r = np.repeat(signs, ni)[None, :]
        fit = _shim_fit(ds, (tau,), r)
        corr = estimate_concordance(fit, ds, kind="exchangeable")
        assert corr.delta_hat(0) == pytest.approx(tau, abs=1e-12)

    def test_frechet_clipping(self, case1_small):
        # all residuals negative would give delta = 1; clipped to tau
        tau = 0.6
        r = -np.ones((1, case1_small.n))
        fit = _shim_fit(case1_small, (tau,), r)
        corr = estimate_concordance(fit, case1_small, kind="exchangeable")
        assert corr.delta_hat(0) == pytest.approx(tau)
        # all positive gives 0, below the lower bound max(0, 2*tau-1)
        r = np.ones((1, case1_small.n))
        fit = _shim_fit(case1_small, (tau,), r)
        corr = estimate_concordance(fit, case1_small, kind="exchangeable")
        assert corr.delta_hat(0) == pytest.approx(max(0.0, 2 * tau - 1))

    def test_ar1_lag_fallback_warns(self):
        # n_i = 2 gives no lag-2 pairs at all; build one subject of 3 to
        # produce a sparse lag
        subs = [
            Subject("a", np.array([1.0, -1.0, 1.0]), np.arange(3.0),
                    np.empty((3, 0))),
            Subject("b", np.array([-1.0, 1.0]), np.arange(2.0),
                    np.empty((2, 0))),
        ]
        ds = LongitudinalDataset(subs)
        fit = _shim_fit(ds, (0.5,), (ds.y < 0).astype(float)[None, :] * -1.0)
        with pytest.warns(UserWarning, match="fewer than"):
            estimate_concordance(fit, ds, kind="ar1")


class TestSandwich:
    def test_hand_assembled_three_observation_dataset(self):
        subs = [
            Subject("a", np.array([1.0, 2.0]), np.array([3.0, 7.0]),
                    np.array([[1.0], [2.0]])),
            Subject("b", np.array([0.5]), np.array([5.5]),
                    np.array([[0.5]])),
        ]
        ds = LongitudinalDataset(subs)
        taus = (0.4, 0.6)
        eta = np.array([[1.0, 0.5, -0.5, 0.1], [2.0, 0.8, -0.2, 0.3]])
        t = 5.0
        theta = np.concatenate([eta.ravel(), [t]])
        fit = KinkFit(
            t_hat=t, eta_hat=eta, objective=0.0,
            search_interval=(3.0, 7.0), taus=taus,
            residuals=np.zeros((2, 3)),
        )
        f_hats = np.array([[0.3, 0.4, 0.5], [0.6, 0.2, 0.1]])
        dens = DensityEstimates(f_hat=f_hats, bandwidths=(0.05, 0.05), taus=taus)
        delta = np.array([[0.2], [0.41]])
        xi = np.array([[[0.2], [0.25]], [[0.25], [0.41]]])
        corr = WorkingCorrelation("exchangeable", taus, delta, xi, max_lag=1)

        lam, H, _, _ = assemble_lambda_h(fit, ds, densities=dens, correlation=corr)
        lam_o, h_o = oracles.hand_sandwich(
            ds, taus, theta, f_hats,
            delta=[0.2, 0.41],
            xi=[[0.2, 0.25], [0.25, 0.41]],
        )
        np.testing.assert_allclose(lam, lam_o, atol=1e-12)
        np.testing.assert_allclose(H, h_o, atol=1e-12)

    def test_independence_k1_reduces_to_lead_term(self, case1_small):
        fit = estimate(case1_small, [0.5])
        cov = assemble_sandwich(fit, case1_small, kind="independence")
        # H must equal tau(1-tau)/n * sum h h'
        theta = fit.theta
        acc = np.zeros_like(cov.h_hat)
        for s in case1_small.subjects:
            for j in range(s.n_obs):
                h = score_carrier((s.x[j], s.z[j]), theta, 1, 1)
                acc += 0.25 * np.outer(h, h)
        np.testing.assert_allclose(cov.h_hat, acc / case1_small.n, atol=1e-10)

    def test_psd_and_symmetry_invariants(self, case1_small, taus5):
        fit = estimate(case1_small, taus5)
        cov = assemble_sandwich(fit, case1_small, kind="exchangeable")
        assert np.max(np.abs(cov.h_hat - cov.h_hat.T)) <= 1e-10
        assert np.max(np.abs(cov.lambda_hat - cov.lambda_hat.T)) <= 1e-10
        assert np.linalg.eigvalsh(cov.h_hat)[0] >= -1e-8
        assert np.linalg.eigvalsh(cov.lambda_hat)[0] > 0.0
        assert np.linalg.eigvalsh(cov.sigma_hat)[0] >= -1e-8
        assert np.all(cov.se >= 0.0)
        assert cov.se_t > 0.0

    def test_se_tracks_monte_carlo_sd_k1(self):
        # iid noise, K=1, independence kind: SE close to the MC spread
        reps = 24
        t_hats, ses = [], []
        for seed in range(reps):
            ds = generate(DgpSpec(case=1, N=100, seed=1000 + seed))
            fit = estimate(ds, [0.5])
            cov = assemble_sandwich(fit, ds, kind="independence")
            t_hats.append(fit.t_hat)
            ses.append(cov.se_t)
        sd = np.std(t_hats, ddof=1)
        # generous desk-scale band; the tight version runs in acceptance
        assert np.mean(ses) == pytest.approx(sd, rel=0.5)

    def test_ar1_kind_on_autocorrelated_data(self):
        # Case-2 noise is AR(1): lag-1 concordance must exceed lag-4, and
        # the assembled sandwich must stay well-posed
        ds = generate(DgpSpec(case=2, N=150, seed=17))
        fit = estimate(ds, [0.4, 0.6])
        corr = estimate_concordance(fit, ds, kind="ar1")
        assert corr.max_lag == 5
        assert corr.delta_hat(0, lag=1) > corr.delta_hat(0, lag=4)
        cov = assemble_sandwich(fit, ds, kind="ar1")
        assert cov.kind == "ar1"
        assert cov.se_t > 0.0
        assert np.linalg.eigvalsh(cov.h_hat)[0] >= -1e-8

    def test_payload_round_trips_dimension(self, case1_small):
        fit = estimate(case1_small, [0.4, 0.6])
        cov = assemble_sandwich(fit, case1_small)
        payload = cov.to_payload()
        d = payload["dimension"]
        assert d == 2 * (case1_small.q + 3) + 1
        assert len(payload["sigma"]) == d * d
        assert len(payload["se"]) == d
