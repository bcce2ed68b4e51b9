"""Empirical Bayes: sufficient statistics, density backends, Tweedie map, risks."""
from __future__ import annotations

import numpy as np
import numpy.testing as npt
import pytest

from dynevent import ebayes as eb
from dynevent.model import CommonParams, EventDesign, PanelData, PriorParams
from dynevent.simulate import DgpSpec, PriorSpec, design_by_name, simulate


def _fixture_design():
    design = EventDesign(t0=3, J=1, p=1)
    theta = CommonParams(rho_y=0.8, rho_delta=[0.5], sigma2_u=0.1, sigma2_eps=0.04)
    return design, theta


def _toy_ss(lam_hat, sigma_v, y0):
    design, theta = _fixture_design()
    return eb.SuffStats(
        np.atleast_2d(np.asarray(lam_hat, float)),
        np.asarray(sigma_v, float),
        np.atleast_1d(np.asarray(y0, float)),
        design,
        theta,
    )


# ---------------------------------------------------------------------------
# sufficient statistics


def test_sufficient_stats_matches_hand_algebra():
    design, theta = _fixture_design()
    rng = np.random.default_rng(1)
    Y = rng.normal(size=(3, 5))
    panel = PanelData(Y)
    ss = eb.sufficient_stats(panel, design, theta)

    W = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 0.5]])
    w_pinv = np.linalg.inv(W.T @ W) @ W.T
    ytil = Y[:, 1:] - 0.8 * Y[:, :-1]
    npt.assert_allclose(ss.lambda_hat, ytil @ w_pinv.T, rtol=1e-12)
    sig = np.diag([0.1, 0.1, 0.1, 0.14])
    npt.assert_allclose(ss.sigma_v, w_pinv @ sig @ w_pinv.T, rtol=1e-12)
    npt.assert_allclose(ss.y0, Y[:, 0])


def test_sufficient_stats_noise_free_recovers_effects():
    spec = design_by_name("case3-normal-crc-corr", n_units=150, seed=3)
    theta = CommonParams(
        rho_y=spec.theta.rho_y, rho_delta=spec.theta.rho_delta, sigma2_u=1e-12, sigma2_eps=1e-12
    )
    sim = simulate(DgpSpec("nf", 150, spec.T, spec.design, theta, spec.prior, seed=3))
    ss = eb.sufficient_stats(sim.panel, spec.design, theta)
    npt.assert_allclose(ss.lambda_hat, sim.lambda_matrix, atol=1e-4)


def test_sufficient_stats_noise_cov_matches_simulation():
    spec = design_by_name("case1-normal-rc-indep", n_units=100_000, seed=9)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    emp = np.cov((ss.lambda_hat - sim.lambda_matrix).T, ddof=0)
    npt.assert_allclose(emp, ss.sigma_v, rtol=0.03)


# ---------------------------------------------------------------------------
# parametric backend and the Tweedie map


def test_conjugate_fixture():
    ss = _toy_ss([[2.0, 2.0]], np.eye(2), [0.0])
    prior = PriorParams(b0=np.zeros(2), b1=np.zeros(2), sigma_lambda=np.eye(2))
    res = eb.tweedie(ss, eb.fit_parametric(ss, prior))
    npt.assert_allclose(res.lambda_tilde, [[1.0, 1.0]], atol=1e-12)


def test_gradient_path_equals_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(40):
        p = int(rng.integers(1, 3))
        d = 1 + p
        design = EventDesign(t0=3, J=2, p=p)
        theta = CommonParams(
            rho_y=0.6, rho_delta=[0.5, 0.1][:p], sigma2_u=0.2, sigma2_eps=0.1
        )
        A = rng.normal(size=(d, d))
        B = rng.normal(size=(d, d))
        prior = PriorParams(
            b0=rng.normal(size=d),
            b1=rng.normal(size=d),
            sigma_lambda=A @ A.T + 0.4 * np.eye(d),
        )
        ss = eb.SuffStats(
            rng.normal(size=(6, d)), B @ B.T + 0.3 * np.eye(d), rng.normal(size=6), design, theta
        )
        res = eb.tweedie(ss, eb.fit_parametric(ss, prior))
        npt.assert_allclose(res.lambda_tilde, eb.conjugate_posterior_mean(ss, prior), atol=1e-8)


def test_full_shrinkage_when_prior_is_degenerate():
    ss = _toy_ss([[0.7, -1.2], [2.0, 0.3]], 0.5 * np.eye(2), [0.4, -0.6])
    prior = PriorParams(b0=np.array([1.0, 2.0]), b1=np.array([0.5, 0.0]), sigma_lambda=np.zeros((2, 2)))
    res = eb.tweedie(ss, eb.fit_parametric(ss, prior))
    expected = prior.b0 + np.outer(ss.y0, prior.b1)
    npt.assert_allclose(res.lambda_tilde, expected, atol=1e-10)


def test_zero_correction_at_the_mode():
    ss = _toy_ss([[1.0, 2.0]], np.eye(2), [0.5])
    prior = PriorParams(b0=np.array([1.0, 2.0]), b1=np.zeros(2), sigma_lambda=np.eye(2))
    ss.lambda_hat[0] = prior.b0 + ss.y0[0] * prior.b1
    res = eb.tweedie(ss, eb.fit_parametric(ss, prior))
    npt.assert_allclose(res.lambda_tilde, ss.lambda_hat, atol=1e-12)


def test_underflow_falls_back_to_raw():
    ss = _toy_ss([[0.5, 0.5], [90.0, 90.0]], 0.2 * np.eye(2), [0.0, 0.0])
    prior = PriorParams(b0=np.zeros(2), b1=np.zeros(2), sigma_lambda=np.eye(2))
    res = eb.tweedie(ss, eb.fit_parametric(ss, prior))
    assert res.fallback_count == 1
    npt.assert_allclose(res.lambda_tilde[1], [90.0, 90.0])
    assert not np.allclose(res.lambda_tilde[0], ss.lambda_hat[0])


def test_truncation_monotonicity_and_count():
    rng = np.random.default_rng(8)
    ss = _toy_ss(rng.normal(scale=3.0, size=(200, 2)), 0.5 * np.eye(2), rng.normal(size=200))
    prior = PriorParams(b0=np.zeros(2), b1=np.zeros(2), sigma_lambda=4.0 * np.eye(2))
    free = eb.tweedie(ss, eb.fit_parametric(ss, prior), c_n=None)
    assert free.truncation_count == 0
    c = 2.0
    clipped = eb.tweedie(ss, eb.fit_parametric(ss, prior), c_n=c)
    norms = np.linalg.norm(free.lambda_tilde, axis=1)
    over = norms > c
    assert clipped.truncation_count == int(over.sum()) > 0
    npt.assert_allclose(clipped.lambda_tilde[~over], free.lambda_tilde[~over])
    npt.assert_allclose(np.linalg.norm(clipped.lambda_tilde[over], axis=1), c)


def test_default_truncation_radius():
    rng = np.random.default_rng(5)
    ss = _toy_ss(rng.normal(size=(500, 2)), np.eye(2), rng.normal(size=500))
    norms = np.linalg.norm(ss.lambda_hat, axis=1)
    assert eb.default_truncation_radius(ss) == pytest.approx(10.0 * norms.std())


def test_trajectories_follow_effect_recursion():
    spec = design_by_name("case4-normal-crc-corr", n_units=400, seed=6)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    prior = PriorParams(
        b0=spec.prior.mean(), b1=spec.prior.crc_slope, sigma_lambda=spec.prior.conditional_cov()
    )
    res = eb.tweedie(ss, eb.fit_parametric(ss, prior))
    r1, r2 = spec.theta.rho_delta
    traj = res.trajectories
    npt.assert_allclose(traj[:, 0], res.delta_init[:, 0])
    npt.assert_allclose(traj[:, 1], res.delta_init[:, 1])
    for j in range(2, spec.design.J + 1):
        npt.assert_allclose(traj[:, j], r1 * traj[:, j - 1] + r2 * traj[:, j - 2], rtol=1e-10)


# ---------------------------------------------------------------------------
# kernel backend


def test_kernel_two_point_leave_one_out():
    design, theta = _fixture_design()
    z = np.array([[0.0, 0.0, 0.0], [1.0, -1.0, 0.5]])
    ss = eb.SuffStats(z[:, :2], np.eye(2), z[:, 2], design, theta)
    kb = eb.fit_kernel(ss, bandwidth=0.7)
    logp, _ = kb.evaluate_insample()
    diff = (z[0] - z[1]) / 0.7
    expected = -0.5 * diff @ diff - 3 * np.log(0.7) - 1.5 * np.log(2 * np.pi)
    assert logp[0] == pytest.approx(expected, rel=1e-12)
    assert logp[1] == pytest.approx(expected, rel=1e-12)


def test_kernel_rejects_single_unit():
    design, theta = _fixture_design()
    ss = eb.SuffStats(np.zeros((1, 2)), np.eye(2), np.zeros(1), design, theta)
    with pytest.raises(ValueError, match="two units"):
        eb.fit_kernel(ss)


def test_kernel_gradient_matches_finite_differences():
    spec = design_by_name("case2-normal-crc-indep", n_units=300, seed=13)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    kb = eb.fit_kernel(ss)
    rng = np.random.default_rng(1)
    pts_l = ss.lambda_hat[:25] + rng.normal(scale=0.2, size=(25, 3))
    pts_y = ss.y0[:25]
    _, grad = kb.evaluate(pts_l, pts_y)
    h = 1e-5
    for j in range(3):
        step = np.zeros(3)
        step[j] = h
        up, _ = kb.evaluate(pts_l + step, pts_y)
        dn, _ = kb.evaluate(pts_l - step, pts_y)
        fd = (up - dn) / (2 * h)
        npt.assert_allclose(grad[:, j], fd, rtol=1e-6)


def test_kernel_silverman_bandwidths():
    spec = design_by_name("case1-normal-rc-indep", n_units=500, seed=2)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    kb = eb.fit_kernel(ss)
    z = np.column_stack([ss.lambda_hat, ss.y0])
    expected = z.std(axis=0, ddof=1) * (4.0 / (6.0 * 500)) ** (1.0 / 8.0)
    npt.assert_allclose(kb.bandwidths, expected, rtol=1e-12)
    assert kb.tweedie_bandwidth == pytest.approx(np.exp(np.log(expected[:3]).mean()))


def test_kernel_explicit_inflation_changes_scale():
    spec = design_by_name("case1-normal-rc-indep", n_units=200, seed=4)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    kb = eb.fit_kernel(ss)
    _, grad = kb.evaluate_insample()
    plain = eb.tweedie(ss, kb)
    inflated = eb.tweedie(ss, kb, b_n=0.5)
    assert plain.bandwidth is None
    assert inflated.bandwidth == pytest.approx(0.5)
    npt.assert_allclose(plain.lambda_tilde, ss.lambda_hat + grad @ ss.sigma_v, atol=1e-12)
    npt.assert_allclose(
        inflated.lambda_tilde, ss.lambda_hat + grad @ (ss.sigma_v + 0.25 * np.eye(3)), atol=1e-12
    )


def test_kernel_risk_close_to_parametric_on_gaussian_dgp():
    spec = design_by_name("case1-normal-rc-indep", n_units=10_000, seed=12)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    prior = PriorParams(
        b0=spec.prior.mean(), b1=spec.prior.crc_slope, sigma_lambda=spec.prior.conditional_cov()
    )
    risk_par = eb.compound_risk(eb.tweedie(ss, eb.fit_parametric(ss, prior)), sim)
    risk_ker = eb.compound_risk(eb.tweedie(ss, eb.fit_kernel(ss)), sim)
    assert risk_ker <= 1.10 * risk_par


# ---------------------------------------------------------------------------
# mixture backend


def test_mixture_single_component_equals_joint_gaussian_fit():
    spec = design_by_name("case1-normal-crc-indep", n_units=4000, seed=7)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    mb = eb.fit_mixture(ss, n_components=1)
    d = ss.n_effects
    mu, S = mb.means[0], mb.covs[0]
    b1 = S[:d, d] / S[d, d]
    b0 = mu[:d] - b1 * mu[d]
    cond = S[:d, :d] - np.outer(S[:d, d], S[:d, d]) / S[d, d]
    implied = PriorParams(b0=b0, b1=b1, sigma_lambda=cond - ss.sigma_v)
    res_mix = eb.tweedie(ss, mb)
    res_par = eb.tweedie(ss, eb.fit_parametric(ss, implied))
    npt.assert_allclose(res_mix.lambda_tilde, res_par.lambda_tilde, atol=1e-6)


def test_mixture_em_loglik_monotone():
    spec = design_by_name("case3-nonnormal-crc-corr", n_units=2000, seed=8)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    mb = eb.fit_mixture(ss, n_components=3)
    trace = np.asarray(mb.loglik_trace)
    assert trace.size >= 2
    assert np.all(np.diff(trace) >= -1e-8)


def test_mixture_rejects_zero_components():
    spec = design_by_name("case1-normal-rc-indep", n_units=50, seed=1)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    with pytest.raises(ValueError, match="component"):
        eb.fit_mixture(ss, n_components=0)


def test_mixture_beats_parametric_on_bimodal_effects():
    # widely separated modes: a single Gaussian overshrinks across the gap
    design = EventDesign(t0=4, J=3, p=1)
    theta = CommonParams(rho_y=0.5, rho_delta=[0.4], sigma2_u=0.4, sigma2_eps=0.2)
    prior = PriorSpec.mixture(
        [0.5, 0.5],
        [[-2.0, -2.0], [2.0, 2.0]],
        [0.2 * np.eye(2), 0.2 * np.eye(2)],
    )
    spec = DgpSpec("bimodal", 10_000, 8, design, theta, prior, seed=19)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, design, theta)
    gauss = PriorParams(b0=prior.mean(), b1=prior.crc_slope, sigma_lambda=prior.conditional_cov())
    risk_par = eb.compound_risk(eb.tweedie(ss, eb.fit_parametric(ss, gauss)), sim)
    risk_mix = eb.compound_risk(eb.tweedie(ss, eb.fit_mixture(ss, 2)), sim)
    risk_orc = eb.compound_risk(eb.tweedie(ss, eb.fit_oracle(ss, prior)), sim)
    assert risk_mix < risk_par
    assert risk_orc <= risk_mix * 1.05


# ---------------------------------------------------------------------------
# oracle backend


def test_oracle_gaussian_prior_equals_parametric():
    spec = design_by_name("case2-normal-crc-indep", n_units=300, seed=10)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    prior = PriorParams(
        b0=spec.prior.mean(), b1=spec.prior.crc_slope, sigma_lambda=spec.prior.conditional_cov()
    )
    r1 = eb.tweedie(ss, eb.fit_oracle(ss, spec.prior))
    r2 = eb.tweedie(ss, eb.fit_parametric(ss, prior))
    npt.assert_allclose(r1.lambda_tilde, r2.lambda_tilde, atol=1e-10)


def _mc_posterior_mean(prior, sigma_v, lam_hat, y0, n_draws, seed):
    rng = np.random.default_rng(seed)
    lam = prior.sample(rng, np.full(n_draws, y0))
    diff = lam_hat - lam
    solve = np.linalg.inv(sigma_v)
    logw = -0.5 * np.einsum("ij,jk,ik->i", diff, solve, diff)
    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    mean = w @ lam
    ess = 1.0 / (w**2).sum()
    se = np.sqrt(np.einsum("i,ij->j", w, (lam - mean) ** 2) / ess)
    return mean, se


def test_oracle_mixture_prior_matches_mc_posterior():
    design, theta = _fixture_design()
    sv = np.array([[0.3, 0.1], [0.1, 0.4]])
    prior = PriorSpec.mixture(
        [0.4, 0.6],
        [[-1.0, 0.5], [1.5, 2.0]],
        [0.5 * np.eye(2), [[0.7, 0.2], [0.2, 0.6]]],
        crc_slope=[0.3, -0.2],
    )
    ss = eb.SuffStats(np.array([[0.8, 1.1]]), sv, np.array([0.7]), design, theta)
    res = eb.tweedie(ss, eb.fit_oracle(ss, prior))
    mc, se = _mc_posterior_mean(prior, sv, ss.lambda_hat[0], 0.7, n_draws=2_000_000, seed=11)
    npt.assert_array_less(np.abs(res.lambda_tilde[0] - mc), 3.0 * se)


def test_oracle_t_prior_quadrature_matches_mc_posterior():
    design, theta = _fixture_design()
    sv = np.array([[0.3, 0.1], [0.1, 0.4]])
    prior = PriorSpec.scaled_t([0.5, 1.0], [[0.8, 0.3], [0.3, 1.2]], dof=5.0, crc_slope=[0.2, 0.1])
    ss = eb.SuffStats(np.array([[1.2, 0.4]]), sv, np.array([-0.5]), design, theta)
    res = eb.tweedie(ss, eb.fit_oracle(ss, prior))
    mc, _ = _mc_posterior_mean(prior, sv, ss.lambda_hat[0], -0.5, n_draws=8_000_000, seed=11)
    npt.assert_allclose(res.lambda_tilde[0], mc, atol=1e-3)


def test_oracle_rejects_dimension_mismatch():
    design, theta = _fixture_design()
    ss = eb.SuffStats(np.zeros((5, 2)), np.eye(2), np.zeros(5), design, theta)
    prior = PriorSpec.gaussian([0.0, 0.0, 0.0], np.eye(3))
    with pytest.raises(ValueError, match="dimension"):
        eb.fit_oracle(ss, prior)


# ---------------------------------------------------------------------------
# compound risk and the backend ordering


def test_compound_risk_identities():
    spec = design_by_name("case2-nonnormal-rc-indep", n_units=3000, seed=14)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    assert eb.compound_risk(sim.lambda_matrix, sim) == 0.0
    raw = eb.compound_risk(ss.lambda_hat, sim)
    assert raw == pytest.approx(ss.n_units * np.trace(ss.sigma_v), rel=0.08)
    with pytest.raises(ValueError, match="shapes"):
        eb.compound_risk(ss.lambda_hat[:, :2], sim)


def test_backend_risk_ordering_on_table_design():
    spec = design_by_name("case3-nonnormal-crc-corr", n_units=1000, seed=12)
    sim = simulate(spec)
    ss = eb.sufficient_stats(sim.panel, spec.design, spec.theta)
    prior = PriorParams(
        b0=spec.prior.mean(), b1=spec.prior.crc_slope, sigma_lambda=spec.prior.conditional_cov()
    )
    risks = {
        "raw": eb.compound_risk(ss.lambda_hat, sim),
        "oracle": eb.compound_risk(eb.tweedie(ss, eb.fit_oracle(ss, spec.prior)), sim),
        "parametric": eb.compound_risk(eb.tweedie(ss, eb.fit_parametric(ss, prior)), sim),
        "kernel": eb.compound_risk(eb.tweedie(ss, eb.fit_kernel(ss)), sim),
        "mixture": eb.compound_risk(eb.tweedie(ss, eb.fit_mixture(ss, 3)), sim),
    }
    for name in ("oracle", "parametric", "kernel", "mixture"):
        assert risks[name] <= 1.05 * risks["raw"], name
        assert risks["oracle"] <= 1.05 * risks[name], name
