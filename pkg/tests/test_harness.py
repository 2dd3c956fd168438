"""Tests for episodes, realized losses and Monte-Carlo comparisons."""
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st

from voinet.config import Settings
from voinet.core.control import eta, solve_riccati
from voinet.core.harness import (
    EpisodeLog,
    evaluate_phi,
    evaluate_phi_prime,
    eta_trajectory,
    monte_carlo,
    monte_carlo_async,
    prepare_experiment,
    run_control_episode,
    run_episode,
    run_estimation_episode,
)
from voinet.models.scenario import compile_scenario, spacecraft_scenario
from voinet.models.schemas import Mode
from tests.conftest import control_config, scalar_config
from tests.test_encoder import _random_stable_system

FAST = Settings(grid_nodes=201, nu_nodes=101, rollout_paths=32)


def _run(config, policy, seed=0, settings=FAST):
    return run_episode(prepare_experiment(config, policy, settings=settings), seed)


@lru_cache
def _replica_experiment(delay, loss, policy, control):
    make = control_config if control else scalar_config
    return prepare_experiment(make(A=1.2, horizon=15, delay=delay, loss=loss, theta=0.5), policy, settings=FAST)


class TestEpisodeAccounting:
    """Test the logged columns against the reported totals."""

    @pytest.mark.parametrize("policy", ["voi", "periodic:3", "random:0.4", "always"])
    def test_phi_recomputes_from_log(self, make_scalar, policy):
        log = _run(make_scalar(horizon=40, delay=2, loss=0.3, theta=0.8), policy, seed=3)
        assert evaluate_phi(log) == pytest.approx(log.phi, rel=1e-12)
        assert log.sends == int(log.sigma.sum())
        assert log.losses == int(np.count_nonzero((log.sigma == 1) & (log.gamma == 0)))

    def test_gamma_only_for_sent_packets(self, make_scalar):
        log = _run(make_scalar(horizon=40, delay=2, loss=0.5), "random:0.5", seed=1)
        assert np.all((log.gamma >= 0) == (log.sigma == 1))
        delivered_at = np.flatnonzero(log.delivered)
        assert np.array_equal(delivered_at - 2, np.flatnonzero(log.gamma == 1))

    def test_hand_computed_phi(self):
        log = EpisodeLog.empty(1, 1, 1)
        log.sigma[:] = [1, 0]
        log.theta[:] = 1.0
        log.x[:, 0] = [1.0, 2.0]
        log.weights[:] = 1.0
        assert evaluate_phi(log) == pytest.approx(6.0)

    def test_phi_prime_of_zero_trajectory(self, make_control):
        model = compile_scenario(make_control(horizon=3))
        log = EpisodeLog.empty(3, 1, 1, p=1, mode=Mode.CONTROL)
        log.sigma[:] = [1, 1, 0, 0]
        log.theta[:] = 0.5
        log.x_terminal = np.zeros(1)
        assert evaluate_phi_prime(log, model) == pytest.approx(1.0)

    def test_voi_logged_only_for_voi_policies(self, make_scalar):
        config = make_scalar(horizon=20, loss=0.2)
        voi = _run(config, "voi-dp")
        periodic = _run(config, "periodic:2")
        assert np.all(np.isfinite(voi.voi[: 20]))
        assert np.isnan(voi.voi[20])
        assert np.all(np.isnan(periodic.voi))


class TestEstimationEpisode:
    """Test estimation-mode episodes."""

    def test_never_policy_freezes_estimate(self, make_scalar):
        config = make_scalar(horizon=10, W=1e-30, V=1e-30, m0=0.5)
        log = run_episode(prepare_experiment(compile_scenario(config, check=False), "never"), seed=2)
        np.testing.assert_array_equal(log.xhat[:, 0], 0.5)
        assert log.sends == 0
        expected = 11 * (log.x[0, 0] - 0.5) ** 2
        assert log.phi == pytest.approx(expected, rel=1e-9)

    def test_always_policy_resets_to_previous_filter_estimate(self, make_scalar):
        log = _run(make_scalar(A=0.9, horizon=30, loss=0.0), "always", seed=4)
        np.testing.assert_allclose(log.xhat[1:, 0], 0.9 * log.xcheck[:-1, 0], rtol=1e-14)

    def test_no_sends_after_cutoff(self, make_scalar):
        log = _run(make_scalar(horizon=30, delay=2, theta=0.0), "always")
        assert log.sigma[28] == 1
        assert log.sigma[29] == 0 and log.sigma[30] == 0

    def test_same_seed_same_log(self, make_scalar):
        config = make_scalar(horizon=30, delay=2, loss=0.3, theta=0.5)
        exp = prepare_experiment(config, "voi", settings=FAST)
        first, second = run_episode(exp, 9), run_episode(exp, 9)
        for name in ("x", "y", "xcheck", "xhat", "sigma", "gamma", "mse"):
            assert np.array_equal(getattr(first, name), getattr(second, name))
        assert first.phi == second.phi

    @pytest.mark.parametrize("policy", ["voi-dp", "voi-rollout", "random:0.5"])
    def test_replica_matches_decoder(self, make_scalar, bursty_chain, policy):
        log = _run(make_scalar(A=1.1, horizon=40, delay=2, chain=bursty_chain, theta=0.3), policy, seed=5)
        assert log.replica_gap == 0.0

    def test_replica_matches_decoder_in_three_dimensions(self):
        config = spacecraft_scenario()
        src = config.source.model_copy(update={"horizon": 40})
        cost = config.cost.model_copy(update={"theta": 8e-6})
        config = config.model_copy(update={"source": src, "cost": cost})
        log = _run(config, "voi-rollout", seed=1)
        assert log.replica_gap == 0.0

    @hyp_settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 2**31 - 1),
        delay=st.integers(1, 3),
        loss=st.sampled_from([0.0, 0.3, 0.7]),
        policy=st.sampled_from(["voi-dp", "always", "periodic:2", "random:0.5", "threshold:1"]),
        control=st.booleans(),
    )
    def test_replica_matches_decoder_for_any_seed(self, seed, delay, loss, policy, control):
        log = run_episode(_replica_experiment(delay, loss, policy, control), seed)
        assert log.replica_gap == 0.0
        np.testing.assert_array_equal(log.delivered[delay:], log.gamma[:-delay] == 1)

    @pytest.mark.slow
    def test_never_policy_estimate_is_unbiased(self):
        model = _random_stable_system(np.random.default_rng(11), horizon=6)
        exp = prepare_experiment(model, "never")
        episodes = 10_000
        errors = np.empty((episodes, model.horizon + 1, model.n))
        for seed in range(episodes):
            log = run_episode(exp, seed)
            errors[seed] = log.x - log.xhat
        bound = 4.0 * errors.std(axis=0, ddof=1) / np.sqrt(episodes)
        assert np.all(np.abs(errors.mean(axis=0)) <= bound)

    def test_source_ignores_channel(self, make_scalar):
        clean = _run(make_scalar(horizon=30, loss=0.0), "always", seed=6)
        lossy = _run(make_scalar(horizon=30, loss=1.0), "always", seed=6)
        assert np.array_equal(clean.x, lossy.x)
        assert np.array_equal(clean.xcheck, lossy.xcheck)
        assert lossy.losses == lossy.sends

    def test_prohibitive_price_never_sends(self, make_scalar):
        log = _run(make_scalar(horizon=30, loss=0.1, theta=1e9), "voi")
        assert log.sends == 0

    def test_wrong_mode_rejected(self, make_control):
        with pytest.raises(ValueError):
            run_estimation_episode(make_control(horizon=5, scheduler="never"), 0)


class TestControlEpisode:
    """Test certainty-equivalent control episodes."""

    def test_zero_state_weight_matches_estimation(self, make_control, make_scalar):
        control = _run(make_control(horizon=25, Q=0.0, loss=0.2), "always", seed=8)
        estimation = _run(make_scalar(horizon=25, loss=0.2), "always", seed=8)
        np.testing.assert_array_equal(control.u, 0.0)
        np.testing.assert_array_equal(control.x, estimation.x)
        np.testing.assert_array_equal(control.xhat, estimation.xhat)

    def test_eta_is_weighted_estimation_error(self, make_control):
        exp = prepare_experiment(make_control(A=1.1, horizon=40, delay=2, loss=0.3, theta=0.5), "voi-dp", settings=FAST)
        log = run_episode(exp, 3)
        err = log.x - log.xhat
        expected = np.einsum("ki,kij,kj->k", err, exp.riccati.Gamma, err)
        np.testing.assert_allclose(eta_trajectory(log, exp.riccati), expected, rtol=1e-9, atol=1e-10)
        assert log.psi == pytest.approx(log.phi, rel=1e-9)

    def test_loss_identity_along_the_path(self, make_control):
        exp = prepare_experiment(make_control(A=1.2, horizon=30, loss=0.2, theta=0.3), "periodic:2", settings=FAST)
        log = run_control_episode(exp, 11)
        model, sol = exp.model, exp.riccati
        xs = np.vstack([log.x, log.x_terminal[None, :]])
        gap = float(xs[0] @ sol.S[0] @ xs[0])
        for k in range(model.horizon + 1):
            mean = model.A(k) @ xs[k] + model.B(k) @ log.u[k]
            gap += float(xs[k + 1] @ sol.S[k + 1] @ xs[k + 1] - mean @ sol.S[k + 1] @ mean)
        assert log.phi_prime - log.psi == pytest.approx(gap, rel=1e-8)

    def test_full_state_controller_has_no_excess(self, make_control):
        sol = solve_riccati(compile_scenario(make_control(horizon=5)))
        x = np.array([1.7])
        assert eta(sol, x, -(sol.L[2] @ x), 2) == pytest.approx(0.0, abs=1e-15)

    def test_unstable_plant_is_stabilized(self, make_control):
        config = make_control(A=1.2, horizon=500, loss=0.0, theta=0.0)
        closed = _run(config, "always", seed=2)
        open_loop = _run(config, "never", seed=2)
        assert np.mean(np.abs(closed.x)) < 10.0
        assert np.abs(open_loop.x[-1, 0]) > 1e3 * np.mean(np.abs(closed.x))

    def test_prohibitive_price_runs_open_loop_prediction(self, make_control):
        log = _run(make_control(horizon=30, theta=1e9), "voi")
        assert log.sends == 0
        np.testing.assert_array_equal(log.xhat[:, 0], 0.0)

    def test_wrong_mode_rejected(self, make_scalar):
        with pytest.raises(ValueError):
            run_control_episode(make_scalar(horizon=5, scheduler="never"), 0)


class TestMonteCarlo:
    """Test paired policy comparisons on common seeds."""

    def test_identical_policies_have_zero_difference(self, make_scalar):
        report = monte_carlo(make_scalar(horizon=20, loss=0.3, seed=5), ["periodic:2", "periodic:2"], 4, workers=1)
        cmp = report.comparisons[0]
        assert cmp.mean_difference == 0.0
        assert not cmp.first_better
        assert report.seeds == [5, 6, 7, 8]

    def test_always_beats_never_when_free(self, make_scalar):
        report = monte_carlo(make_scalar(horizon=30, theta=0.0), ["always", "never"], 10, workers=1)
        assert report.loss == "phi"
        assert report.comparisons[0].first_better
        assert report.policies[0].mean_sends == 30.0

    @pytest.mark.asyncio
    async def test_worker_count_does_not_change_results(self, make_scalar):
        config = make_scalar(horizon=20, delay=2, loss=0.2, theta=0.5)
        serial = await monte_carlo_async(config, ["voi-dp", "random:0.3"], 4, workers=1, settings=FAST)
        parallel = await monte_carlo_async(config, ["voi-dp", "random:0.3"], 4, workers=2, settings=FAST)
        assert [p.mean_loss for p in serial.policies] == [p.mean_loss for p in parallel.policies]
        assert serial.comparisons[0].mean_difference == parallel.comparisons[0].mean_difference

    def test_control_reports_phi_prime(self, make_control):
        report = monte_carlo(make_control(horizon=10), ["always", "never"], 3, workers=1)
        assert report.loss == "phi_prime"
        assert report.mode == Mode.CONTROL

    def test_needs_two_episodes(self, make_scalar):
        with pytest.raises(ValueError):
            monte_carlo(make_scalar(horizon=5), ["never"], 1)


@pytest.mark.slow
class TestStatisticalAcceptance:
    """Monte-Carlo acceptance runs."""

    def test_dp_beats_swept_thresholds(self, make_scalar):
        config = make_scalar(horizon=20, loss=0.0, theta=2.0)
        thresholds = [f"threshold:{t:g}" for t in np.linspace(0.25, 4.25, 25)]
        report = monte_carlo(config, ["voi-dp"] + thresholds, 500, workers=1)
        dp = report.policies[0].mean_loss
        best = min(p.mean_loss for p in report.policies[1:])
        assert dp <= 1.02 * best

    def test_dp_dominates_fixed_schedules(self, make_scalar):
        config = make_scalar(horizon=40, loss=0.2, theta=2.0)
        others = ["never", "always", "periodic:5", "periodic:10", "periodic:21", "periodic:50"]
        report = monte_carlo(config, ["voi-dp"] + others, 200, workers=1)
        against_dp = [c for c in report.comparisons if c.first == "voi-dp"]
        assert [c.second for c in against_dp] == others
        for cmp in against_dp:
            assert cmp.confidence == 0.95
            assert cmp.first_better, f"voi-dp vs {cmp.second}: {cmp.mean_difference:.4g} ± {cmp.stderr:.3g}"

    def test_psi_tracks_phi_prime_across_policies(self, make_control):
        config = make_control(A=1.1, horizon=30, loss=0.2, theta=0.5)
        episodes = 500
        gaps = []
        for policy in ("voi-dp", "periodic:3"):
            exp = prepare_experiment(config, policy)
            logs = [run_episode(exp, seed) for seed in range(episodes)]
            gaps.append(np.array([log.phi_prime - log.psi for log in logs]))
        diff = gaps[0].mean() - gaps[1].mean()
        stderr = np.sqrt(gaps[0].var(ddof=1) / episodes + gaps[1].var(ddof=1) / episodes)
        assert abs(diff) < 3.0 * stderr

    def test_spacecraft_voi_beats_periodic(self):
        config = spacecraft_scenario()
        report = monte_carlo(config, ["voi-rollout", "periodic:21"], config.episodes)
        voi, periodic = report.policies
        assert report.comparisons[0].first_better
        assert voi.loss_fraction == pytest.approx(0.3, abs=0.05)
        assert periodic.mean_sends == 48.0
