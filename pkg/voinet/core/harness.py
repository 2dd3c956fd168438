"""Slot-synchronous episodes, realized losses and Monte-Carlo policy comparison.

Per slot k the order is:

1. draw λ(k);
2. step the source (k ≥ 1) and observe y(k);
3. encoder time and measurement update;
4. encoder replica of x̂(k) from the ack of the packet arriving at k;
5. scheduling decision σ(k) (forced to 0 for k > T − d);
6. channel step with payload x̌(k), decoder update from z(k);
7. certainty-equivalent input u(k) in control mode;
8. loss accrual.
"""
import asyncio
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from voinet.config import Settings, get_settings
from voinet.core.control import RiccatiSolution, ce_input, eta, psi_loss, solve_riccati
from voinet.core.decoder import decoder_step_control, decoder_step_estimation, initial_decoder_state
from voinet.core.encoder import (
    CovarianceSchedule,
    build_scheduler_input,
    initial_encoder_state,
    kf_predict,
    kf_update,
    record_decision,
    record_lambda,
    replica_step,
)
from voinet.core.scheduler import SchedulingPolicy, build_policy
from voinet.core.sim_core import ChannelPipeline, RngStreams, initial_source_state, observe, step_source
from voinet.models.scenario import ScenarioArrays, Series, compile_scenario
from voinet.models.schemas import (
    AggregateReport,
    EpisodeSummary,
    Mode,
    PairedComparison,
    PolicySummary,
    ScenarioConfig,
    SchedulerSpec,
)

logger = logging.getLogger(__name__)

CONFIDENCE = 0.95


@dataclass(frozen=True)
class Experiment:
    """Everything an episode needs that does not depend on the seed."""

    model: ScenarioArrays
    schedule: CovarianceSchedule
    weights: Series
    policy: SchedulingPolicy
    riccati: Optional[RiccatiSolution] = None

    @property
    def label(self) -> str:
        return self.policy.label


def prepare_experiment(
    config: Union[ScenarioConfig, ScenarioArrays],
    scheduler: Optional[Union[SchedulerSpec, str]] = None,
    allow_fallback: bool = False,
    settings: Optional[Settings] = None,
) -> Experiment:
    model = config if isinstance(config, ScenarioArrays) else compile_scenario(config)
    spec = scheduler if scheduler is not None else model.config.scheduler
    if isinstance(spec, str):
        spec = SchedulerSpec.parse(spec)
    schedule = CovarianceSchedule.compute(model)
    riccati = None
    if model.control:
        riccati = solve_riccati(model)
        weights = riccati.gamma_series()
    else:
        weights = model.Lambda
    policy = build_policy(spec, model, schedule, weights, settings, allow_fallback)
    return Experiment(model=model, schedule=schedule, weights=weights, policy=policy, riccati=riccati)


@dataclass
class EpisodeLog:
    seed: int
    policy: str
    mode: Mode
    delay: int
    x: np.ndarray
    y: np.ndarray
    xcheck: np.ndarray
    xhat: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray          # 1 delivered, 0 erased, −1 not sent
    lam: np.ndarray
    delivered: np.ndarray
    voi: np.ndarray            # NaN where no VoI was evaluated
    mse: np.ndarray
    theta: np.ndarray
    weights: np.ndarray
    u: Optional[np.ndarray] = None
    x_terminal: Optional[np.ndarray] = None
    phi: float = 0.0
    phi_prime: Optional[float] = None
    psi: Optional[float] = None
    voi_evaluations: int = 0
    clamped_evaluations: int = 0
    clamp_flagged: bool = False
    replica_gap: float = 0.0   # max |x̂ replica − x̂ decoder| over the episode

    @classmethod
    def empty(cls, horizon: int, n: int, m: int, p: int = 0, seed: int = 0, policy: str = "", mode: Mode = Mode.ESTIMATION, delay: int = 1) -> "EpisodeLog":
        slots = horizon + 1
        return cls(
            seed=seed,
            policy=policy,
            mode=mode,
            delay=delay,
            x=np.zeros((slots, n)),
            y=np.zeros((slots, m)),
            xcheck=np.zeros((slots, n)),
            xhat=np.zeros((slots, n)),
            sigma=np.zeros(slots, dtype=int),
            gamma=np.full(slots, -1, dtype=int),
            lam=np.zeros(slots),
            delivered=np.zeros(slots, dtype=bool),
            voi=np.full(slots, np.nan),
            mse=np.zeros(slots),
            theta=np.zeros(slots),
            weights=np.zeros((slots, n, n)),
            u=np.zeros((slots, p)) if mode == Mode.CONTROL else None,
        )

    @property
    def horizon(self) -> int:
        return len(self.sigma) - 1

    @property
    def sends(self) -> int:
        return int(self.sigma.sum())

    @property
    def losses(self) -> int:
        return int(np.count_nonzero((self.sigma == 1) & (self.gamma == 0)))

    def summary(self) -> EpisodeSummary:
        return EpisodeSummary(
            seed=self.seed,
            policy=self.policy,
            phi=self.phi,
            phi_prime=self.phi_prime,
            psi=self.psi,
            mse_total=float(self.mse.sum()),
            sends=self.sends,
            losses=self.losses,
            voi_evaluations=self.voi_evaluations,
            clamped_evaluations=self.clamped_evaluations,
            clamp_flagged=self.clamp_flagged,
        )


def run_episode(exp: Experiment, seed: int) -> EpisodeLog:
    model, policy = exp.model, exp.policy
    T, d = model.horizon, model.delay
    control = model.control
    streams = RngStreams(seed)
    policy.reset_diagnostics()
    log = EpisodeLog.empty(T, model.n, model.m, model.p, seed=seed, policy=policy.label, mode=model.mode, delay=d)

    source = initial_source_state(model, streams.init)
    channel = ChannelPipeline(d, model.lam)
    enc = initial_encoder_state(model)
    dec = initial_decoder_state(model)
    u_prev: Optional[np.ndarray] = None
    phi = 0.0

    for k in range(T + 1):
        lam = channel.lambda_step(streams.lam)
        if k > 0:
            source = step_source(source, u_prev, model, streams.process)
            enc = kf_predict(enc, u_prev, model)
        y = observe(source, model, streams.measurement)
        enc, _ = kf_update(enc, y, model)
        enc = record_lambda(enc, lam, channel.lambda_state)
        enc = replica_step(enc, channel.pending_arrival(), model)

        sigma, voi = policy.step(build_scheduler_input(enc), streams)
        if k > T - d:
            sigma = 0
        z, ack = channel.channel_step(k, bool(sigma), enc.xcheck, streams.erasure)
        if k > 0:
            if control:
                dec = decoder_step_control(dec, z, u_prev, model)
            else:
                dec = decoder_step_estimation(dec, z, model)
        enc = record_decision(enc, sigma)
        if ack is not None:
            log.gamma[ack.send_time] = int(ack.delivered)

        weight = exp.weights(k)
        err = source.x - dec.xhat
        mse = float(err @ weight @ err)
        theta = float(model.theta(k))
        phi += theta * sigma + mse

        log.x[k], log.y[k] = source.x, y
        log.xcheck[k], log.xhat[k] = enc.xcheck, dec.xhat
        log.sigma[k], log.lam[k] = sigma, lam
        log.delivered[k] = z is not None
        log.voi[k] = np.nan if voi is None else voi
        log.mse[k], log.theta[k], log.weights[k] = mse, theta, weight
        log.replica_gap = max(log.replica_gap, float(np.max(np.abs(enc.replica_xhat - dec.xhat))))

        if control:
            u = ce_input(exp.riccati, dec.xhat, k)
            log.u[k] = u
            u_prev = u

    log.phi = phi
    if control:
        log.x_terminal = step_source(source, u_prev, model, streams.process).x
        log.phi_prime = evaluate_phi_prime(log, model)
        log.psi = psi_loss(log, exp.riccati)
    log.voi_evaluations = policy.evaluations
    log.clamped_evaluations = policy.clamped
    log.clamp_flagged = policy.clamp_flagged
    if log.clamp_flagged:
        logger.warning(f"Seed {seed}: {policy.clamped}/{policy.evaluations} VoI evaluations clamped to the grid")
    return log


def run_estimation_episode(config: Union[ScenarioConfig, Experiment], seed: int) -> EpisodeLog:
    exp = config if isinstance(config, Experiment) else prepare_experiment(config)
    if exp.model.control:
        raise ValueError("run_estimation_episode needs an estimation-mode scenario")
    return run_episode(exp, seed)


def run_control_episode(config: Union[ScenarioConfig, Experiment], seed: int) -> EpisodeLog:
    exp = config if isinstance(config, Experiment) else prepare_experiment(config)
    if not exp.model.control:
        raise ValueError("run_control_episode needs a control-mode scenario")
    return run_episode(exp, seed)


def evaluate_phi(log: EpisodeLog, theta: Optional[np.ndarray] = None, weights: Optional[np.ndarray] = None) -> float:
    """Realized Φ recomputed from the logged trajectory."""
    theta = log.theta if theta is None else theta
    weights = log.weights if weights is None else weights
    err = log.x - log.xhat
    return float(np.dot(theta, log.sigma) + np.einsum("ki,kij,kj->", err, weights, err))


def evaluate_phi_prime(log: EpisodeLog, model: ScenarioArrays) -> float:
    """Realized Φ′ = Σθσ + Σ_{k≤T}(xᵀQx + uᵀRu) + x(T+1)ᵀQ(T+1)x(T+1)."""
    T = log.horizon
    total = float(np.dot(log.theta, log.sigma))
    for k in range(T + 1):
        x = log.x[k]
        total += float(x @ model.Q(k) @ x)
        if log.u is not None:
            total += float(log.u[k] @ model.R(k) @ log.u[k])
    if log.x_terminal is not None:
        total += float(log.x_terminal @ model.Q(T + 1) @ log.x_terminal)
    return total


def eta_trajectory(log: EpisodeLog, sol: RiccatiSolution) -> np.ndarray:
    return np.array([eta(sol, log.x[k], log.u[k], k) for k in range(log.horizon + 1)])


# --- Monte Carlo -----------------------------------------------------------------

_worker_experiments: List[Experiment] = []


def _init_worker(experiments: List[Experiment]) -> None:
    global _worker_experiments
    _worker_experiments = experiments


def _run_task(task: Tuple[int, int]) -> EpisodeSummary:
    index, seed = task
    return run_episode(_worker_experiments[index], seed).summary()


def _run_log(seed: int) -> EpisodeLog:
    return run_episode(_worker_experiments[0], seed)


def run_episodes(exp: Experiment, seeds: Sequence[int], workers: Optional[int] = None) -> List[EpisodeLog]:
    """Full logs for `seeds` in seed order; each episode depends only on its seed."""
    workers = workers or get_settings().workers
    if workers <= 1 or len(seeds) <= 1:
        return [run_episode(exp, seed) for seed in seeds]
    logger.info(f"Running {len(seeds)} episodes of {exp.label} on {workers} worker(s)")
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=([exp],)) as pool:
        return list(pool.map(_run_log, seeds))


@dataclass
class _Collected:
    label: str
    summaries: List[EpisodeSummary] = field(default_factory=list)


def _loss_of(summary: EpisodeSummary, mode: Mode) -> float:
    return summary.phi_prime if mode == Mode.CONTROL else summary.phi


def aggregate(
    scenario: str, mode: Mode, seeds: Sequence[int], collected: Sequence[_Collected]
) -> AggregateReport:
    n = len(seeds)
    policies: List[PolicySummary] = []
    losses: List[np.ndarray] = []
    for entry in collected:
        loss = np.array([_loss_of(s, mode) for s in entry.summaries])
        sends = np.array([s.sends for s in entry.summaries], dtype=float)
        lost = np.array([s.losses for s in entry.summaries], dtype=float)
        losses.append(loss)
        policies.append(
            PolicySummary(
                policy=entry.label,
                episodes=n,
                mean_loss=float(loss.mean()),
                stderr_loss=float(loss.std(ddof=1) / np.sqrt(n)),
                mean_mse=float(np.mean([s.mse_total for s in entry.summaries])),
                mean_sends=float(sends.mean()),
                mean_losses=float(lost.mean()),
                loss_fraction=float(lost.sum() / sends.sum()) if sends.sum() > 0 else None,
                clamp_flagged_episodes=sum(1 for s in entry.summaries if s.clamp_flagged),
            )
        )
    t_crit = float(stats.t.ppf(0.5 + CONFIDENCE / 2.0, n - 1))
    comparisons = []
    for i, j in combinations(range(len(collected)), 2):
        diff = losses[i] - losses[j]
        mean = float(diff.mean())
        stderr = float(diff.std(ddof=1) / np.sqrt(n))
        comparisons.append(
            PairedComparison(
                first=collected[i].label,
                second=collected[j].label,
                mean_difference=mean,
                stderr=stderr,
                ci_low=mean - t_crit * stderr,
                ci_high=mean + t_crit * stderr,
                confidence=CONFIDENCE,
                first_better=mean + t_crit * stderr < 0.0,
            )
        )
    return AggregateReport(
        scenario=scenario,
        mode=mode,
        loss="phi_prime" if mode == Mode.CONTROL else "phi",
        episodes=n,
        seeds=list(seeds),
        policies=policies,
        comparisons=comparisons,
    )


async def monte_carlo_async(
    config: ScenarioConfig,
    policies: Sequence[Union[SchedulerSpec, str]],
    n_episodes: int,
    workers: Optional[int] = None,
    allow_fallback: bool = True,
    settings: Optional[Settings] = None,
) -> AggregateReport:
    """Run every policy over the same seeds; episodes go to a process pool when workers > 1."""
    if n_episodes < 2:
        raise ValueError("monte_carlo needs at least 2 episodes")
    settings = settings or get_settings()
    workers = workers or settings.workers
    model = compile_scenario(config)
    experiments = [prepare_experiment(model, spec, allow_fallback, settings) for spec in policies]
    seeds = [config.seed + i for i in range(n_episodes)]
    tasks = [(index, seed) for index in range(len(experiments)) for seed in seeds]
    logger.info(f"Running {len(tasks)} episodes ({len(experiments)} policies x {n_episodes} seeds) on {workers} worker(s)")

    if workers <= 1:
        _init_worker(experiments)
        summaries = [_run_task(task) for task in tasks]
    else:
        loop = asyncio.get_running_loop()
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(experiments,)) as pool:
            futures = [loop.run_in_executor(pool, _run_task, task) for task in tasks]
            summaries = await asyncio.gather(*futures)

    collected = [_Collected(exp.label) for exp in experiments]
    for (index, _), summary in zip(tasks, summaries):
        collected[index].summaries.append(summary)
    for entry in collected:
        logger.info(f"Policy {entry.label}: mean loss {np.mean([_loss_of(s, config.mode) for s in entry.summaries]):.6g}")
    return aggregate(config.name, config.mode, seeds, collected)


def monte_carlo(
    config: ScenarioConfig,
    policies: Sequence[Union[SchedulerSpec, str]],
    n_episodes: int,
    workers: Optional[int] = None,
    allow_fallback: bool = True,
    settings: Optional[Settings] = None,
) -> AggregateReport:
    return asyncio.run(monte_carlo_async(config, policies, n_episodes, workers, allow_fallback, settings))
