"""Transmission scheduling: value function, value of information and baseline policies.

Two VoI evaluators share one decision rule (transmit iff VoI ≥ 0):

* `ValueFunctionGrid` / `DynamicProgrammingPolicy`: exact backward induction
  for scalar sources with d ≤ 2, tabulated on a mismatch grid.
* `RolloutPolicy`: paired Monte-Carlo rollouts of the two branches under a
  calibrated periodic or mismatch-threshold base policy, for any state
  dimension and delay.

Costs are expressed in mismatch coordinates; the filter error term
tr(Λ(t)O(t)) does not depend on any decision and is only added back when an
expected loss is reported.
"""
import logging
import time
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from voinet.config import Settings, get_settings
from voinet.core.encoder import CovarianceSchedule, SchedulerInput
from voinet.core.errors import UnsupportedConfigurationError
from voinet.core.sim_core import RngStreams
from voinet.models.scenario import DP_MAX_DELAY, ScenarioArrays, Series, sym_sqrt
from voinet.models.schemas import SchedulerKind, SchedulerSpec

logger = logging.getLogger(__name__)

QUADRATURE_NODES = 21
E_SPAN = 8.0
NU_SPAN = 6.0
CLAMP_FLAG_FRACTION = 0.01
CALIBRATION_PERIODS = (1, 2, 3, 4, 5, 6, 8, 10, 13, 16, 21, 27, 34, 45, 55, 75, 100)
THRESHOLD_MULTIPLES = (0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 11.0, 16.0)
BASE_FAMILIES = ("periodic", "threshold")
CONTINUATION_GAPS = 3.0
MAX_CONTINUATION = 100


def gauss_hermite(order: int = QUADRATURE_NODES) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and normalized weights for E[f(Z)], Z ~ N(0, 1)."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    return nodes, weights / weights.sum()


def symmetric_grid(half_width: float, nodes: int) -> np.ndarray:
    """Odd-sized grid, exactly symmetric about an exact zero node."""
    half = np.linspace(0.0, half_width, (nodes + 1) // 2)
    return np.concatenate([-half[:0:-1], half])


# --- policies ----------------------------------------------------------------


class SchedulingPolicy:
    """Common interface: `step` returns (σ(k), VoI(k) or None)."""

    def __init__(self, label: str, horizon: int, delay: int):
        self.label = label
        self.horizon = horizon
        self.delay = delay
        self.reset_diagnostics()

    def reset_diagnostics(self) -> None:
        self.evaluations = 0
        self.clamped = 0

    @property
    def clamp_flagged(self) -> bool:
        return self.evaluations > 0 and self.clamped > CLAMP_FLAG_FRACTION * self.evaluations

    def voi_evaluate(self, s: SchedulerInput, streams: Optional[RngStreams] = None) -> Optional[float]:
        return None

    def _decide(self, s: SchedulerInput, streams: Optional[RngStreams]) -> Tuple[int, Optional[float]]:
        raise NotImplementedError

    def step(self, s: SchedulerInput, streams: Optional[RngStreams] = None) -> Tuple[int, Optional[float]]:
        if s.k > self.horizon - self.delay:
            return 0, None
        return self._decide(s, streams)

    def decide(self, s: SchedulerInput, streams: Optional[RngStreams] = None) -> int:
        return self.step(s, streams)[0]


class ThresholdPolicy(SchedulingPolicy):
    """Transmit iff VoI(k) = χ(k) − θ(k) ≥ 0."""

    def __init__(self, label: str, horizon: int, delay: int, theta: np.ndarray):
        super().__init__(label, horizon, delay)
        self.theta = theta

    def _decide(self, s: SchedulerInput, streams: Optional[RngStreams]) -> Tuple[int, Optional[float]]:
        voi = self.voi_evaluate(s, streams)
        return int(voi >= 0.0), voi


class BaselinePolicy(SchedulingPolicy):
    def __init__(self, spec: SchedulerSpec, horizon: int, delay: int, weights: Optional[Series] = None):
        super().__init__(spec.label, horizon, delay)
        self.kind = spec.kind
        self.period = spec.period
        self.phase = spec.phase
        self.rate = spec.rate
        self.threshold = spec.threshold
        self.weights = weights

    def _decide(self, s: SchedulerInput, streams: Optional[RngStreams]) -> Tuple[int, Optional[float]]:
        rng = streams.policy if streams is not None else None
        return baseline_decide(self, s.k, rng=rng, etilde=s.etilde), None


def baseline_decide(
    policy: BaselinePolicy, k: int, rng: Optional[np.random.Generator] = None, etilde: Optional[np.ndarray] = None
) -> int:
    if k > policy.horizon - policy.delay:
        return 0
    if policy.kind == SchedulerKind.ALWAYS:
        return 1
    if policy.kind == SchedulerKind.NEVER:
        return 0
    if policy.kind == SchedulerKind.PERIODIC:
        return int(k % policy.period == policy.phase % policy.period)
    if policy.kind == SchedulerKind.RANDOM:
        if rng is None:
            raise ValueError("random policy needs a generator")
        return int(rng.random() < policy.rate)
    if policy.kind == SchedulerKind.THRESHOLD:
        if etilde is None or policy.weights is None:
            raise ValueError("threshold policy needs the mismatch and its weight")
        return int(np.sqrt(max(float(etilde @ policy.weights(k) @ etilde), 0.0)) >= policy.threshold)
    raise ValueError(f"not a baseline policy: {policy.kind.value}")


# --- exact dynamic programming (scalar source, d ≤ 2) ---------------------------


class ValueFunctionGrid:
    """Tabulated continuation values of the scheduling problem.

    Only the expected next-slot value ``H[k, λ-state, σ](x)`` is stored per
    slot on the mismatch grid; V and χ at any state are then closed-form in
    the stored tables, which keeps the d = 2 state (ẽ, ξ, λ(k−1), λ(k),
    σ(k−1)) to one-dimensional interpolation.
    """

    def __init__(
        self,
        delay: int,
        grid: np.ndarray,
        nu_grid: Optional[np.ndarray],
        a: np.ndarray,
        q: np.ndarray,
        weight: np.ndarray,
        theta: np.ndarray,
        lam_values: np.ndarray,
        transition: np.ndarray,
        filter_error: np.ndarray,
        quadrature: Tuple[np.ndarray, np.ndarray],
    ):
        self.delay = delay
        self.horizon = len(a) - 1
        self.grid = grid
        self.nu_grid = nu_grid
        self.a, self.q, self.weight, self.theta = a, q, weight, theta
        self.lam_values = lam_values
        self.transition = transition
        self.filter_error = filter_error
        self.nodes, self.node_weights = quadrature
        self.bound = float(grid[-1])
        self.center = len(grid) // 2
        n_chain = transition.shape[0]
        self.tables = np.zeros((self.horizon - delay + 1, n_chain, delay, len(grid)))

    @property
    def last_slot(self) -> int:
        return self.horizon - self.delay

    def _interp(self, x, table: np.ndarray):
        return np.interp(x, self.grid, table)

    def branches(self, k: int, e, xi=0.0, ip: int = 0, ic: int = 0, sp: int = 0):
        """(cost of σ = 0 without θ, χ) at slot k ≤ T − d."""
        a0 = self.a[k]
        rho = 1.0 - self.lam_values[k, ic]
        if self.delay == 1:
            q1, w1 = self.q[k + 1], self.weight[k + 1]
            table = self.tables[k, ic, 0]
            hold = w1 * (a0 * a0 * e * e + q1) + self._interp(e, table)
            reset = w1 * q1 + table[self.center]
            return hold, rho * (hold - reset)
        a1, q1, q2, w2 = self.a[k + 1], self.q[k + 1], self.q[k + 2], self.weight[k + 2]
        pi = sp * (1.0 - self.lam_values[k - 1, ip]) if k >= 1 else 0.0
        e1 = pi * (a0 * a0 * xi * xi + q1) + (1.0 - pi) * (a0 * a0 * e * e + q1)
        t0, t1 = self.tables[k, ic, 0], self.tables[k, ic, 1]
        f0 = pi * self._interp(xi, t0) + (1.0 - pi) * self._interp(e, t0)
        f1 = pi * self._interp(xi, t1) + (1.0 - pi) * self._interp(e, t1)
        cost0 = w2 * (a1 * a1 * e1 + q2) + f0
        return cost0, w2 * rho * a1 * a1 * (e1 - q1) + (f0 - f1)

    def chi(self, k: int, e, xi=0.0, ip: int = 0, ic: int = 0, sp: int = 0):
        if k > self.last_slot:
            return np.zeros_like(np.asarray(e, dtype=float))
        return self.branches(k, e, xi, ip, ic, sp)[1]

    def value(self, k: int, e, xi=0.0, ip: int = 0, ic: int = 0, sp: int = 0):
        if k > self.last_slot:
            return np.zeros_like(np.asarray(e, dtype=float))
        cost0, chi = self.branches(k, e, xi, ip, ic, sp)
        return cost0 - np.maximum(chi - self.theta[k], 0.0)

    def voi(self, k: int, e, xi=0.0, ip: int = 0, ic: int = 0, sp: int = 0):
        return self.chi(k, e, xi, ip, ic, sp) - self.theta[k]

    def transmit(self, k: int, e, xi=0.0, ip: int = 0, ic: int = 0, sp: int = 0):
        return self.voi(k, e, xi, ip, ic, sp) >= 0.0

    def in_bounds(self, e: float, xi: float = 0.0) -> bool:
        return abs(e) <= self.bound and abs(xi) <= self.bound

    def expected_loss(self, k: int, e, xi=0.0, ip: int = 0, ic: int = 0, sp: int = 0):
        """Expected remaining loss: V plus the decision-independent filter error Σ_{t ≥ k+d} Λ(t)O(t)."""
        return self.value(k, e, xi, ip, ic, sp) + float(self.filter_error[k + self.delay:].sum())

    def iter_rows(self, slot_stride: int = 1, node_stride: int = 1) -> Iterator[tuple]:
        """Rows (slot, λ(k−1) state, λ(k) state, σ(k−1), ẽ, ξ, V, σ*) for export."""
        n_chain = self.transition.shape[0]
        grid = self.grid[::node_stride]
        for k in range(0, self.last_slot + 1, slot_stride):
            if self.delay == 1:
                for ic in range(n_chain):
                    values = self.value(k, grid, ic=ic)
                    decisions = self.transmit(k, grid, ic=ic)
                    for e, v, s in zip(grid, values, decisions):
                        yield k, None, ic, None, float(e), None, float(v), int(s)
                continue
            xis = self.nu_grid[::node_stride]
            for ip in range(n_chain):
                for ic in range(n_chain):
                    for sp in (0, 1):
                        for xi in xis:
                            values = self.value(k, grid, xi, ip, ic, sp)
                            decisions = self.transmit(k, grid, xi, ip, ic, sp)
                            for e, v, s in zip(grid, values, decisions):
                                yield k, ip, ic, sp, float(e), float(xi), float(v), int(s)


def _scalar_parameters(model: ScenarioArrays, schedule: CovarianceSchedule, weights: Series):
    T = model.horizon
    a = np.array([model.A(k)[0, 0] for k in range(T + 1)])
    q = np.array([schedule.gain_cov[k][0, 0] for k in range(T + 1)])
    weight = np.array([weights(k)[0, 0] for k in range(T + 1)])
    theta = np.array([float(model.theta(k)) for k in range(T + 1)])
    filter_error = weight * np.array([schedule.O[k][0, 0] for k in range(T + 1)])
    return a, q, weight, theta, filter_error


def never_transmit_variance(a: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Mismatch variance when nothing is ever delivered: P(k+1) = a(k)²P(k) + q(k+1)."""
    P = np.empty_like(q)
    P[0] = q[0]
    for k in range(len(q) - 1):
        P[k + 1] = a[k] ** 2 * P[k] + q[k + 1]
    return P


def solve_dp(
    model: ScenarioArrays,
    schedule: Optional[CovarianceSchedule] = None,
    weights: Optional[Series] = None,
    settings: Optional[Settings] = None,
) -> ValueFunctionGrid:
    """Backward induction over slots T−d..0 for a scalar source with d ∈ {1, 2}."""
    if model.n != 1:
        raise UnsupportedConfigurationError(f"exact DP needs a scalar source, got n = {model.n}; use voi-rollout")
    if model.delay > DP_MAX_DELAY:
        raise UnsupportedConfigurationError(f"exact DP needs d ≤ {DP_MAX_DELAY}, got d = {model.delay}; use voi-rollout")
    settings = settings or get_settings()
    schedule = schedule or CovarianceSchedule.compute(model)
    weights = weights if weights is not None else model.Lambda
    started = time.perf_counter()

    a, q, weight, theta, filter_error = _scalar_parameters(model, schedule, weights)
    half_width = max(E_SPAN * float(np.sqrt(never_transmit_variance(a, q).max())), 1e-12)
    grid = symmetric_grid(half_width, settings.grid_nodes)
    nu_grid = None
    if model.delay == 2:
        nu_grid = symmetric_grid(max(NU_SPAN * float(np.sqrt(q.max())), 1e-12), settings.nu_nodes)

    vf = ValueFunctionGrid(
        delay=model.delay,
        grid=grid,
        nu_grid=nu_grid,
        a=a,
        q=q,
        weight=weight,
        theta=theta,
        lam_values=model.lam.values,
        transition=model.lam.transition,
        filter_error=filter_error,
        quadrature=gauss_hermite(),
    )
    n_chain = vf.transition.shape[0]
    outside = 0
    total = 0
    for k in range(vf.last_slot - 1, -1, -1):
        xi = np.sqrt(q[k + 1]) * vf.nodes
        moved = a[k] * grid[:, None] + xi[None, :]
        xi_nodes = np.broadcast_to(xi, moved.shape)
        outside += int(np.count_nonzero(np.abs(moved) > vf.bound))
        total += moved.size
        for ic in range(n_chain):
            for sigma in range(model.delay):
                acc = np.zeros(len(grid))
                for j in range(n_chain):
                    p = vf.transition[ic, j]
                    if p == 0.0:
                        continue
                    if model.delay == 1:
                        v_next = vf.value(k + 1, moved, ic=j)
                    else:
                        v_next = vf.value(k + 1, moved, xi_nodes, ip=ic, ic=j, sp=sigma)
                    acc += p * (v_next @ vf.node_weights)
                vf.tables[k, ic, sigma] = acc

    vf.tables.setflags(write=False)
    elapsed = time.perf_counter() - started
    logger.info(
        f"Solved DP over {vf.last_slot + 1} slots on {len(grid)} nodes (d={model.delay}, "
        f"{n_chain} λ-state(s)) in {elapsed:.2f}s"
    )
    if total and outside > CLAMP_FLAG_FRACTION * total:
        logger.warning(f"{100.0 * outside / total:.2f}% of DP transition points fell outside the grid")
    return vf


class DynamicProgrammingPolicy(ThresholdPolicy):
    def __init__(self, grid: ValueFunctionGrid, schedule: CovarianceSchedule, label: str = "voi-dp"):
        super().__init__(label, grid.horizon, grid.delay, grid.theta)
        self.grid = grid
        self.schedule = schedule

    def voi_evaluate(self, s: SchedulerInput, streams: Optional[RngStreams] = None) -> float:
        k = s.k
        if k > self.grid.last_slot:
            return -float(self.theta[k])
        e = float(s.etilde[0])
        ic = s.lambda_states[-1]
        xi, ip, sp = 0.0, 0, 0
        if self.delay == 2:
            xi = float(s.xi_buffer[-1][0])
            ip = s.lambda_states[-2]
            sp = s.sigma_buffer[-1]
        self.evaluations += 1
        if not self.grid.in_bounds(e, xi):
            self.clamped += 1
        return float(self.grid.voi(k, e, xi, ip, ic, sp))


# --- rollout VoI (any n, any d) --------------------------------------------------


@dataclass(frozen=True)
class RolloutBase:
    """Policy followed inside a rollout after the evaluated slot.

    Exactly one of `period` (send every `period` slots, counted from the
    evaluated slot) and `threshold` (send iff √(ẽᵀΛẽ) ≥ threshold) is set.
    """

    period: Optional[int] = None
    threshold: Optional[float] = None

    @property
    def label(self) -> str:
        if self.period is not None:
            return f"periodic:{self.period}"
        return f"threshold:{self.threshold:.6g}"


class RolloutPolicy(ThresholdPolicy):
    """VoI from paired rollouts of both branches under a calibrated base policy.

    Both branches share every random draw (filtered innovations, erasure
    fates, λ chain), so χ is estimated from paired differences. The rollout
    runs `lookahead` decision slots plus a continuation of the base policy and
    stops as soon as the two branches coincide on every path. A packet sent
    at slot k that is erased leaves both branches identical, so the estimate
    conditions on its delivery and is scaled by 1 − λ(k).
    """

    def __init__(
        self,
        model: ScenarioArrays,
        schedule: CovarianceSchedule,
        weights: Series,
        paths: int,
        base_period: Optional[int] = None,
        base_threshold: Optional[float] = None,
        families: Sequence[str] = BASE_FAMILIES,
        calibration_paths: int = 64,
        label: str = "voi-rollout",
    ):
        T = model.horizon
        theta = np.array([float(model.theta(k)) for k in range(T + 1)])
        super().__init__(label, T, model.delay, theta)
        self.n = model.n
        self.paths = paths
        self.lookahead = 3 * model.delay + 10
        self.A = np.array([model.A(k) for k in range(T + 1)])
        self.weight = np.array([weights(k) for k in range(T + 1)])
        self.gain_root = np.array([sym_sqrt(g) for g in schedule.gain_cov])
        # per-slot scale of the mismatch increment, unit of the threshold candidates
        self.scale = float(np.sqrt(max(np.mean([np.trace(w @ g) for w, g in zip(self.weight, schedule.gain_cov)]), 0.0)))
        self.lam_values = model.lam.values
        self.transition = model.lam.transition
        self.cum_transition = np.cumsum(model.lam.transition, axis=1)
        self.initial = model.lam.initial
        self.families = tuple(families)
        self.calibration_paths = calibration_paths
        self.seed = model.config.seed
        if base_period is not None or base_threshold is not None:
            self.base = RolloutBase(period=base_period, threshold=base_threshold)
            self.base_sends = self._evaluate_base(self.base)[1]
        else:
            self.base, self.base_sends = self.calibrate()
        self.continuation = self._continuation(self.base_sends)

    @property
    def base_period(self) -> Optional[int]:
        return self.base.period

    def _continuation(self, sends: float) -> int:
        """Slots simulated past the lookahead: a few mean gaps between base sends."""
        slots = self.horizon - self.delay + 1
        if slots <= 0:
            return 0
        gap = slots / max(sends, 1.0)
        return int(min(MAX_CONTINUATION, np.ceil(CONTINUATION_GAPS * gap)))

    def _advance_chain(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.transition.shape[0] == 1:
            return states
        u = rng.random(len(states))
        nxt = (u[:, None] >= self.cum_transition[states]).sum(axis=1)
        return np.minimum(nxt, self.transition.shape[0] - 1)

    def _base_sends(self, base: RolloutBase, t: int, k0: int, e: np.ndarray) -> np.ndarray:
        if base.period is not None:
            return np.full(e.shape[:2], (t - k0) % base.period == 0)
        q = np.einsum("bpi,ij,bpj->bp", e, self.weight[t], e)
        return q >= base.threshold ** 2

    def _coalesced(self, e: np.ndarray, sent: Dict[int, np.ndarray], t: int) -> bool:
        if not np.array_equal(e[0], e[1]):
            return False
        in_flight = (s for s in range(t - self.delay + 1, t + 1) if s in sent)
        return all(np.array_equal(sent[s][0], sent[s][1]) for s in in_flight)

    def _simulate(
        self,
        k0: int,
        e0: np.ndarray,
        xi_known: Dict[int, np.ndarray],
        sigma_known: Dict[int, int],
        loss_known: Dict[int, np.ndarray],
        chain0: np.ndarray,
        first_sigma: Sequence[int],
        decision_end: int,
        base: RolloutBase,
        rng: np.random.Generator,
        paths: int,
        include_price: bool,
        deliver_first: bool = False,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Cost and send count per (branch, path).

        The cost is the mismatch from slot k0 + d to decision_end + d plus the
        price of base sends after k0 (and of the slot-k0 send when
        `include_price`).
        """
        d, n = self.delay, self.n
        branches = len(first_sigma)
        t_end = decision_end + d

        loss = {s: np.broadcast_to(np.asarray(v, dtype=float), (paths,)) for s, v in loss_known.items()}
        states = np.broadcast_to(chain0, (paths,)).astype(int)
        for s in range(k0 + 1, decision_end + 1):
            states = self._advance_chain(states, rng)
            loss[s] = self.lam_values[s][states]
        first = max(k0 - d + 1, 0)
        delivered_if_sent = {s: rng.random(paths) >= loss[s] for s in range(first, decision_end + 1)}
        if deliver_first:
            delivered_if_sent[k0] = np.ones(paths, dtype=bool)

        sent: Dict[int, np.ndarray] = {}
        for s in range(first, k0):
            sent[s] = np.full((branches, paths), bool(sigma_known.get(s, 0)))
        sent[k0] = np.repeat(np.asarray(first_sigma, dtype=bool)[:, None], paths, axis=1)

        xi = {t: np.broadcast_to(v, (paths, n)) for t, v in xi_known.items()}
        e = np.broadcast_to(e0, (branches, paths, n))
        cost = np.zeros((branches, paths))
        if include_price:
            cost += self.theta[k0] * sent[k0]
        sends = sent[k0].astype(float)
        for t in range(k0 + 1, t_end + 1):
            xi[t] = rng.standard_normal((paths, n)) @ self.gain_root[t].T
            held = e @ self.A[t - 1].T + xi[t]
            s = t - d
            if s >= first:
                deliver = sent[s] & delivered_if_sent[s][None, :]
                if deliver.any():
                    window = xi[s + 1]
                    for i in range(s + 2, t + 1):
                        window = window @ self.A[i - 1].T + xi[i]
                    held = np.where(deliver[..., None], window[None, ...], held)
            e = held
            if t >= k0 + d:
                cost += np.einsum("bpi,ij,bpj->bp", e, self.weight[t], e)
            if t <= decision_end:
                sent[t] = self._base_sends(base, t, k0, e)
                cost += self.theta[t] * sent[t]
                sends += sent[t]
            if branches > 1 and t >= k0 + d and self._coalesced(e, sent, t):
                break
        return cost, sends

    def _evaluate_base(self, base: RolloutBase) -> Tuple[float, float]:
        """Mean simulated Φ (mismatch part plus prices) and mean sends of `base` over the whole horizon."""
        if self.horizon - self.delay < 0:
            return 0.0, 0.0
        # same draws for every candidate
        draws = RngStreams(self.seed).fresh("calibration")
        chain0 = np.searchsorted(np.cumsum(self.initial), draws.random(self.calibration_paths), side="right")
        chain0 = np.minimum(chain0, len(self.initial) - 1)
        xi0 = draws.standard_normal((self.calibration_paths, self.n)) @ self.gain_root[0].T
        cost, sends = self._simulate(
            k0=0,
            e0=xi0,
            xi_known={0: xi0},
            sigma_known={},
            loss_known={0: self.lam_values[0][chain0]},
            chain0=chain0,
            first_sigma=[1],
            decision_end=self.horizon - self.delay,
            base=base,
            rng=draws,
            paths=self.calibration_paths,
            include_price=True,
        )
        return float(cost.mean()), float(sends.mean())

    def _candidates(self) -> Iterator[RolloutBase]:
        if "periodic" in self.families:
            for period in CALIBRATION_PERIODS:
                if period > self.horizon + 1 and period != CALIBRATION_PERIODS[0]:
                    break
                yield RolloutBase(period=period)
        if "threshold" in self.families and self.scale > 0.0:
            for multiple in THRESHOLD_MULTIPLES:
                yield RolloutBase(threshold=multiple * self.scale)

    def calibrate(self) -> Tuple[RolloutBase, float]:
        """Pick the base policy with the lowest simulated Φ over the whole horizon."""
        best, best_cost, best_sends = RolloutBase(period=1), np.inf, 0.0
        if self.horizon - self.delay < 0:
            return best, best_sends
        for base in self._candidates():
            cost, sends = self._evaluate_base(base)
            if cost < best_cost:
                best, best_cost, best_sends = base, cost, sends
        logger.info(
            f"Calibrated rollout base policy: {best.label} (cost {best_cost:.6g}, {best_sends:.1f} sends per episode)"
        )
        return best, best_sends

    def voi_evaluate(self, s: SchedulerInput, streams: Optional[RngStreams] = None) -> float:
        k, d = s.k, self.delay
        if k > self.horizon - d:
            return -float(self.theta[k])
        if streams is None:
            raise ValueError("rollout VoI needs the episode's random streams")
        rng = streams.fresh("rollout", k)
        xi_known = {t: v for t, v in zip(range(k - d + 2, k + 1), s.xi_buffer) if t >= 0}
        sigma_known = {t: v for t, v in zip(range(k - d + 1, k), s.sigma_buffer) if t >= 0}
        loss_known = {t: v for t, v in zip(range(k - d + 1, k + 1), s.lambda_buffer) if t >= 0}
        cost, _ = self._simulate(
            k0=k,
            e0=s.etilde,
            xi_known=xi_known,
            sigma_known=sigma_known,
            loss_known=loss_known,
            chain0=np.asarray(s.lambda_states[-1]),
            first_sigma=[0, 1],
            decision_end=min(k + self.lookahead + self.continuation - 1, self.horizon - d),
            base=self.base,
            rng=rng,
            paths=self.paths,
            include_price=False,
            deliver_first=True,
        )
        self.evaluations += 1
        delivery = 1.0 - float(s.lambda_buffer[-1])
        chi = delivery * float(np.mean(cost[0] - cost[1]))
        return chi - float(self.theta[k])


# --- construction ---------------------------------------------------------------


def dp_supported(model: ScenarioArrays) -> bool:
    return model.n == 1 and model.delay <= DP_MAX_DELAY


def build_policy(
    spec: SchedulerSpec,
    model: ScenarioArrays,
    schedule: CovarianceSchedule,
    weights: Series,
    settings: Optional[Settings] = None,
    allow_fallback: bool = False,
) -> SchedulingPolicy:
    settings = settings or get_settings()
    kind = spec.kind
    if kind == SchedulerKind.VOI:
        kind = SchedulerKind.VOI_DP if dp_supported(model) else SchedulerKind.VOI_ROLLOUT
        logger.info(f"Selector 'voi' resolved to '{kind.value}' (n={model.n}, d={model.delay})")
    if kind == SchedulerKind.VOI_DP and not dp_supported(model):
        if not allow_fallback:
            raise UnsupportedConfigurationError(
                f"voi-dp needs n = 1 and d ≤ {DP_MAX_DELAY} (got n={model.n}, d={model.delay}); use voi-rollout"
            )
        logger.warning(f"voi-dp cannot handle n={model.n}, d={model.delay}; routing to voi-rollout")
        kind = SchedulerKind.VOI_ROLLOUT
    if kind == SchedulerKind.VOI_DP:
        return DynamicProgrammingPolicy(solve_dp(model, schedule, weights, settings), schedule)
    if kind == SchedulerKind.VOI_ROLLOUT:
        return RolloutPolicy(model, schedule, weights, paths=settings.rollout_paths)
    return BaselinePolicy(spec, model.horizon, model.delay, weights)


def voi_evaluate(policy: SchedulingPolicy, s: SchedulerInput, streams: Optional[RngStreams] = None) -> Optional[float]:
    return policy.voi_evaluate(s, streams)


def decide(policy: SchedulingPolicy, s: SchedulerInput, streams: Optional[RngStreams] = None) -> int:
    return policy.decide(s, streams)
