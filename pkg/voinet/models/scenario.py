"""Numeric form of a scenario, invariant checks and the spacecraft preset.

A `ScenarioConfig` is plain data (nested lists, as read from a scenario
file). `compile_scenario` validates it and turns every field into read-only
numpy arrays wrapped in `Series`, so that downstream code indexes a matrix
sequence with ``series(k)`` regardless of whether it was given once (constant,
broadcast over slots) or once per slot.
"""
import math
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from voinet.core.errors import ScenarioValidationError
from voinet.models.schemas import (
    ChannelSpec,
    CostSpec,
    Mode,
    SchedulerKind,
    ScenarioConfig,
    SchedulerSpec,
    SourceModel,
)

logger = logging.getLogger(__name__)

PD_TOLERANCE = 1e-12
STOCHASTIC_TOLERANCE = 1e-12
DP_MAX_DELAY = 2


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


class Series:
    """A scalar/matrix sequence stored once (constant) or once per slot."""

    def __init__(self, data, base_ndim: int, name: str):
        arr = np.array(data, dtype=float)
        arr.setflags(write=False)
        self.name = name
        self.base_ndim = base_ndim
        self.per_slot = arr.ndim == base_ndim + 1
        self.data = arr

    def __call__(self, k: int) -> np.ndarray:
        return self.data[k] if self.per_slot else self.data

    def __len__(self) -> int:
        return len(self.data) if self.per_slot else 1

    def entries(self) -> List[np.ndarray]:
        return list(self.data) if self.per_slot else [self.data]


def sym_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root of a positive semidefinite matrix."""
    sym = 0.5 * (matrix + matrix.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    root = (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    root.setflags(write=False)
    return root


@dataclass(frozen=True)
class LambdaProcess:
    """Loss-probability process: a finite-state chain, or a fixed sequence (one state)."""

    values: np.ndarray      # (T+1, L) loss probability of each state at each slot
    transition: np.ndarray  # (L, L)
    initial: np.ndarray     # (L,)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    def values_at(self, k: int) -> np.ndarray:
        return self.values[k]

    @classmethod
    def from_spec(cls, channel: ChannelSpec, horizon: int) -> "LambdaProcess":
        if channel.chain is not None:
            states = np.asarray(channel.chain.states, dtype=float)
            values = np.tile(states, (horizon + 1, 1))
            transition = np.asarray(channel.chain.transition, dtype=float)
            initial = np.asarray(channel.chain.initial, dtype=float)
        else:
            loss = np.asarray(channel.loss, dtype=float)
            seq = np.full(horizon + 1, float(loss)) if loss.ndim == 0 else loss
            values = seq.reshape(horizon + 1, 1)
            transition = np.ones((1, 1))
            initial = np.ones(1)
        for arr in (values, transition, initial):
            arr.setflags(write=False)
        return cls(values=values, transition=transition, initial=initial)


@dataclass(frozen=True)
class ScenarioArrays:
    config: ScenarioConfig
    mode: Mode
    horizon: int
    n: int
    m: int
    p: int
    A: Series
    B: Optional[Series]
    C: Series
    W: Series
    V: Series
    m0: np.ndarray
    M0: np.ndarray
    delay: int
    lam: LambdaProcess
    theta: Series
    Lambda: Optional[Series]
    Q: Optional[Series]
    R: Optional[Series]
    w_roots: Tuple[np.ndarray, ...]
    v_roots: Tuple[np.ndarray, ...]
    m0_root: np.ndarray

    @property
    def control(self) -> bool:
        return self.mode == Mode.CONTROL

    def w_root(self, k: int) -> np.ndarray:
        return self.w_roots[k] if len(self.w_roots) > 1 else self.w_roots[0]

    def v_root(self, k: int) -> np.ndarray:
        return self.v_roots[k] if len(self.v_roots) > 1 else self.v_roots[0]


def compile_scenario(config: ScenarioConfig, check: bool = True) -> ScenarioArrays:
    """Validate `config` and build its numeric form.

    ``check=False`` skips the invariant checks; tests use it for near-singular
    noise limits that the positive-definiteness tolerance rejects.
    """
    violations = validate(config) if check else []
    if violations:
        raise ScenarioValidationError(violations)

    src, cost = config.source, config.cost
    A = Series(src.A, 2, "A")
    C = Series(src.C, 2, "C")
    W = Series(src.W, 2, "W")
    V = Series(src.V, 2, "V")
    B = Series(src.B, 2, "B") if src.B is not None else None
    n = A(0).shape[0]
    m = C(0).shape[0]
    p = B(0).shape[1] if B is not None else 0
    m0 = np.array(src.m0, dtype=float)
    M0 = np.array(src.M0, dtype=float)
    for arr in (m0, M0):
        arr.setflags(write=False)

    return ScenarioArrays(
        config=config,
        mode=config.mode,
        horizon=src.horizon,
        n=n,
        m=m,
        p=p,
        A=A,
        B=B,
        C=C,
        W=W,
        V=V,
        m0=m0,
        M0=M0,
        delay=config.channel.delay,
        lam=LambdaProcess.from_spec(config.channel, src.horizon),
        theta=Series(cost.theta, 0, "theta"),
        Lambda=Series(cost.Lambda, 2, "Lambda") if cost.Lambda is not None else None,
        Q=Series(cost.Q, 2, "Q") if cost.Q is not None else None,
        R=Series(cost.R, 2, "R") if cost.R is not None else None,
        w_roots=tuple(sym_sqrt(w) for w in W.entries()),
        v_roots=tuple(sym_sqrt(v) for v in V.entries()),
        m0_root=sym_sqrt(M0),
    )


# --- validation -----------------------------------------------------------


def _is_symmetric(mat: np.ndarray) -> bool:
    scale = max(1.0, float(np.max(np.abs(mat))))
    return bool(np.all(np.abs(mat - mat.T) <= 1e-10 * scale))


def _min_eig_ratio_ok(mat: np.ndarray, strict: bool) -> bool:
    eig = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    bound = PD_TOLERANCE * max(float(eig[-1]), 1.0)
    return bool(eig[0] > bound) if strict else bool(eig[0] >= -bound)


class _Checker:
    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.violations: List[Violation] = []
        self.horizon = config.source.horizon

    def add(self, path: str, message: str) -> None:
        self.violations.append(Violation(path, message))

    def series(self, data, base_ndim: int, path: str, slots: int) -> Optional[List[np.ndarray]]:
        try:
            arr = np.array(data, dtype=float)
        except (ValueError, TypeError):
            self.add(path, "not a rectangular numeric array")
            return None
        if arr.ndim not in (base_ndim, base_ndim + 1):
            self.add(path, f"expected {base_ndim}-d entries or a per-slot list of them")
            return None
        if not np.all(np.isfinite(arr)):
            self.add(path, "contains non-finite values")
            return None
        if arr.ndim == base_ndim:
            return [arr]
        if self.horizon >= 1 and len(arr) != slots:
            self.add(path, f"expected a constant or exactly {slots} per-slot entries, got {len(arr)}")
            return None
        return list(arr)

    def shapes(self, entries: List[np.ndarray], shape: Tuple[int, ...], path: str) -> bool:
        for k, entry in enumerate(entries):
            if entry.shape != shape:
                where = f"{path}[{k}]" if len(entries) > 1 else path
                self.add(where, f"expected shape {shape}, got {entry.shape}")
                return False
        return True

    def definite(self, entries: List[np.ndarray], path: str, label: str, strict: bool = True) -> None:
        kind = "positive definite" if strict else "positive semidefinite"
        for k, entry in enumerate(entries):
            where = f"{path}[{k}]" if len(entries) > 1 else path
            if not _is_symmetric(entry) or not _min_eig_ratio_ok(entry, strict):
                self.add(where, f"{label} not {kind}")


def _check_source(chk: _Checker, src: SourceModel) -> Tuple[Optional[int], Optional[int], Optional[int]]:
    T = src.horizon
    if T < 1:
        chk.add("source.horizon", "horizon must be a positive integer")
    slots = T + 1
    A = chk.series(src.A, 2, "source.A", slots)
    n = None
    if A is not None:
        if A[0].shape[0] != A[0].shape[1]:
            chk.add("source.A", f"A must be square, got {A[0].shape}")
        else:
            n = A[0].shape[0]
            chk.shapes(A, (n, n), "source.A")
    C = chk.series(src.C, 2, "source.C", slots)
    m = None
    if C is not None:
        m = C[0].shape[0]
        if n is not None:
            chk.shapes(C, (m, n), "source.C")
    p = None
    if src.B is not None:
        B = chk.series(src.B, 2, "source.B", slots)
        if B is not None:
            p = B[0].shape[1]
            if n is not None:
                chk.shapes(B, (n, p), "source.B")
    W = chk.series(src.W, 2, "source.W", slots)
    if W is not None and n is not None and chk.shapes(W, (n, n), "source.W"):
        chk.definite(W, "source.W", "W")
    V = chk.series(src.V, 2, "source.V", slots)
    if V is not None and m is not None and chk.shapes(V, (m, m), "source.V"):
        chk.definite(V, "source.V", "V")
    if n is not None and len(src.m0) != n:
        chk.add("source.m0", f"expected {n} entries, got {len(src.m0)}")
    M0 = chk.series(src.M0, 2, "source.M0", 1)
    if M0 is not None and len(M0) == 1 and n is not None and chk.shapes(M0, (n, n), "source.M0"):
        chk.definite(M0, "source.M0", "M0")
    return n, m, p


def _check_channel(chk: _Checker, channel: ChannelSpec) -> None:
    T = chk.horizon
    if not 1 <= channel.delay <= T:
        chk.add("channel.delay", "delay must satisfy 1 ≤ d ≤ T")
    if (channel.loss is None) == (channel.chain is None):
        chk.add("channel", "exactly one of loss or chain must be given")
        return
    if channel.loss is not None:
        loss = chk.series(channel.loss, 0, "channel.loss", T + 1)
        if loss is not None and any(not 0.0 <= float(v) <= 1.0 for v in loss):
            chk.add("channel.loss", "loss probabilities must lie in [0, 1]")
        return
    chain = channel.chain
    states = np.asarray(chain.states, dtype=float)
    if states.size == 0 or np.any(states < 0.0) or np.any(states > 1.0):
        chk.add("channel.chain.states", "loss probabilities must lie in [0, 1]")
    trans = chk.series(chain.transition, 2, "channel.chain.transition", 1)
    if trans is not None:
        P = trans[0]
        if P.shape != (states.size, states.size):
            chk.add("channel.chain.transition", f"expected shape {(states.size, states.size)}, got {P.shape}")
        elif np.any(P < 0.0) or np.any(np.abs(P.sum(axis=1) - 1.0) > STOCHASTIC_TOLERANCE):
            chk.add("channel.chain.transition", "transition rows must be nonnegative and sum to 1")
    init = np.asarray(chain.initial, dtype=float)
    if init.shape != states.shape:
        chk.add("channel.chain.initial", f"expected {states.size} entries, got {init.size}")
    elif np.any(init < 0.0) or abs(init.sum() - 1.0) > STOCHASTIC_TOLERANCE:
        chk.add("channel.chain.initial", "initial distribution must be nonnegative and sum to 1")


def _check_cost(chk: _Checker, cost: CostSpec, mode: Mode, n: Optional[int], p: Optional[int]) -> None:
    T = chk.horizon
    theta = chk.series(cost.theta, 0, "cost.theta", T + 1)
    if theta is not None and any(float(t) < 0.0 for t in theta):
        chk.add("cost.theta", "theta must be nonnegative")
    if mode == Mode.ESTIMATION:
        if cost.Lambda is None:
            chk.add("cost.Lambda", "Lambda required in estimation mode")
        else:
            lam = chk.series(cost.Lambda, 2, "cost.Lambda", T + 1)
            if lam is not None and n is not None and chk.shapes(lam, (n, n), "cost.Lambda"):
                chk.definite(lam, "cost.Lambda", "Lambda")
        return
    if p is None:
        chk.add("source.B", "B required in control mode")
    if cost.Q is None:
        chk.add("cost.Q", "Q required in control mode")
    else:
        Q = chk.series(cost.Q, 2, "cost.Q", T + 2)
        if Q is not None and n is not None and chk.shapes(Q, (n, n), "cost.Q"):
            chk.definite(Q, "cost.Q", "Q", strict=False)
    if cost.R is None:
        chk.add("cost.R", "R required in control mode")
    else:
        R = chk.series(cost.R, 2, "cost.R", T + 1)
        if R is not None and p is not None and chk.shapes(R, (p, p), "cost.R"):
            chk.definite(R, "cost.R", "R")


def check_scheduler(spec: SchedulerSpec, n: Optional[int], delay: int, path: str = "scheduler") -> List[Violation]:
    found: List[Violation] = []
    if spec.kind == SchedulerKind.PERIODIC:
        if spec.period < 1:
            found.append(Violation(path, "period must be ≥ 1"))
        if spec.phase < 0:
            found.append(Violation(path, "phase must be ≥ 0"))
    elif spec.kind == SchedulerKind.RANDOM and not 0.0 <= spec.rate <= 1.0:
        found.append(Violation(path, "rate must lie in [0, 1]"))
    elif spec.kind == SchedulerKind.THRESHOLD and not spec.threshold >= 0.0:
        found.append(Violation(path, "threshold must be nonnegative"))
    elif spec.kind == SchedulerKind.VOI_DP:
        if n is not None and n != 1:
            found.append(Violation(path, "voi-dp requires a scalar source (n = 1); use voi-rollout"))
        if delay > DP_MAX_DELAY:
            found.append(Violation(path, f"voi-dp requires d ≤ {DP_MAX_DELAY}; use voi-rollout"))
    return found


def validate(config: ScenarioConfig) -> List[Violation]:
    """Return every invariant violation of `config` (empty list means valid)."""
    chk = _Checker(config)
    n, _, p = _check_source(chk, config.source)
    _check_channel(chk, config.channel)
    _check_cost(chk, config.cost, config.mode, n, p)
    chk.violations.extend(check_scheduler(config.scheduler, n, config.channel.delay))
    if config.episodes < 1:
        chk.add("episodes", "episodes must be ≥ 1")
    return chk.violations


def spacecraft_scenario() -> ScenarioConfig:
    """Spin-stabilized spacecraft angular-velocity estimation over a lossy, delayed downlink."""
    T = 1000
    w_diag = [1e-6 * 0.2245, 1e-6 * 0.2245, 1e-6 * 0.0025]
    W = np.diag(w_diag).tolist()
    return ScenarioConfig(
        name="spacecraft",
        mode=Mode.ESTIMATION,
        source=SourceModel(
            horizon=T,
            A=[[0.4258, 0.4258, 0.0], [0.4258, 0.4258, 0.0], [0.0, 0.0, 1.0]],
            C=np.eye(3).tolist(),
            W=W,
            V=(1e-3 * np.eye(3)).tolist(),
            m0=[0.0, 0.0, 2.0 * math.pi],
            M0=(10.0 * np.diag(w_diag)).tolist(),
        ),
        channel=ChannelSpec(delay=2, loss=0.3),
        cost=CostSpec(
            theta=[8e-6 if k <= T // 2 else 6e-6 for k in range(T + 1)],
            Lambda=np.eye(3).tolist(),
        ),
        scheduler=SchedulerSpec(kind=SchedulerKind.VOI_ROLLOUT),
        seed=7,
        episodes=200,
    )
