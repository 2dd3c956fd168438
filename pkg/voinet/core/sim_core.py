"""Ground-truth world: Gauss-Markov source, sensor, λ chain and the delayed erasure channel.

Randomness is split into named sub-streams derived from one episode seed with
`numpy.random.SeedSequence` spawn keys, so that process noise, sensor noise,
erasures and the λ chain never draw from each other's generators.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from voinet.core.errors import ChannelStateError, DimensionError
from voinet.models.scenario import LambdaProcess, ScenarioArrays

logger = logging.getLogger(__name__)

STREAM_IDS = {
    "init": 0,
    "process": 1,
    "measurement": 2,
    "erasure": 3,
    "lambda": 4,
    "policy": 5,
    "rollout": 6,
    "calibration": 7,
}


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: str

    def generator(self, *key: int) -> np.random.Generator:
        spawn_key = (STREAM_IDS[self.stream_id],) + tuple(int(k) for k in key)
        return np.random.default_rng(np.random.SeedSequence(int(self.seed) % 2**64, spawn_key=spawn_key))


class RngStreams:
    """The per-episode set of independent generators."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.init = RngStream(self.seed, "init").generator()
        self.process = RngStream(self.seed, "process").generator()
        self.measurement = RngStream(self.seed, "measurement").generator()
        self.erasure = RngStream(self.seed, "erasure").generator()
        self.lam = RngStream(self.seed, "lambda").generator()
        self.policy = RngStream(self.seed, "policy").generator()

    def fresh(self, stream_id: str, *key: int) -> np.random.Generator:
        return RngStream(self.seed, stream_id).generator(*key)


@dataclass(frozen=True)
class SourceState:
    k: int
    x: np.ndarray


def initial_source_state(model: ScenarioArrays, rng: np.random.Generator) -> SourceState:
    x0 = model.m0 + model.m0_root @ rng.standard_normal(model.n)
    return SourceState(0, x0)


def step_source(s: SourceState, u: Optional[np.ndarray], model: ScenarioArrays, rng: np.random.Generator) -> SourceState:
    """x(k+1) = A(k)x(k) + B(k)u(k) + w(k)."""
    k = s.k
    A = model.A(k)
    if s.x.shape != (A.shape[1],):
        raise DimensionError(f"state has shape {s.x.shape}, A({k}) is {A.shape}")
    x_next = A @ s.x
    if u is not None:
        if model.B is None:
            raise DimensionError("input given but the source has no input matrix")
        B = model.B(k)
        if u.shape != (B.shape[1],):
            raise DimensionError(f"input has shape {u.shape}, B({k}) is {B.shape}")
        x_next = x_next + B @ u
    w = model.w_root(k) @ rng.standard_normal(model.n)
    return SourceState(k + 1, x_next + w)


def observe(s: SourceState, model: ScenarioArrays, rng: np.random.Generator) -> np.ndarray:
    """y(k) = C(k)x(k) + v(k)."""
    C = model.C(s.k)
    if s.x.shape != (C.shape[1],):
        raise DimensionError(f"state has shape {s.x.shape}, C({s.k}) is {C.shape}")
    return C @ s.x + model.v_root(s.k) @ rng.standard_normal(model.m)


@dataclass(frozen=True)
class PacketSlot:
    payload: np.ndarray
    send_time: int
    erased: bool


@dataclass(frozen=True)
class Ack:
    send_time: int
    delivered: bool


def next_chain_state(transition_row: np.ndarray, u: float) -> int:
    cum = np.cumsum(transition_row)
    return min(int(np.searchsorted(cum, u, side="right")), len(transition_row) - 1)


class ChannelPipeline:
    """Fixed-delay packet-erasure channel with a Markov-modulated loss probability.

    A packet sent at slot k lands in ring slot ``k % d`` and is read back at
    slot ``k + d``; with a fixed delay the ring is FIFO by construction. The
    erasure fate of slot k is drawn at slot k whether or not a packet is sent,
    so compared policies that both transmit at k see the same fate.
    """

    def __init__(self, delay: int, lam: LambdaProcess):
        if delay < 1:
            raise ChannelStateError(f"delay must be positive, got {delay}")
        self.delay = delay
        self.lam = lam
        self._ring: List[Optional[PacketSlot]] = [None] * delay
        self._k = -1
        self._lambda_k = -1
        self.lambda_state: Optional[int] = None
        self.lambda_value: Optional[float] = None

    @property
    def slot(self) -> int:
        return self._k

    def lambda_step(self, rng: np.random.Generator) -> float:
        """Advance the λ chain to the next slot and return λ(k)."""
        k = self._lambda_k + 1
        if k != self._k + 1:
            raise ChannelStateError(f"λ for slot {self._lambda_k} already drawn; step the channel first")
        if self.lam.n_states == 1:
            state = 0
        elif k == 0:
            state = next_chain_state(self.lam.initial, rng.random())
        else:
            state = next_chain_state(self.lam.transition[self.lambda_state], rng.random())
        self.lambda_state = state
        self.lambda_value = float(self.lam.values_at(k)[state])
        self._lambda_k = k
        return self.lambda_value

    def pending_arrival(self) -> Optional[Ack]:
        """Ack of the packet that lands in the upcoming slot (sent d slots earlier), if any."""
        arriving = self._ring[(self._k + 1) % self.delay]
        if arriving is None:
            return None
        return Ack(arriving.send_time, not arriving.erased)

    def channel_step(
        self, k: int, send: bool, payload: np.ndarray, rng: np.random.Generator
    ) -> Tuple[Optional[np.ndarray], Optional[Ack]]:
        """Return z(k) (None stands for 𝔇) and the ack of the packet sent at k - d."""
        if k != self._k + 1:
            raise ChannelStateError(f"channel stepped out of order: expected slot {self._k + 1}, got {k}")
        if self._lambda_k != k:
            raise ChannelStateError(f"λ({k}) must be drawn before the channel step")
        erase_draw = rng.random()
        index = k % self.delay
        arriving = self._ring[index]
        z, ack = None, None
        if arriving is not None:
            ack = Ack(arriving.send_time, not arriving.erased)
            if not arriving.erased:
                z = arriving.payload
        if send:
            self._ring[index] = PacketSlot(np.array(payload, dtype=float), k, erase_draw < self.lambda_value)
        else:
            self._ring[index] = None
        self._k = k
        return z, ack
