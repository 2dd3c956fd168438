"""Smart-sensor encoder: Kalman filter, decoder replica and scheduler state.

The encoder sees every measurement and, through acknowledgments, every
delivery outcome up to slot k−d, so it can rebuild the decoder's estimate
exactly. The scheduler state at slot k is the mismatch ẽ(k) = x̌(k) − x̂(k)
together with short buffers of innovations, loss probabilities and past
decisions.
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from voinet.core.decoder import hold_estimate, propagate_delivered, push
from voinet.core.errors import ChannelStateError, NumericalError
from voinet.core.sim_core import Ack
from voinet.models.scenario import ScenarioArrays, Series

logger = logging.getLogger(__name__)


def _spd_inverse(mat: np.ndarray, what: str, k: int) -> np.ndarray:
    try:
        factor = cho_factor(mat)
    except LinAlgError as e:
        raise NumericalError(f"{what} is not positive definite at slot {k}") from e
    return cho_solve(factor, np.eye(mat.shape[0]))


def predict_covariance(O_prev: np.ndarray, A: np.ndarray, W: np.ndarray) -> np.ndarray:
    M = A @ O_prev @ A.T + W
    return 0.5 * (M + M.T)


def update_covariance(M: np.ndarray, C: np.ndarray, V: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Information-form update: O = (M⁻¹ + CᵀV⁻¹C)⁻¹, K = O CᵀV⁻¹."""
    V_inv = _spd_inverse(V, "V", k)
    info = _spd_inverse(M, "M", k) + C.T @ V_inv @ C
    O = _spd_inverse(0.5 * (info + info.T), "information matrix", k)
    O = 0.5 * (O + O.T)
    K = O @ C.T @ V_inv
    if not (np.all(np.isfinite(O)) and np.all(np.isfinite(K))):
        raise NumericalError(f"Kalman update produced non-finite values at slot {k}")
    return O, K


@dataclass(frozen=True)
class CovarianceSchedule:
    """Measurement-independent filter quantities for slots 0..T.

    ``gain_cov[k]`` is the covariance of the filtered innovation K(k)ν(k),
    which equals M(k) − O(k) (and M0 − O(0) at slot 0).
    """

    M: np.ndarray
    O: np.ndarray
    K: np.ndarray
    gain_cov: np.ndarray

    @classmethod
    def compute(cls, model: ScenarioArrays) -> "CovarianceSchedule":
        T, n, m = model.horizon, model.n, model.m
        M = np.empty((T + 1, n, n))
        O = np.empty((T + 1, n, n))
        K = np.empty((T + 1, n, m))
        gain_cov = np.empty((T + 1, n, n))
        M[0] = model.M0
        for k in range(T + 1):
            if k > 0:
                M[k] = predict_covariance(O[k - 1], model.A(k - 1), model.W(k - 1))
            O[k], K[k] = update_covariance(M[k], model.C(k), model.V(k), k)
            S = model.C(k) @ M[k] @ model.C(k).T + model.V(k)
            G = K[k] @ S @ K[k].T
            gain_cov[k] = 0.5 * (G + G.T)
        for arr in (M, O, K, gain_cov):
            arr.setflags(write=False)
        return cls(M=M, O=O, K=K, gain_cov=gain_cov)

    def trace_floor(self, weights: Series, start: int = 0) -> float:
        """Σ_{t≥start} tr(Λ(t)O(t)): the part of Φ no scheduling decision can remove."""
        return float(sum(np.trace(weights(t) @ self.O[t]) for t in range(start, len(self.O))))


@dataclass(frozen=True)
class SchedulerInput:
    k: int
    etilde: np.ndarray
    nu_buffer: Tuple[np.ndarray, ...]      # ν(k−d+2..k)
    xi_buffer: Tuple[np.ndarray, ...]      # K(t)ν(t) for the same slots
    lambda_buffer: Tuple[float, ...]       # λ(k−d+1..k)
    lambda_states: Tuple[int, ...]         # chain states behind lambda_buffer
    sigma_buffer: Tuple[int, ...]          # σ(k−d+1..k−1)


@dataclass(frozen=True)
class EncoderState:
    k: int
    delay: int
    m: np.ndarray
    xcheck: np.ndarray
    M: np.ndarray
    O: np.ndarray
    K: np.ndarray
    replica_xhat: np.ndarray
    nu_buffer: Tuple[np.ndarray, ...]
    xi_buffer: Tuple[np.ndarray, ...]
    lambda_buffer: Tuple[float, ...]
    lambda_states: Tuple[int, ...]
    sigma_buffer: Tuple[int, ...]
    in_flight: Tuple[Tuple[int, np.ndarray], ...] = ()
    inputs: Optional[Tuple[np.ndarray, ...]] = None  # u(k−d..k−1), control mode only


def initial_encoder_state(model: ScenarioArrays) -> EncoderState:
    """State before the slot-0 measurement update: m(0) = m0, M(0) = M0."""
    d, n, m = model.delay, model.n, model.m
    return EncoderState(
        k=0,
        delay=d,
        m=model.m0.copy(),
        xcheck=model.m0.copy(),
        M=model.M0.copy(),
        O=model.M0.copy(),
        K=np.zeros((n, m)),
        replica_xhat=model.m0.copy(),
        nu_buffer=tuple(np.zeros(m) for _ in range(d - 1)),
        xi_buffer=tuple(np.zeros(n) for _ in range(d - 1)),
        lambda_buffer=tuple(0.0 for _ in range(d)),
        lambda_states=tuple(0 for _ in range(d)),
        sigma_buffer=tuple(0 for _ in range(d - 1)),
        inputs=tuple(np.zeros(model.p) for _ in range(d)) if model.control else None,
    )


def kf_predict(e: EncoderState, u: Optional[np.ndarray], model: ScenarioArrays) -> EncoderState:
    """Time update from slot k−1 to k; u is u(k−1) in control mode."""
    k = e.k + 1
    A = model.A(e.k)
    m = A @ e.xcheck
    inputs = e.inputs
    if u is not None:
        m = m + model.B(e.k) @ u
        inputs = push(inputs, u, e.delay)
    M = predict_covariance(e.O, A, model.W(e.k))
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(M))):
        raise NumericalError(f"Kalman prediction produced non-finite values at slot {k}")
    return replace(e, k=k, m=m, M=M, inputs=inputs)


def kf_update(e: EncoderState, y: np.ndarray, model: ScenarioArrays) -> Tuple[EncoderState, np.ndarray]:
    k = e.k
    C = model.C(k)
    O, K = update_covariance(e.M, C, model.V(k), k)
    nu = y - C @ e.m
    xi = K @ nu
    size = e.delay - 1
    state = replace(
        e,
        xcheck=e.m + xi,
        O=O,
        K=K,
        nu_buffer=push(e.nu_buffer, nu, size),
        xi_buffer=push(e.xi_buffer, xi, size),
    )
    return state, nu


def record_lambda(e: EncoderState, value: float, chain_state: int = 0) -> EncoderState:
    return replace(
        e,
        lambda_buffer=push(e.lambda_buffer, float(value), e.delay),
        lambda_states=push(e.lambda_states, int(chain_state), e.delay),
    )


def replica_step(e: EncoderState, ack: Optional[Ack], model: ScenarioArrays) -> EncoderState:
    """Rebuild the decoder estimate x̂(k) from the ack of the packet sent at k−d."""
    k = e.k
    if k == 0:
        return e
    cutoff = k - e.delay
    if ack is not None and ack.delivered:
        if ack.send_time != cutoff:
            raise ChannelStateError(f"ack for slot {ack.send_time} arrived at slot {k} with delay {e.delay}")
        payload = dict(e.in_flight)[ack.send_time]
        replica = propagate_delivered(payload, k, e.delay, model, e.inputs)
    else:
        u_prev = e.inputs[-1] if e.inputs is not None else None
        replica = hold_estimate(e.replica_xhat, k, model, u_prev)
    in_flight = tuple(entry for entry in e.in_flight if entry[0] > cutoff)
    return replace(e, replica_xhat=replica, in_flight=in_flight)


def record_decision(e: EncoderState, sigma: int) -> EncoderState:
    in_flight = e.in_flight + ((e.k, e.xcheck.copy()),) if sigma else e.in_flight
    return replace(e, sigma_buffer=push(e.sigma_buffer, int(sigma), e.delay - 1), in_flight=in_flight)


def build_scheduler_input(e: EncoderState) -> SchedulerInput:
    return SchedulerInput(
        k=e.k,
        etilde=e.xcheck - e.replica_xhat,
        nu_buffer=e.nu_buffer,
        xi_buffer=e.xi_buffer,
        lambda_buffer=e.lambda_buffer,
        lambda_states=e.lambda_states,
        sigma_buffer=e.sigma_buffer,
    )
