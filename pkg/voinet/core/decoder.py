"""Decoder-side switching estimator.

On delivery of x̌(k−d) the estimate is reset to the encoder snapshot propagated
d slots through the model (plus the applied inputs in control mode); otherwise
the previous estimate is propagated one slot. The absence of a packet carries
no information at the optimal policy profile, so no residual correction is
applied.

The encoder's replica calls the same two functions with the same arguments,
which keeps both estimates bit-identical.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from voinet.models.scenario import ScenarioArrays

logger = logging.getLogger(__name__)


def propagate_delivered(
    payload: np.ndarray, k: int, delay: int, model: ScenarioArrays, inputs: Optional[Tuple[np.ndarray, ...]] = None
) -> np.ndarray:
    """Propagate x̌(k−d) to slot k; `inputs` holds u(k−d), …, u(k−1) in control mode."""
    x = payload
    for i, t in enumerate(range(k - delay, k)):
        x = model.A(t) @ x
        if inputs is not None:
            x = x + model.B(t) @ inputs[i]
    return x


def hold_estimate(xhat_prev: np.ndarray, k: int, model: ScenarioArrays, u_prev: Optional[np.ndarray] = None) -> np.ndarray:
    x = model.A(k - 1) @ xhat_prev
    if u_prev is not None:
        x = x + model.B(k - 1) @ u_prev
    return x


def push(buffer: Tuple, item, size: int) -> Tuple:
    """Append to a fixed-length ring kept as a tuple (oldest first)."""
    if size <= 0:
        return ()
    return (buffer + (item,))[-size:]


@dataclass(frozen=True)
class DecoderState:
    k: int
    xhat: np.ndarray
    inputs: Optional[Tuple[np.ndarray, ...]] = None  # u(k−d..k−1), control mode only


def initial_decoder_state(model: ScenarioArrays) -> DecoderState:
    inputs = tuple(np.zeros(model.p) for _ in range(model.delay)) if model.control else None
    return DecoderState(k=0, xhat=model.m0.copy(), inputs=inputs)


def decoder_step_estimation(s: DecoderState, z: Optional[np.ndarray], model: ScenarioArrays) -> DecoderState:
    k = s.k + 1
    if z is not None:
        xhat = propagate_delivered(z, k, model.delay, model)
    else:
        xhat = hold_estimate(s.xhat, k, model)
    return DecoderState(k=k, xhat=xhat)


def decoder_step_control(
    s: DecoderState, z: Optional[np.ndarray], u_prev: np.ndarray, model: ScenarioArrays
) -> DecoderState:
    """Same switching rule with the applied inputs added on both branches."""
    k = s.k + 1
    inputs = push(s.inputs, u_prev, model.delay)
    if z is not None:
        xhat = propagate_delivered(z, k, model.delay, model, inputs)
    else:
        xhat = hold_estimate(s.xhat, k, model, u_prev)
    return DecoderState(k=k, xhat=xhat, inputs=inputs)
