"""Finite-horizon LQ control: backward Riccati recursion, certainty-equivalent input, Γ and Ψ."""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from voinet.core.errors import NumericalError
from voinet.models.scenario import ScenarioArrays, Series

if TYPE_CHECKING:
    from voinet.core.harness import EpisodeLog

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RiccatiSolution:
    S: np.ndarray       # (T+2, n, n)
    L: np.ndarray       # (T+1, p, n)
    Gamma: np.ndarray   # (T+1, n, n)
    G: np.ndarray       # (T+1, p, p): BᵀS(k+1)B + R

    @property
    def horizon(self) -> int:
        return len(self.L) - 1

    def gamma_series(self) -> Series:
        return Series(self.Gamma, 2, "Gamma")


def solve_riccati(model: ScenarioArrays) -> RiccatiSolution:
    """Backward recursion from S(T+1) = Q(T+1)."""
    if model.B is None or model.Q is None or model.R is None:
        raise NumericalError("Riccati recursion needs B, Q and R")
    T, n, p = model.horizon, model.n, model.p
    S = np.empty((T + 2, n, n))
    L = np.empty((T + 1, p, n))
    Gamma = np.empty((T + 1, n, n))
    G_all = np.empty((T + 1, p, p))
    S[T + 1] = model.Q(T + 1)
    for k in range(T, -1, -1):
        A, B, Q, R = model.A(k), model.B(k), model.Q(k), model.R(k)
        S_next = S[k + 1]
        G = B.T @ S_next @ B + R
        G = 0.5 * (G + G.T)
        BtSA = B.T @ S_next @ A
        try:
            L[k] = cho_solve(cho_factor(G), BtSA)
        except LinAlgError as e:
            raise NumericalError(f"BᵀSB + R is not positive definite at slot {k}") from e
        Gamma[k] = BtSA.T @ L[k]
        Gamma[k] = 0.5 * (Gamma[k] + Gamma[k].T)
        S_k = Q + A.T @ S_next @ A - Gamma[k]
        S[k] = 0.5 * (S_k + S_k.T)
        G_all[k] = G
        if not (np.all(np.isfinite(S[k])) and np.all(np.isfinite(L[k]))):
            raise NumericalError(f"Riccati recursion produced non-finite values at slot {k}")
    for arr in (S, L, Gamma, G_all):
        arr.setflags(write=False)
    logger.debug(f"Riccati solved over {T + 1} slots, tr S(0) = {np.trace(S[0]):.6g}")
    return RiccatiSolution(S=S, L=L, Gamma=Gamma, G=G_all)


def ce_input(sol: RiccatiSolution, xhat: np.ndarray, k: int) -> np.ndarray:
    """u(k) = −L(k)x̂(k)."""
    return -(sol.L[k] @ xhat)


def eta(sol: RiccatiSolution, x: np.ndarray, u: np.ndarray, k: int) -> float:
    r = u + sol.L[k] @ x
    return float(r @ sol.G[k] @ r)


def psi_loss(log: "EpisodeLog", sol: RiccatiSolution) -> float:
    """Realized Ψ = Σθσ + Σ η(k)."""
    comm = float(np.dot(log.theta, log.sigma))
    return comm + sum(eta(sol, log.x[k], log.u[k], k) for k in range(len(log.sigma)))
