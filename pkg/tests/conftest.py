import sys
import os

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest

from voinet.config import Settings
from voinet.models.schemas import ChannelSpec, CostSpec, MarkovLambda, Mode, ScenarioConfig, SourceModel


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: statistical acceptance runs (minutes)")


def scalar_config(
    A=1.0,
    C=1.0,
    W=1.0,
    V=1.0,
    M0=1.0,
    m0=0.0,
    horizon=20,
    delay=1,
    loss=0.0,
    chain=None,
    theta=1.0,
    Lambda=1.0,
    mode=Mode.ESTIMATION,
    B=None,
    Q=None,
    R=None,
    scheduler="voi",
    seed=0,
    episodes=1,
):
    """Scalar scenario; scalars are wrapped into 1×1 matrices."""
    control = mode == Mode.CONTROL
    return ScenarioConfig(
        name="scalar",
        mode=mode,
        source=SourceModel(
            horizon=horizon,
            A=[[A]],
            B=[[B]] if B is not None else None,
            C=[[C]],
            W=[[W]],
            V=[[V]],
            m0=[m0],
            M0=[[M0]],
        ),
        channel=ChannelSpec(delay=delay, loss=None if chain is not None else loss, chain=chain),
        cost=CostSpec(
            theta=theta,
            Lambda=None if control else [[Lambda]],
            Q=[[Q]] if Q is not None else None,
            R=[[R]] if R is not None else None,
        ),
        scheduler=scheduler,
        seed=seed,
        episodes=episodes,
    )


def control_config(A=1.0, B=1.0, Q=1.0, R=1.0, **kwargs):
    return scalar_config(A=A, B=B, Q=Q, R=R, mode=Mode.CONTROL, **kwargs)


@pytest.fixture
def make_scalar():
    return scalar_config


@pytest.fixture
def make_control():
    return control_config


@pytest.fixture
def settings():
    return Settings()


@pytest.fixture
def bursty_chain():
    return MarkovLambda(states=[0.1, 0.9], transition=[[0.9, 0.1], [0.2, 0.8]], initial=[1.0, 0.0])
