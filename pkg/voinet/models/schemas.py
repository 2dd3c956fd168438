from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing import List, Optional, Union
from enum import Enum

Matrix = List[List[float]]
MatrixSeries = Union[Matrix, List[Matrix]]
ScalarSeries = Union[float, List[float]]


class Mode(str, Enum):
    ESTIMATION = "estimation"
    CONTROL = "control"


class SchedulerKind(str, Enum):
    VOI = "voi"
    VOI_DP = "voi-dp"
    VOI_ROLLOUT = "voi-rollout"
    PERIODIC = "periodic"
    RANDOM = "random"
    ALWAYS = "always"
    NEVER = "never"
    THRESHOLD = "threshold"


class SchedulerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: SchedulerKind = Field(default=SchedulerKind.VOI, description="Transmission policy family")
    period: int = Field(default=1, description="Period of the periodic policy, in slots")
    phase: int = Field(default=0, description="Phase of the periodic policy")
    rate: float = Field(default=0.5, description="Transmission probability of the random policy")
    threshold: float = Field(default=0.0, description="Weighted-mismatch threshold of the threshold policy")

    @classmethod
    def parse(cls, text: str) -> "SchedulerSpec":
        """Parse selectors such as ``voi-dp``, ``periodic:21``, ``periodic:21:3``, ``random:0.2``."""
        head, _, rest = text.strip().partition(":")
        kind = SchedulerKind(head.strip().lower())
        args = [a for a in rest.split(":") if a] if rest else []
        if kind == SchedulerKind.PERIODIC:
            if not args:
                raise ValueError("periodic selector needs a period, e.g. periodic:21")
            phase = int(args[1]) if len(args) > 1 else 0
            return cls(kind=kind, period=int(args[0]), phase=phase)
        if kind == SchedulerKind.RANDOM:
            return cls(kind=kind, rate=float(args[0]) if args else 0.5)
        if kind == SchedulerKind.THRESHOLD:
            if not args:
                raise ValueError("threshold selector needs a level, e.g. threshold:0.5")
            return cls(kind=kind, threshold=float(args[0]))
        if args:
            raise ValueError(f"selector '{kind.value}' takes no parameters")
        return cls(kind=kind)

    @property
    def label(self) -> str:
        if self.kind == SchedulerKind.PERIODIC:
            return f"periodic:{self.period}" + (f":{self.phase}" if self.phase else "")
        if self.kind == SchedulerKind.RANDOM:
            return f"random:{self.rate:g}"
        if self.kind == SchedulerKind.THRESHOLD:
            return f"threshold:{self.threshold:g}"
        return self.kind.value


class SourceModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    horizon: int = Field(..., description="Horizon T; slots are 0..T")
    A: MatrixSeries = Field(..., description="State matrix, constant or one per slot")
    B: Optional[MatrixSeries] = Field(default=None, description="Input matrix (control mode only)")
    C: MatrixSeries = Field(..., description="Output matrix")
    W: MatrixSeries = Field(..., description="Process-noise covariance")
    V: MatrixSeries = Field(..., description="Measurement-noise covariance")
    m0: List[float] = Field(..., description="Mean of the initial state")
    M0: Matrix = Field(..., description="Covariance of the initial state")


class MarkovLambda(BaseModel):
    model_config = ConfigDict(frozen=True)

    states: List[float] = Field(..., description="Loss probability attached to each chain state")
    transition: Matrix = Field(..., description="Row-stochastic transition matrix")
    initial: List[float] = Field(..., description="Distribution of the chain state at slot 0")

    @classmethod
    def gilbert_elliott(cls, good_loss: float, bad_loss: float, p_gb: float, p_bg: float) -> "MarkovLambda":
        """Two-state bursty-loss chain started from its stationary distribution."""
        total = p_gb + p_bg
        pi_good = p_bg / total if total > 0 else 1.0
        return cls(
            states=[good_loss, bad_loss],
            transition=[[1.0 - p_gb, p_gb], [p_bg, 1.0 - p_bg]],
            initial=[pi_good, 1.0 - pi_good],
        )


class ChannelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    delay: int = Field(..., description="Fixed delivery delay d in slots")
    loss: Optional[ScalarSeries] = Field(default=None, description="Fixed loss probability sequence")
    chain: Optional[MarkovLambda] = Field(default=None, description="Markov-modulated loss probability")


class CostSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    theta: ScalarSeries = Field(default=0.0, description="Communication price per transmission")
    Lambda: Optional[MatrixSeries] = Field(default=None, description="Estimation weight (estimation mode)")
    Q: Optional[MatrixSeries] = Field(default=None, description="State weight, slots 0..T+1 (control mode)")
    R: Optional[MatrixSeries] = Field(default=None, description="Input weight (control mode)")


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field(default="scenario", description="Scenario label used in reports")
    mode: Mode = Field(default=Mode.ESTIMATION, description="Estimation or control")
    source: SourceModel
    channel: ChannelSpec
    cost: CostSpec
    scheduler: SchedulerSpec = Field(default_factory=SchedulerSpec, description="Transmission policy")
    seed: int = Field(default=0, description="Base seed; episode i uses seed + i")
    episodes: int = Field(default=1, description="Episode count for batch runs")

    @field_validator("scheduler", mode="before")
    @classmethod
    def _parse_selector(cls, value):
        if isinstance(value, str):
            return SchedulerSpec.parse(value)
        return value


class EpisodeSummary(BaseModel):
    seed: int
    policy: str
    phi: float = Field(..., description="Realized Φ (estimation) or Φ evaluated with Λ = Γ (control)")
    phi_prime: Optional[float] = Field(default=None, description="Realized Φ′ (control mode)")
    psi: Optional[float] = Field(default=None, description="Realized Ψ (control mode)")
    mse_total: float = Field(..., description="Σ ê(k)ᵀΛ(k)ê(k)")
    sends: int
    losses: int
    voi_evaluations: int = 0
    clamped_evaluations: int = 0
    clamp_flagged: bool = Field(default=False, description="More than 1% of VoI evaluations were clamped")


class PolicySummary(BaseModel):
    policy: str
    episodes: int
    mean_loss: float
    stderr_loss: float
    mean_mse: float
    mean_sends: float
    mean_losses: float
    loss_fraction: Optional[float] = Field(default=None, description="Lost sends over all sends")
    clamp_flagged_episodes: int = 0


class PairedComparison(BaseModel):
    first: str
    second: str
    mean_difference: float = Field(..., description="Mean of loss(first) - loss(second) over common seeds")
    stderr: float
    ci_low: float
    ci_high: float
    confidence: float = 0.95
    first_better: bool = Field(..., description="Upper confidence bound below zero")


class AggregateReport(BaseModel):
    scenario: str
    mode: Mode
    loss: str = Field(..., description="Name of the compared loss: phi or phi_prime")
    episodes: int
    seeds: List[int]
    policies: List[PolicySummary]
    comparisons: List[PairedComparison] = Field(default_factory=list)
