"""
Adaptive PSF sampling: indicator, relative change, EMA, autoregressive
segment budget, Bernoulli decisions and the closed-form speedup predictor.

The indicator c = ||PSF|| / ||g_sgd|| is observed only on iterations that
computed both gradients. Its relative change is smoothed by an EMA, and at
every segment boundary the EMA scales the per-segment budget s, which sets
the sampling probability p = s / M for the next M iterations.
"""
import copy
import logging
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from arsam.exceptions import InvalidInputError

logger = logging.getLogger(__name__)

RATIO_FLOOR = 1e-12
R_CLIP = (-0.9, 9.0)


class ScheduleConfig(BaseModel):
    """Sampler parameters. ``warmup`` and ``s_max`` default to the segment length."""

    model_config = ConfigDict(extra="forbid")

    segment_length: int = Field(default=50, ge=1)
    alpha: float = Field(default=0.4, gt=0)
    warmup: Optional[int] = Field(default=None, ge=0)
    s0: float = Field(default=1.0, gt=0)
    beta: float = Field(default=0.9, ge=0, lt=1)
    s_min: float = Field(default=1.0, ge=0)
    s_max: Optional[float] = Field(default=None, gt=0)
    r_clip_low: float = R_CLIP[0]
    r_clip_high: float = R_CLIP[1]
    fixed_p: Optional[float] = Field(default=None, ge=0, le=1)
    gamma: float = Field(default=0.0, ge=0, description="trend coefficient for predict_speedup")

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.resolved_s_max < self.s_min:
            raise ValueError("s_max must be >= s_min")
        if self.r_clip_low >= self.r_clip_high:
            raise ValueError("r_clip_low must be below r_clip_high")
        return self

    @property
    def resolved_warmup(self) -> int:
        return self.segment_length if self.warmup is None else self.warmup

    @property
    def resolved_s_max(self) -> float:
        return float(self.segment_length) if self.s_max is None else self.s_max


@dataclass(frozen=True)
class IndicatorState:
    """Previous indicator, smoothed relative change and EMA weight."""
    c_prev: Optional[float] = None
    r_hat: float = 0.0
    beta: float = 0.9
    samples_seen: int = 0


def indicator(norm_psf: float, norm_sgd: float) -> float:
    """c = ||PSF|| / max(||g_sgd||, 1e-12)."""
    if norm_psf < 0 or norm_sgd < 0:
        raise InvalidInputError("norms must be non-negative")
    return norm_psf / max(norm_sgd, RATIO_FLOOR)


def is_degenerate_ratio(c_prev: float) -> bool:
    return c_prev <= RATIO_FLOOR


def relative_change(c: float, c_prev: float) -> float:
    """(c - c_prev) / c_prev, or 0 when c_prev is at or below the floor."""
    if is_degenerate_ratio(c_prev):
        logger.warning("Relative change undefined for c_prev=%g; using 0", c_prev)
        return 0.0
    return (c - c_prev) / c_prev


def ema_update(state: IndicatorState, r: float) -> IndicatorState:
    """r_hat <- beta * r_hat + (1 - beta) * r, written as a contraction toward r."""
    if not 0.0 <= state.beta < 1.0:
        raise InvalidInputError(f"beta must lie in [0, 1), got {state.beta}")
    r_hat = state.r_hat + (1.0 - state.beta) * (r - state.r_hat)
    return replace(state, r_hat=r_hat)


class Observation(NamedTuple):
    c: float
    r: Optional[float]
    r_hat: float


class IndicatorTracker:
    """Feeds norm pairs through indicator, relative change, clipping and EMA.

    Keeps counters of clipped and degenerate ratios for the run summary.
    """

    def __init__(self, beta: float = 0.9, r_clip=R_CLIP):
        self.state = IndicatorState(beta=beta)
        self.r_clip = tuple(r_clip)
        self.clip_events = 0
        self.degenerate_events = 0
        self.last: Optional[Observation] = None

    @property
    def r_hat(self) -> float:
        return self.state.r_hat

    def observe(self, norm_psf: float, norm_sgd: float) -> Observation:
        c = indicator(norm_psf, norm_sgd)
        state = self.state
        r = None
        if state.c_prev is not None:
            if is_degenerate_ratio(state.c_prev):
                self.degenerate_events += 1
            r = relative_change(c, state.c_prev)
            clipped = float(np.clip(r, *self.r_clip))
            if clipped != r:
                logger.debug("Clipped relative change %g to %g", r, clipped)
                self.clip_events += 1
            r = clipped
            state = ema_update(state, r)
        self.state = replace(state, c_prev=c, samples_seen=state.samples_seen + 1)
        self.last = Observation(c, r, self.state.r_hat)
        return self.last

    def snapshot(self):
        return self.state, self.clip_events, self.degenerate_events, self.last

    def restore(self, snapshot):
        self.state, self.clip_events, self.degenerate_events, self.last = snapshot


@dataclass
class SegmentSchedule:
    """Per-segment budget s and sampling probability p, plus the sampler RNG.

    The RNG is a dedicated stream; nothing else draws from it.
    """
    segment_length: int
    alpha: float
    s: float
    p: float
    warmup: int
    s_min: float
    s_max: float
    rng: np.random.Generator
    fixed_p: Optional[float] = None
    s_trajectory: List[float] = field(default_factory=list)
    p_trajectory: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.segment_length < 1:
            raise InvalidInputError("segment length M must be >= 1")
        if self.fixed_p is not None:
            self.p = float(self.fixed_p)
            self.s = self.p * self.segment_length
        self.s_trajectory = self.s_trajectory or [self.s]
        self.p_trajectory = self.p_trajectory or [self.p]

    @classmethod
    def from_config(cls, config: ScheduleConfig, seed) -> "SegmentSchedule":
        m = config.segment_length
        s = float(np.clip(config.s0, config.s_min, config.resolved_s_max))
        return cls(
            segment_length=m,
            alpha=config.alpha,
            s=s,
            p=float(np.clip(s / m, 0.0, 1.0)),
            warmup=config.resolved_warmup,
            s_min=config.s_min,
            s_max=config.resolved_s_max,
            rng=np.random.default_rng(seed),
            fixed_p=config.fixed_p,
        )

    def is_boundary(self, iteration: int) -> bool:
        """True when a segment update is due after ``iteration`` (1-based)."""
        return iteration > self.warmup and iteration % self.segment_length == 0

    def snapshot(self):
        return (
            self.s,
            self.p,
            copy.deepcopy(self.rng.bit_generator.state),
            len(self.s_trajectory),
        )

    def restore(self, snapshot):
        self.s, self.p, rng_state, n = snapshot
        self.rng.bit_generator.state = rng_state
        del self.s_trajectory[n:]
        del self.p_trajectory[n:]


def segment_update(schedule: SegmentSchedule, r_hat: float) -> SegmentSchedule:
    """s <- clamp(s * (1 + alpha * r_hat), s_min, s_max); p <- clamp(s / M, 0, 1)."""
    if schedule.fixed_p is None:
        s = schedule.s * (1.0 + schedule.alpha * r_hat)
        schedule.s = float(np.clip(s, schedule.s_min, schedule.s_max))
        schedule.p = float(np.clip(schedule.s / schedule.segment_length, 0.0, 1.0))
    schedule.s_trajectory.append(schedule.s)
    schedule.p_trajectory.append(schedule.p)
    return schedule


def sample_decision(schedule: SegmentSchedule) -> bool:
    """One Bernoulli(p) draw from the schedule's own stream."""
    return bool(schedule.rng.random() < schedule.p)


class SpeedupPrediction(NamedTuple):
    s_star: float
    v: float
    budgets: List[float]


def predict_speedup(
    iterations: int,
    segment_length: int,
    s0: float,
    alpha: float,
    gamma: float,
    s_min: float = 1.0,
    s_max: Optional[float] = None,
) -> SpeedupPrediction:
    """
    Expected SAM-step count and speed ratio against SAM when the smoothed
    relative change grows as gamma * i^2.

    Each segment's budget follows s_j = s_{j-1} * (1 + alpha * gamma * (j*M)^2),
    clamped to [s_min, s_max]. A trailing partial segment counts pro rata.

    Returns:
        SpeedupPrediction with s_star = sum of budgets, v = 2I / (I + s_star)
        and the per-segment budgets
    """
    if iterations < 1 or segment_length < 1:
        raise InvalidInputError("iterations and segment length must be >= 1")
    s_max = float(segment_length) if s_max is None else s_max
    full, remainder = divmod(iterations, segment_length)
    n_segments = full + (1 if remainder else 0)

    s = s0
    budgets = []
    s_star = 0.0
    for j in range(1, n_segments + 1):
        s = float(np.clip(s * (1.0 + alpha * gamma * (j * segment_length) ** 2), s_min, s_max))
        budgets.append(s)
        weight = remainder / segment_length if (j > full) else 1.0
        s_star += s * weight
    v = 2.0 * iterations / (iterations + s_star)
    return SpeedupPrediction(s_star=s_star, v=v, budgets=budgets)
