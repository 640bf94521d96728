"""
SGD, SAM, SAM-k, ARSAM and ARSAM-A over a GradientOracle.

SAM-mode steps take two gradient evaluations on the same batch and
refresh the cached PSF (g_sam - g_sgd). ARSAM decides per iteration,
before touching the oracle, whether to pay for a SAM step, reuse the
cached PSF on top of a fresh SGD gradient, or take a plain SGD step.
"""
import enum
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Literal, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from arsam.exceptions import InvalidInputError, NumericError
from arsam.objectives import GradientOracle
from arsam.params import ParamVector, l2_norm, linear_combine, selected_norm
from arsam.scheduler import (
    IndicatorTracker,
    ScheduleConfig,
    SegmentSchedule,
    sample_decision,
    segment_update,
)

logger = logging.getLogger(__name__)

GRAD_NORM_FLOOR = 1e-12

Variant = Literal["sgd", "sam", "sam_k", "arsam", "arsam_a"]
SAM_FAMILY = ("sam", "sam_k", "arsam", "arsam_a")
ADAPTIVE = ("arsam", "arsam_a")


class OptimizerConfig(BaseModel):
    """Optimizer hyperparameters shared by every variant.

    ``reuse_window=None`` reuses the cached PSF for any lag; ``norm_last_k``
    restricts the norms fed to the scheduler to the last k layout segments.
    """

    model_config = ConfigDict(extra="forbid")

    variant: Variant = "arsam"
    k: int = Field(default=2, ge=1, description="SAM period for sam_k")
    eta: float = Field(default=0.05, ge=0)
    lr_schedule: Literal["constant", "cosine"] = "constant"
    eta_min: float = Field(default=0.0, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0, ge=0)
    rho: float = Field(default=0.05, ge=0)
    reuse_window: Optional[int] = Field(default=None, ge=0)
    norm_last_k: Optional[int] = Field(default=None, ge=1)
    perturb_with_weight_decay: bool = False

    @model_validator(mode="after")
    def _check_rho(self):
        if self.variant in SAM_FAMILY and self.rho == 0:
            logger.warning("rho=0 with variant %s: SAM steps reduce to SGD", self.variant)
        return self


class StepMode(str, enum.Enum):
    SAM = "SAM"
    REUSE = "REUSE"
    SGD_ONLY = "SGD_ONLY"


@dataclass(frozen=True)
class PSFCache:
    """Most recent PSF and the iteration that computed it."""
    psf: Optional[ParamVector] = None
    origin_iteration: Optional[int] = None

    @property
    def is_empty(self) -> bool:
        return self.psf is None

    def lag(self, iteration: int) -> int:
        return iteration - self.origin_iteration


@dataclass(frozen=True)
class MomentumState:
    momentum: float = 0.0
    velocity: Optional[ParamVector] = None


@dataclass(frozen=True)
class StepOutcome:
    """What one optimizer step did, with the schedule values it ran under."""
    iteration: int
    mode: StepMode
    loss: float
    norm_sgd: float
    norm_psf: Optional[float]
    grad_evals: int
    eta: float
    s: float
    p: float
    c: Optional[float] = None
    r: Optional[float] = None
    r_hat: Optional[float] = None

    def __post_init__(self):
        if (self.mode is StepMode.SAM) != (self.grad_evals == 2):
            raise ValueError("SAM mode and two gradient evaluations must coincide")
        if (self.norm_psf is not None) != (self.mode in (StepMode.SAM, StepMode.REUSE)):
            raise ValueError("norm_psf is reported exactly for SAM and REUSE steps")


@dataclass(frozen=True)
class LearningRateSchedule:
    """Constant or cosine-decayed step size over ``total_iterations``."""
    eta: float
    kind: str = "constant"
    total_iterations: int = 1
    eta_min: float = 0.0

    def at(self, iteration: int) -> float:
        if self.kind == "constant":
            return self.eta
        progress = min(max(iteration - 1, 0) / max(self.total_iterations, 1), 1.0)
        return self.eta_min + 0.5 * (self.eta - self.eta_min) * (1.0 + math.cos(math.pi * progress))

    @classmethod
    def from_config(cls, config: OptimizerConfig, total_iterations: int) -> "LearningRateSchedule":
        return cls(
            eta=config.eta,
            kind=config.lr_schedule,
            total_iterations=total_iterations,
            eta_min=config.eta_min,
        )


def perturbation(g: ParamVector, rho: float) -> ParamVector:
    """epsilon = rho * g / ||g||, or zero when ||g|| is at or below the floor."""
    if rho < 0:
        raise InvalidInputError(f"rho must be >= 0, got {rho}")
    norm = l2_norm(g)
    if norm <= GRAD_NORM_FLOOR:
        return g.zeros_like()
    return ParamVector.wrap(g.values * (rho / norm), g.layout)


class SamGradients(NamedTuple):
    g_sgd: ParamVector
    g_sam: ParamVector
    loss: float


def sam_gradient(
    oracle: GradientOracle,
    w: ParamVector,
    batch,
    rho: float,
    weight_decay: float = 0.0,
) -> SamGradients:
    """
    Gradient at w and at the ascent point w + epsilon, on the same batch.

    ``weight_decay`` adds 2*lambda*w to the gradient that defines epsilon;
    the returned g_sgd never includes it.
    """
    loss, g_sgd = oracle.loss_and_gradient(w, batch)
    ascent = g_sgd if not weight_decay else linear_combine(1.0, g_sgd, 2.0 * weight_decay, w)
    if not ascent.is_finite():
        raise NumericError("non-finite gradient")
    eps = perturbation(ascent, rho)
    g_sam = oracle.gradient(linear_combine(1.0, w, 1.0, eps), batch)
    return SamGradients(g_sgd=g_sgd, g_sam=g_sam, loss=loss)


def psf_extract(g_sam: ParamVector, g_sgd: ParamVector) -> ParamVector:
    return linear_combine(1.0, g_sam, -1.0, g_sgd)


def exact_psf_quadratic(hessian: np.ndarray, g: ParamVector, rho: float) -> ParamVector:
    """rho * H g / ||g||, the closed-form PSF of a quadratic."""
    norm = l2_norm(g)
    if norm == 0.0:
        raise InvalidInputError("exact PSF is undefined at a zero gradient")
    return ParamVector.wrap(rho * (np.asarray(hessian) @ g.values) / norm, g.layout)


def apply_update(
    w: ParamVector,
    direction: ParamVector,
    eta: float,
    state: MomentumState,
    weight_decay: float = 0.0,
) -> Tuple[ParamVector, MomentumState]:
    """velocity <- momentum * velocity + (direction + 2*lambda*w); w <- w - eta * velocity."""
    step = direction if not weight_decay else linear_combine(1.0, direction, 2.0 * weight_decay, w)
    if state.velocity is not None and state.momentum:
        velocity = linear_combine(state.momentum, state.velocity, 1.0, step)
    else:
        velocity = step
    return linear_combine(1.0, w, -eta, velocity), replace(state, velocity=velocity)


class OptimizerEngine:
    """
    One optimizer run: parameters, momentum, PSF cache, indicator tracker
    and (for ARSAM variants) the segment schedule.

    ``step`` is transactional: if the oracle raises, or the update turns
    non-finite, every piece of state including the sampler stream is left
    as it was before the call.
    """

    def __init__(
        self,
        config: OptimizerConfig,
        oracle: GradientOracle,
        w0: ParamVector,
        schedule_config: Optional[ScheduleConfig] = None,
        sampler_seed=None,
        lr_schedule: Optional[LearningRateSchedule] = None,
    ):
        self.config = config
        self.oracle = oracle
        self.schedule_config = schedule_config or ScheduleConfig()
        self.lr_schedule = lr_schedule or LearningRateSchedule(eta=config.eta)
        self.w = w0
        self.momentum = MomentumState(momentum=config.momentum)
        self.cache = PSFCache()
        self.iteration = 0
        self.grad_evals_total = 0
        self.mode_counts: Dict[str, int] = {mode.value: 0 for mode in StepMode}

        self.schedule: Optional[SegmentSchedule] = None
        if config.variant in ADAPTIVE:
            self.schedule = SegmentSchedule.from_config(self.schedule_config, sampler_seed)
        self.tracker: Optional[IndicatorTracker] = None
        if config.variant in SAM_FAMILY:
            sc = self.schedule_config
            self.tracker = IndicatorTracker(beta=sc.beta, r_clip=(sc.r_clip_low, sc.r_clip_high))

    def current_s_p(self) -> Tuple[float, float]:
        """Budget and probability in effect; fixed values for non-adaptive variants."""
        if self.schedule is not None:
            return self.schedule.s, self.schedule.p
        m = float(self.schedule_config.segment_length)
        variant = self.config.variant
        if variant == "sgd":
            return 0.0, 0.0
        if variant == "sam":
            return m, 1.0
        return m / self.config.k, 1.0 / self.config.k

    def _choose_mode(self, i: int) -> StepMode:
        variant = self.config.variant
        if variant == "sgd":
            return StepMode.SGD_ONLY
        if variant == "sam":
            return StepMode.SAM
        if variant == "sam_k":
            return StepMode.SAM if i % self.config.k == 0 else StepMode.SGD_ONLY

        if i <= self.schedule.warmup or sample_decision(self.schedule):
            return StepMode.SAM
        window = self.config.reuse_window
        if (
            variant == "arsam"
            and not self.cache.is_empty
            and (window is None or self.cache.lag(i) <= window)
        ):
            return StepMode.REUSE
        return StepMode.SGD_ONLY

    def _norm(self, v: ParamVector) -> float:
        return selected_norm(v, self.config.norm_last_k)

    def step(self, batch=None) -> StepOutcome:
        i = self.iteration + 1
        schedule_snapshot = self.schedule.snapshot() if self.schedule else None
        tracker_snapshot = self.tracker.snapshot() if self.tracker else None
        try:
            outcome, w, momentum, cache = self._step(i, batch)
        except NumericError as e:
            self._rollback(schedule_snapshot, tracker_snapshot)
            raise e.with_iteration(i)
        except Exception:
            self._rollback(schedule_snapshot, tracker_snapshot)
            raise

        self.w, self.momentum, self.cache = w, momentum, cache
        self.iteration = i
        self.grad_evals_total += outcome.grad_evals
        self.mode_counts[outcome.mode.value] += 1
        return outcome

    def _rollback(self, schedule_snapshot, tracker_snapshot):
        if schedule_snapshot is not None:
            self.schedule.restore(schedule_snapshot)
        if tracker_snapshot is not None:
            self.tracker.restore(tracker_snapshot)

    def _step(self, i: int, batch):
        config = self.config
        s, p = self.current_s_p()
        mode = self._choose_mode(i)
        cache = self.cache
        observation = None
        perturb_decay = config.weight_decay if config.perturb_with_weight_decay else 0.0

        if mode is StepMode.SAM:
            loss, g_sgd, g_sam = self._sam_pass(batch, perturb_decay)
            psf = psf_extract(g_sam, g_sgd)
            direction = g_sam
            cache = PSFCache(psf=psf, origin_iteration=i)
            grad_evals = 2
        else:
            loss, g_sgd = self.oracle.loss_and_gradient(self.w, batch)
            psf = cache.psf if mode is StepMode.REUSE else None
            direction = g_sgd if psf is None else linear_combine(1.0, g_sgd, 1.0, psf)
            grad_evals = 1

        if not (math.isfinite(loss) and g_sgd.is_finite() and direction.is_finite()):
            raise NumericError("non-finite loss or gradient")
        norm_sgd = self._norm(g_sgd)
        norm_psf = self._norm(psf) if psf is not None else None
        if mode is StepMode.SAM and self.tracker is not None:
            observation = self.tracker.observe(norm_psf, norm_sgd)

        eta = self.lr_schedule.at(i)
        w, momentum = apply_update(self.w, direction, eta, self.momentum, config.weight_decay)
        if not w.is_finite():
            raise NumericError("parameters became non-finite")

        if self.schedule is not None and self.schedule.is_boundary(i):
            segment_update(self.schedule, self.tracker.r_hat)
            logger.debug("Segment update at %d: s=%.4f p=%.4f", i, self.schedule.s, self.schedule.p)

        outcome = StepOutcome(
            iteration=i,
            mode=mode,
            loss=float(loss),
            norm_sgd=norm_sgd,
            norm_psf=norm_psf,
            grad_evals=grad_evals,
            eta=eta,
            s=s,
            p=p,
            c=observation.c if observation else None,
            r=observation.r if observation else None,
            r_hat=observation.r_hat if observation else None,
        )
        return outcome, w, momentum, cache

    def _sam_pass(self, batch, perturb_decay: float):
        grads = sam_gradient(self.oracle, self.w, batch, self.config.rho, perturb_decay)
        return grads.loss, grads.g_sgd, grads.g_sam
