"""
Property checks for the optimizer family.

Each check is deterministic given its seed, and each trial draws from its
own stream derived from (seed, trial index), so results do not depend on
how many worker threads run them.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, computed_field

from arsam.autodiff import MLPOracle, MLPSpec, init_params
from arsam.datasets import make_two_moons
from arsam.exceptions import ArsamError, InvalidInputError
from arsam.objectives import (
    QuadraticOracle,
    QuadraticSpec,
    TwoWellOracle,
    TwoWellSpec,
    finite_difference_gradient,
    logistic_oracle,
)
from arsam.optimizers import (
    OptimizerConfig,
    OptimizerEngine,
    exact_psf_quadratic,
    psf_extract,
    sam_gradient,
)
from arsam.params import ParamVector, l2_norm
from arsam.scheduler import ScheduleConfig, SegmentSchedule, sample_decision, segment_update

logger = logging.getLogger(__name__)


class CheckReport(BaseModel):
    """Outcome of one check. ``worst_margin`` is signed: negative means a violation."""

    name: str
    trials: int
    failures: int
    inconclusive: int = 0
    worst_margin: float
    details: str = ""

    @computed_field(alias="pass")
    @property
    def passed(self) -> bool:
        return self.failures == 0

    @property
    def status(self) -> str:
        if self.failures:
            return "FAIL"
        if self.trials and self.inconclusive >= self.trials:
            return "INCONCLUSIVE"
        return "PASS"

    def line(self) -> str:
        return (
            f"{self.status:<12} {self.name:<22} trials={self.trials} failures={self.failures} "
            f"inconclusive={self.inconclusive} worst_margin={self.worst_margin:.3e}"
        )


def trial_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _map_trials(fn: Callable[[int], object], trials: int, workers: int) -> list:
    if workers <= 1:
        return [fn(t) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(trials)))


def _random_quadratic(rng: np.random.Generator, dim: int, eigenvalues=None, low=0.0, high=10.0):
    if eigenvalues is None:
        eigenvalues = rng.uniform(low, high, size=dim)
    spec = QuadraticSpec(
        eigenvalues=tuple(eigenvalues),
        rotation_seed=int(rng.integers(2 ** 31)),
    )
    return QuadraticOracle(spec)


def verify_decomposition(
    trials: int,
    dim: int,
    rho: Optional[float],
    seed: int,
    tolerance: float = 1e-10,
    eigenvalues: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> CheckReport:
    """
    Differenced PSF (g_sam - g_sgd) against rho*H*g/||g|| on random PSD
    quadratics; the first-order expansion is exact there, so the only
    error is rounding. ``rho=None`` draws rho per trial from [1e-3, 1].
    """
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")

    def run(t: int):
        rng = trial_rng(seed, t)
        oracle = _random_quadratic(rng, dim, eigenvalues)
        trial_rho = rng.uniform(1e-3, 1.0) if rho is None else rho
        w = ParamVector.wrap(rng.standard_normal(dim), oracle.layout())
        grads = sam_gradient(oracle, w, None, trial_rho)
        if l2_norm(grads.g_sgd) == 0.0:
            return None
        measured = psf_extract(grads.g_sam, grads.g_sgd)
        exact = exact_psf_quadratic(oracle.hessian(), grads.g_sgd, trial_rho)
        return float(np.max(np.abs(measured.values - exact.values)))

    errors = _map_trials(run, trials, workers)
    conclusive = [e for e in errors if e is not None]
    worst = max(conclusive, default=0.0)
    return CheckReport(
        name="decomposition",
        trials=trials,
        failures=sum(e > tolerance for e in conclusive),
        inconclusive=trials - len(conclusive),
        worst_margin=tolerance - worst,
        details=f"worst per-coordinate error {worst:.3e} (tolerance {tolerance:g})",
    )


def verify_theorem1(
    trials: int,
    dim: int,
    rho: float,
    seed: int,
    eigenvalues: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> CheckReport:
    """||rho*H*g/||g|| || <= rho * trace(H) for positive spectra."""

    def run(t: int):
        rng = trial_rng(seed, t)
        oracle = _random_quadratic(rng, dim, eigenvalues, low=1e-2, high=10.0)
        g = ParamVector.wrap(rng.standard_normal(dim), oracle.layout())
        norm_psf = l2_norm(exact_psf_quadratic(oracle.hessian(), g, rho))
        bound = rho * float(np.sum(oracle.spec.eigenvalues))
        return bound + 1e-10 - norm_psf

    margins = _map_trials(run, trials, workers)
    return CheckReport(
        name="theorem1_bound",
        trials=trials,
        failures=sum(m < 0 for m in margins),
        worst_margin=min(margins),
        details="margin = rho*sum(eigenvalues) + 1e-10 - ||PSF||",
    )


def _sgd_trajectory(oracle: QuadraticOracle, w0: ParamVector, eta: float, steps: int):
    engine = OptimizerEngine(OptimizerConfig(variant="sgd", eta=eta, momentum=0.0), oracle, w0)
    trajectory = [w0]
    for _ in range(steps):
        engine.step()
        trajectory.append(engine.w)
    return trajectory


def verify_reuse_error(
    spec: QuadraticSpec,
    eta: float,
    lags: Sequence[int],
    seeds: Union[int, Sequence[int]],
    rho: float = 0.05,
    checkpoints: Sequence[int] = (0, 5, 10, 15, 20),
    lag_slack: float = 0.10,
    eta_slack: float = 0.05,
) -> CheckReport:
    """
    Distance between the PSF at w_t and at w_{t+n} along SGD trajectories,
    averaged over seeds and checkpoints per lag n. Asserts the mean error
    grows with n (within ``lag_slack``) and does not grow when eta is
    halved (within ``eta_slack``). Divergent or zero-gradient seeds are
    counted as inconclusive.
    """
    lags = [int(n) for n in lags]
    if not lags or min(lags) < 0 or any(b <= a for a, b in zip(lags, lags[1:])):
        raise InvalidInputError("lags must be non-negative and strictly increasing")
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    oracle = QuadraticOracle(spec)
    hessian = oracle.hessian()
    horizon = max(checkpoints) + max(lags)

    def psf_at(w: ParamVector) -> ParamVector:
        return exact_psf_quadratic(hessian, oracle.gradient(w), rho)

    def lag_errors(step_size: float, w0: ParamVector) -> np.ndarray:
        trajectory = _sgd_trajectory(oracle, w0, step_size, horizon)
        psfs = [psf_at(w).values for w in trajectory]
        return np.array([
            np.mean([np.linalg.norm(psfs[t] - psfs[t + n]) for t in checkpoints])
            for n in lags
        ])

    full, halved = [], []
    inconclusive = 0
    for s in seeds:
        rng = np.random.default_rng(s)
        w0 = ParamVector.wrap(rng.standard_normal(spec.dimension), oracle.layout())
        try:
            errors = lag_errors(eta, w0), lag_errors(eta / 2.0, w0)
        except ArsamError as e:
            logger.warning("reuse-error seed %s inconclusive: %s", s, e)
            inconclusive += 1
            continue
        full.append(errors[0])
        halved.append(errors[1])

    if not full:
        return CheckReport(
            name="reuse_error", trials=len(seeds), failures=0,
            inconclusive=inconclusive, worst_margin=0.0,
            details="every seed diverged or started at a stationary point",
        )

    mean_full = np.mean(full, axis=0)
    mean_half = np.mean(halved, axis=0)
    margins = []
    for a, b in zip(mean_full, mean_full[1:]):
        margins.append(b * (1.0 + lag_slack) - a)
    for f, h in zip(mean_full, mean_half):
        margins.append(f * (1.0 + eta_slack) - h)
    return CheckReport(
        name="reuse_error",
        trials=len(margins),
        failures=sum(m < 0 for m in margins),
        inconclusive=inconclusive,
        worst_margin=min(margins),
        details=(
            "mean error per lag " + ", ".join(f"{n}:{e:.3e}" for n, e in zip(lags, mean_full))
            + "; halved eta " + ", ".join(f"{n}:{e:.3e}" for n, e in zip(lags, mean_half))
        ),
    )


def perturbed_loss_grid(oracle: TwoWellOracle, rho: float, step: float = 1e-3, domain=(-5.0, 5.0)):
    """max over |eps| <= rho of L(w + eps) for every w on a uniform grid."""
    half = int(round(rho / step))
    grid = domain[0] + step * np.arange(int(round((domain[1] - domain[0]) / step)) + 1)
    extended = domain[0] - half * step + step * np.arange(grid.shape[0] + 2 * half)
    losses = oracle.loss_values(extended)
    return grid, sliding_window_view(losses, 2 * half + 1).max(axis=1)


def grid_descent(values: np.ndarray) -> np.ndarray:
    """Index of the local minimum reached by discrete steepest descent from each grid point."""
    n = values.shape[0]
    idx = np.arange(n)
    left = np.maximum(idx - 1, 0)
    right = np.minimum(idx + 1, n - 1)
    candidates = np.stack([idx, left, right])
    nxt = candidates[np.argmin(values[candidates], axis=0), idx]
    while True:
        jumped = nxt[nxt]
        if np.array_equal(jumped, nxt):
            return nxt
        nxt = jumped


def _classify(oracle: TwoWellOracle, x: float) -> str:
    if oracle.in_flat_basin(x):
        return "flat"
    if oracle.in_sharp_basin(x):
        return "sharp"
    return "unconverged"


def verify_flat_basin(
    spec: TwoWellSpec,
    rho: float,
    variants: Iterable[str] = ("sgd", "sam", "arsam"),
    seed: int = 0,
    n_inits: int = 200,
    eta: float = 0.01,
    iterations: int = 1000,
    alpha: float = 0.4,
    segment_length: int = 50,
    min_agreement: float = 0.95,
) -> CheckReport:
    """
    Basin reached by each variant from initial points spread over the
    sharp and flat basin cores, compared with discrete descent on the
    brute-force perturbed loss. A SAM-family variant fails an init when
    the brute force ends flat and the variant ends sharp. ARSAM variants
    must also agree with SAM on at least ``min_agreement`` of the inits.
    SGD must end sharp from at least one init, or the fixture does not
    separate the methods.
    """
    oracle = TwoWellOracle(spec)
    variants = list(variants)
    grid, perturbed = perturbed_loss_grid(oracle, rho)
    certified = oracle.in_flat_basin(float(grid[np.argmin(perturbed)]))
    destinations = grid[grid_descent(perturbed)]

    n_sharp = n_inits // 2
    inits = np.concatenate([
        np.linspace(spec.sharp_center - spec.sharp_width, spec.sharp_center + spec.sharp_width, n_sharp),
        np.linspace(spec.flat_center - 2 * spec.flat_width, spec.flat_center + 2 * spec.flat_width,
                    n_inits - n_sharp),
    ])
    brute = [_classify(oracle, destinations[np.argmin(np.abs(grid - x))]) for x in inits]

    schedule = ScheduleConfig(segment_length=segment_length, alpha=alpha)
    outcomes: Dict[str, List[str]] = {}
    for variant in variants:
        config = OptimizerConfig(variant=variant, eta=eta, momentum=0.0, rho=rho)
        finals = []
        for j, x0 in enumerate(inits):
            w0 = ParamVector([x0], oracle.layout())
            engine = OptimizerEngine(config, oracle, w0, schedule, sampler_seed=[seed, j])
            try:
                for _ in range(iterations):
                    engine.step()
                finals.append(_classify(oracle, float(engine.w.values[0])))
            except ArsamError:
                finals.append("unconverged")
        outcomes[variant] = finals

    failures = 0
    unconverged = 0
    counts = []
    for variant, finals in outcomes.items():
        unconverged += finals.count("unconverged")
        counts.append(f"{variant}: flat={finals.count('flat')} sharp={finals.count('sharp')} "
                      f"unconverged={finals.count('unconverged')}")
        if variant == "sgd":
            if "sharp" not in finals:
                counts.append("sgd never ended sharp")
                failures += 1
            continue
        failures += sum(b == "flat" and f == "sharp" for b, f in zip(brute, finals))

    worst_margin = 1.0
    if "sam" in outcomes:
        for variant in ("arsam", "arsam_a"):
            if variant not in outcomes:
                continue
            agreement = np.mean([a == b for a, b in zip(outcomes[variant], outcomes["sam"])])
            worst_margin = min(worst_margin, float(agreement) - min_agreement)
            counts.append(f"{variant} agrees with sam on {agreement:.1%}")
            if agreement < min_agreement:
                failures += 1

    brute_counts = f"brute force: flat={brute.count('flat')} sharp={brute.count('sharp')}"
    if not certified:
        logger.warning("perturbed-loss argmin is not in the flat basin at rho=%g", rho)
    return CheckReport(
        name="flat_basin",
        trials=n_inits * len(variants),
        failures=failures,
        inconclusive=unconverged,
        worst_margin=worst_margin,
        details=f"certified={certified}; {brute_counts}; " + "; ".join(counts),
    )


def verify_scheduler_stats(p_fixed: float, draws: int, seed: int) -> CheckReport:
    """Empirical Bernoulli frequency within 3 binomial standard deviations of p."""
    schedule = SegmentSchedule(
        segment_length=1, alpha=1.0, s=1.0, p=p_fixed, warmup=0,
        s_min=0.0, s_max=1.0, rng=np.random.default_rng(seed), fixed_p=p_fixed,
    )
    hits = sum(sample_decision(schedule) for _ in range(draws))
    freq = hits / draws
    bound = 3.0 * np.sqrt(p_fixed * (1.0 - p_fixed) / draws)
    margin = float(bound - abs(freq - p_fixed))
    return CheckReport(
        name=f"scheduler_p={p_fixed:g}",
        trials=draws,
        failures=int(margin < 0),
        worst_margin=margin,
        details=f"frequency {freq:.5f}, bound {bound:.5f}",
    )


def verify_segment_clamps(trials: int, seed: int, segment_length: int = 50) -> CheckReport:
    """Fuzzed r_hat in [-1e6, 1e6]: s stays in [s_min, s_max], p in [0, 1],
    and a larger r_hat never yields a smaller s."""
    rng = np.random.default_rng(seed)
    failures = 0
    worst = np.inf
    for _ in range(trials):
        magnitude = 10.0 ** rng.uniform(-6, 6)
        r_a, r_b = np.sort(rng.choice([-1.0, 1.0], size=2) * magnitude * rng.uniform(0, 1, size=2))
        alpha = rng.uniform(1e-3, 1.0)
        s0 = rng.uniform(1.0, segment_length)
        results = []
        for r_hat in (r_a, r_b):
            schedule = SegmentSchedule(
                segment_length=segment_length, alpha=alpha, s=s0, p=s0 / segment_length,
                warmup=0, s_min=1.0, s_max=float(segment_length), rng=np.random.default_rng(0),
            )
            segment_update(schedule, r_hat)
            results.append(schedule)
            margin = min(schedule.s - schedule.s_min, schedule.s_max - schedule.s,
                         schedule.p, 1.0 - schedule.p)
            worst = min(worst, margin)
            failures += int(margin < 0)
        failures += int(results[1].s < results[0].s)
    return CheckReport(
        name="segment_clamps",
        trials=trials,
        failures=failures,
        worst_margin=float(worst),
        details="margin = distance of s and p to their clamp bounds",
    )


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def verify_gradients(
    points: int = 100,
    seed: int = 0,
    mlp_tolerance: float = 1e-4,
    logistic_tolerance: float = 1e-5,
) -> CheckReport:
    """Central finite differences (step 1e-5) against the analytic gradients
    of a (2,4,2) MLP on 10 samples and a logistic model on 20 samples."""
    worst = np.inf
    failures = 0
    for t in range(points):
        rng = trial_rng(seed, t)
        data = make_two_moons(40, 0.2, seed=int(rng.integers(2 ** 31)))
        mlp_batch = data.take(rng.choice(len(data), size=10, replace=False))
        spec = MLPSpec((2, 4, 2), activation=("relu", "tanh")[t % 2],
                       init_seed=int(rng.integers(2 ** 31)))
        oracle = MLPOracle(spec)
        w = init_params(spec)
        error = _relative_error(oracle.gradient(w, mlp_batch).values,
                                finite_difference_gradient(oracle, w, mlp_batch))
        worst = min(worst, mlp_tolerance - error)
        failures += int(error > mlp_tolerance)

        log_batch = data.take(rng.choice(len(data), size=20, replace=False))
        log_oracle = logistic_oracle(log_batch, l2_lambda=rng.uniform(0.0, 0.1))
        lw = ParamVector.wrap(0.5 * rng.standard_normal(log_oracle.layout().total_length),
                              log_oracle.layout())
        error = _relative_error(log_oracle.gradient(lw).values,
                                finite_difference_gradient(log_oracle, lw))
        worst = min(worst, logistic_tolerance - error)
        failures += int(error > logistic_tolerance)
    return CheckReport(
        name="gradients",
        trials=2 * points,
        failures=failures,
        worst_margin=float(worst),
        details=f"relative tolerance mlp {mlp_tolerance:g}, logistic {logistic_tolerance:g}",
    )


def run_suite(seed: int = 1, quick: bool = False, workers: int = 1) -> List[CheckReport]:
    """Every check at its acceptance size; ``quick`` shrinks trial counts."""
    scale = 10 if quick else 1
    reports = [
        verify_decomposition(1000 // scale, 20, None, seed, workers=workers),
        verify_theorem1(1000 // scale, 20, 0.05, seed, workers=workers),
        verify_reuse_error(QuadraticSpec((1.0, 4.0)), 0.01, [1, 2, 3, 4, 5], 32 // (4 if quick else 1)),
        verify_flat_basin(TwoWellSpec(), 0.3, seed=seed, n_inits=200 // scale,
                          iterations=1000 // (2 if quick else 1)),
    ]
    for p in (0.0, 0.2, 1.0):
        reports.append(verify_scheduler_stats(p, 10000, seed))
    reports.append(verify_segment_clamps(1000 // scale, seed))
    reports.append(verify_gradients(100 // scale, seed))
    for report in reports:
        if report.status == "INCONCLUSIVE":
            logger.warning("check %s was inconclusive: %s", report.name, report.details)
    return reports


def write_report(reports: Sequence[CheckReport], path: Union[str, Path]) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "passed": all(r.passed for r in reports),
        "checks": [r.model_dump(by_alias=True) for r in reports],
    }
    path.write_text(json.dumps(payload, indent=2))
    return str(path)
