"""Prometheus metrics for training runs."""
import logging
from pathlib import Path
from typing import Union

import psutil
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

from arsam.optimizers import StepOutcome

logger = logging.getLogger(__name__)


class RunMetrics:
    """One registry per run, so concurrent or repeated runs never share series."""

    def __init__(self, variant: str):
        self.variant = variant
        self.registry = CollectorRegistry()

        self.steps_total = Counter(
            'arsam_steps_total',
            'Optimizer steps taken',
            ['variant', 'mode'],
            registry=self.registry
        )
        self.grad_evals_total = Counter(
            'arsam_gradient_evaluations_total',
            'Forward and backward passes through the objective',
            ['variant'],
            registry=self.registry
        )
        self.step_latency = Histogram(
            'arsam_step_duration_seconds',
            'Optimizer step latency in seconds',
            ['variant', 'mode'],
            buckets=(1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 0.01, 0.05, 0.1, 0.5, 1.0),
            registry=self.registry
        )
        self.sampling_probability = Gauge(
            'arsam_sampling_probability',
            'PSF sampling probability in effect',
            ['variant'],
            registry=self.registry
        )
        self.loss = Gauge(
            'arsam_loss',
            'Mini-batch loss of the latest step',
            ['variant'],
            registry=self.registry
        )
        self.memory_usage = Gauge(
            'arsam_memory_usage_bytes',
            'Resident memory of the training process in bytes',
            registry=self.registry
        )
        self.memory_percent = Gauge(
            'arsam_memory_usage_percent',
            'System memory usage percentage',
            registry=self.registry
        )

    def record_step(self, outcome: StepOutcome, seconds: float):
        mode = outcome.mode.value
        self.steps_total.labels(variant=self.variant, mode=mode).inc()
        self.grad_evals_total.labels(variant=self.variant).inc(outcome.grad_evals)
        self.step_latency.labels(variant=self.variant, mode=mode).observe(seconds)
        self.sampling_probability.labels(variant=self.variant).set(outcome.p)
        self.loss.labels(variant=self.variant).set(outcome.loss)

    def update_system_metrics(self):
        """Update process and system memory gauges."""
        try:
            self.memory_usage.set(psutil.Process().memory_info().rss)
            self.memory_percent.set(psutil.virtual_memory().percent)
        except Exception as e:
            logger.warning("Error updating system metrics: %s", e)

    def write(self, path: Union[str, Path]) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.update_system_metrics()
        write_to_textfile(str(path), self.registry)
        return str(path)
