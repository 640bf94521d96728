"""
MLflow experiment tracking for training runs.
"""
import logging
import os
from pathlib import Path
from typing import Iterable, Optional

import mlflow

from train.config import TrackingConfig, flatten

logger = logging.getLogger(__name__)

# mlflow rejects param values longer than this
_MAX_PARAM_LENGTH = 500


def configure_tracking(config: TrackingConfig) -> str:
    """
    Point mlflow at the configured store and select the experiment.

    MLFLOW_TRACKING_URI wins over the config file; with neither set mlflow
    keeps its current URI.

    Returns:
        The tracking URI in use
    """
    uri = os.getenv("MLFLOW_TRACKING_URI") or config.tracking_uri
    if uri:
        mlflow.set_tracking_uri(uri)
    mlflow.set_experiment(config.experiment_name)
    return mlflow.get_tracking_uri()


def _loggable_params(config_echo: dict) -> dict:
    params = {}
    for key, value in flatten(config_echo).items():
        text = "" if value is None else str(value)
        params[key] = text[:_MAX_PARAM_LENGTH]
    return params


def log_run(
    config: TrackingConfig,
    config_echo: dict,
    metrics: dict,
    artifacts: Iterable[Optional[str]] = (),
    run_name: Optional[str] = None,
) -> Optional[str]:
    """
    Log one training run: flattened config as params, summary metrics and
    output files as artifacts.

    Args:
        config: Tracking section of the run config
        config_echo: Full validated run config
        metrics: Numeric summary values (None values are skipped)
        artifacts: Paths of files to attach
        run_name: Overrides config.run_name

    Returns:
        The mlflow run id, or None if tracking failed
    """
    try:
        configure_tracking(config)
        with mlflow.start_run(run_name=run_name or config.run_name) as run:
            mlflow.log_params(_loggable_params(config_echo))
            mlflow.log_metrics({k: float(v) for k, v in metrics.items() if v is not None})
            for path in artifacts:
                if path and Path(path).exists():
                    mlflow.log_artifact(str(path))
            logger.info("Logged run %s to %s", run.info.run_id, mlflow.get_tracking_uri())
            return run.info.run_id
    except Exception as e:
        logger.warning("mlflow tracking failed: %s", e)
        return None
