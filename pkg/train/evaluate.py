"""
Run evaluation: accuracy, %SAM and throughput (AIS).
"""
import logging
from typing import Iterable, Union

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score

from arsam.autodiff import MLPSpec, forward_logits
from arsam.datasets import Dataset
from arsam.exceptions import InvalidInputError
from arsam.params import ParamVector

logger = logging.getLogger(__name__)


def predict(model, w: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lower class id."""
    if isinstance(model, MLPSpec):
        logits = forward_logits(model, w, inputs)
    else:
        logits = model.logits(w, inputs)
    return np.argmax(logits, axis=1)


def evaluate_accuracy(model: Union[MLPSpec, object], w: ParamVector, dataset: Dataset) -> float:
    """
    Percentage of rows whose argmax prediction equals the label.

    Args:
        model: An MLPSpec, or any oracle exposing ``logits(w, inputs)``
        w: Trained parameters
        dataset: Labelled rows to score

    Returns:
        Accuracy in percent
    """
    if len(dataset) == 0:
        raise InvalidInputError("cannot evaluate accuracy on an empty dataset")
    predictions = predict(model, w, dataset.inputs)
    return 100.0 * float(accuracy_score(dataset.labels, predictions))


def compute_ais(images_per_epoch: float, epochs: float, seconds: float) -> float:
    """Average images per second, D * E / T."""
    if seconds <= 0:
        raise InvalidInputError(f"elapsed time must be positive, got {seconds}")
    return images_per_epoch * epochs / seconds


def _mode(record) -> str:
    mode = getattr(record, "mode", record)
    return getattr(mode, "value", mode)


def compute_pct_sam(telemetry: Iterable) -> float:
    """Percentage of telemetry records (or modes) that were SAM-mode steps."""
    if isinstance(telemetry, pd.DataFrame):
        telemetry = telemetry["mode"].tolist()
    modes = [_mode(r) for r in telemetry]
    if not modes:
        raise InvalidInputError("telemetry is empty")
    return 100.0 * sum(m == "SAM" for m in modes) / len(modes)
