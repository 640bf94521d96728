"""
Synthetic classification datasets: two moons, symmetric label noise, CSV I/O.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from sklearn.datasets import make_moons

from arsam.exceptions import InvalidInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature rows with integer class labels.

    ``noise_rate`` is bookkeeping only: it records the fraction of labels
    that were deliberately corrupted after generation.
    """
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    noise_rate: float = 0.0
    name: str = field(default="dataset", compare=False)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim == 1:
            inputs = inputs.reshape(-1, 1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if inputs.shape[0] != labels.shape[0]:
            raise InvalidInputError(
                f"{inputs.shape[0]} input rows but {labels.shape[0]} labels"
            )
        if self.n_classes < 1:
            raise InvalidInputError("a dataset needs at least one class")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.n_classes})")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise InvalidInputError("noise_rate must lie in [0, 1]")
        inputs.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.inputs.shape[1])

    def take(self, indices) -> "Dataset":
        """Mini-batch made of the given row indices, in the given order."""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            inputs=self.inputs[indices],
            labels=self.labels[indices],
            n_classes=self.n_classes,
            noise_rate=self.noise_rate,
            name=self.name,
        )


def make_two_moons(n: int, noise_std: float, seed: int) -> Dataset:
    """
    Two interleaved half circles with Gaussian jitter.

    The outer moon is the upper unit semicircle, the inner one the lower
    semicircle shifted by (1, 0.5). Classes are balanced to within one
    sample and the result is a pure function of the seed.

    Args:
        n: Number of points (at least 2)
        noise_std: Standard deviation of the Gaussian jitter
        seed: Random seed for reproducibility

    Returns:
        Dataset with two classes
    """
    if n < 2:
        raise InvalidInputError(f"two moons needs n >= 2, got {n}")
    if noise_std < 0:
        raise InvalidInputError(f"noise_std must be >= 0, got {noise_std}")

    X, y = make_moons(n_samples=n, noise=noise_std or None, random_state=seed)
    return Dataset(inputs=X, labels=y, n_classes=2, name="two_moons")


def inject_label_noise(dataset: Dataset, rate: float, seed: int) -> Dataset:
    """
    Symmetric label noise: exactly floor(rate * n) samples, chosen uniformly
    without replacement, get a label drawn uniformly from the other classes.

    Args:
        dataset: Clean dataset
        rate: Fraction of labels to corrupt, in [0, 1]
        seed: Random seed for reproducibility

    Returns:
        New dataset with noise_rate set to ``rate``
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidInputError(f"noise rate must lie in [0, 1], got {rate}")
    n = len(dataset)
    n_flip = min(n, int(math.floor(rate * n + 1e-9)))
    labels = dataset.labels.copy()

    if n_flip and dataset.n_classes > 1:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(n, size=n_flip, replace=False)
        offsets = rng.integers(1, dataset.n_classes, size=n_flip)
        labels[chosen] = (labels[chosen] + offsets) % dataset.n_classes
    elif n_flip:
        logger.warning("single-class dataset: label noise has nothing to flip to")

    logger.debug("Injected label noise: %d of %d labels flipped", n_flip, n)
    return Dataset(
        inputs=dataset.inputs,
        labels=labels,
        n_classes=dataset.n_classes,
        noise_rate=float(rate),
        name=dataset.name,
    )


def save_dataset_csv(dataset: Dataset, path: Union[str, Path]) -> str:
    """Write ``x0,...,x{d-1},label`` rows with 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [f"x{i}" for i in range(dataset.n_features)]
    df = pd.DataFrame(dataset.inputs, columns=columns)
    df["label"] = dataset.labels
    df.to_csv(path, index=False, float_format="%.17g")
    return str(path)


def load_dataset_csv(
    path: Union[str, Path],
    n_classes: Optional[int] = None,
    noise_rate: float = 0.0,
) -> Dataset:
    """Read a dataset written by save_dataset_csv."""
    df = pd.read_csv(path, float_precision="round_trip")
    if "label" not in df.columns:
        raise InvalidInputError(f"{path}: missing 'label' column")
    feature_columns = [c for c in df.columns if c != "label"]
    labels = df["label"].to_numpy(dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(
        inputs=df[feature_columns].to_numpy(dtype=np.float64),
        labels=labels,
        n_classes=n_classes,
        noise_rate=noise_rate,
        name=Path(path).stem,
    )
