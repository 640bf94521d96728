"""
Data fetching and preparation for training runs.
"""
import logging
from pathlib import Path
from typing import Tuple

from sklearn.model_selection import train_test_split

from arsam.datasets import Dataset, inject_label_noise, load_dataset_csv, make_two_moons, save_dataset_csv
from train.config import DataConfig

logger = logging.getLogger(__name__)


def fetch_data(config: DataConfig, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Generate (or load) the dataset and split it.

    Label noise, when requested, is applied to the training split only so
    the test split measures clean accuracy.

    Args:
        config: Data section of the run config
        seed: Seed for generation, splitting and label noise

    Returns:
        Tuple of (train, test) datasets
    """
    if config.csv_path:
        full = load_dataset_csv(config.csv_path)
    else:
        full = make_two_moons(config.n, config.noise_std, seed)

    train_idx, test_idx = train_test_split(
        range(len(full)),
        test_size=config.test_fraction,
        random_state=seed,
        stratify=full.labels,
    )
    train, test = full.take(sorted(train_idx)), full.take(sorted(test_idx))
    if config.label_noise:
        train = inject_label_noise(train, config.label_noise, seed)

    logger.info("Data ready: %d train, %d test samples (label noise %.2f)",
                len(train), len(test), config.label_noise)
    return train, test


def save_data(train: Dataset, test: Dataset, output_dir: str = "data") -> Tuple[str, str]:
    """
    Save train/test splits to CSV files.

    Args:
        train, test: Data splits
        output_dir: Directory to save data

    Returns:
        Paths of the train and test CSV files
    """
    Path(output_dir).mkdir(parents=True, exist_ok=True)
    return (
        save_dataset_csv(train, f"{output_dir}/train.csv"),
        save_dataset_csv(test, f"{output_dir}/test.csv"),
    )
