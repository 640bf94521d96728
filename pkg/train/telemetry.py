"""
Per-iteration telemetry and its CSV writer.

Records go through a bounded queue to a single flusher thread that appends
them to the CSV in chunks. With one producer and one consumer the file
keeps iteration order.
"""
import logging
import queue
import threading
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import pandas as pd

from arsam.optimizers import StepOutcome

logger = logging.getLogger(__name__)

COLUMNS = ["iter", "mode", "loss", "norm_sgd", "norm_psf", "c", "r", "r_hat", "s", "p", "wall_ns"]
FLOAT_COLUMNS = ["loss", "norm_sgd", "norm_psf", "c", "r", "r_hat", "s", "p"]

_STOP = object()


@dataclass(frozen=True)
class TelemetryRecord:
    iteration: int
    mode: str
    loss: float
    norm_sgd: float
    norm_psf: Optional[float]
    c: Optional[float]
    r: Optional[float]
    r_hat: Optional[float]
    s: float
    p: float
    wall_ns: int

    @classmethod
    def from_outcome(cls, outcome: StepOutcome, wall_ns: int) -> "TelemetryRecord":
        return cls(
            iteration=outcome.iteration,
            mode=outcome.mode.value,
            loss=outcome.loss,
            norm_sgd=outcome.norm_sgd,
            norm_psf=outcome.norm_psf,
            c=outcome.c,
            r=outcome.r,
            r_hat=outcome.r_hat,
            s=outcome.s,
            p=outcome.p,
            wall_ns=int(wall_ns),
        )


def records_to_frame(records: Sequence[TelemetryRecord]) -> pd.DataFrame:
    df = pd.DataFrame([astuple(r) for r in records], columns=COLUMNS)
    df[FLOAT_COLUMNS] = df[FLOAT_COLUMNS].astype("float64")
    df["iter"] = df["iter"].astype("int64")
    df["wall_ns"] = df["wall_ns"].astype("int64")
    return df


def write_frame(df: pd.DataFrame, path: Union[str, Path], header: bool = True, mode: str = "w"):
    df.to_csv(path, mode=mode, header=header, index=False, float_format="%.17g", na_rep="")


def read_telemetry(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip", keep_default_na=True)


class TelemetryError(RuntimeError):
    """The flusher thread could not write the telemetry file."""


class TelemetryWriter:
    """Bounded-queue CSV writer; use as a context manager.

    ``write`` blocks when the queue is full. ``records`` keeps every record
    handed in, in order, for in-process consumers. After a failed flush the
    flusher keeps draining the queue so producers never block; the next
    ``write`` or ``close`` raises ``TelemetryError``.
    """

    def __init__(self, path: Union[str, Path], queue_size: int = 1024, chunk_size: int = 256):
        self.path = Path(path)
        self.chunk_size = chunk_size
        self.records: List[TelemetryRecord] = []
        self._queue: "queue.Queue" = queue.Queue(maxsize=queue_size)
        self._thread: Optional[threading.Thread] = None
        self._error: Optional[BaseException] = None
        self._reported = False
        self.rows_written = 0

    def __enter__(self) -> "TelemetryWriter":
        self.start()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False

    def start(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        write_frame(pd.DataFrame(columns=COLUMNS), self.path)
        self._thread = threading.Thread(target=self._flush_loop, name="telemetry-flusher", daemon=True)
        self._thread.start()

    def _raise_error(self):
        self._reported = True
        raise TelemetryError(f"telemetry flush failed: {self._error}") from self._error

    def write(self, record: TelemetryRecord):
        if self._error is not None:
            self._raise_error()
        self.records.append(record)
        self._queue.put(record)

    def close(self):
        if self._thread is None:
            return
        self._queue.put(_STOP)
        self._thread.join()
        self._thread = None
        if self._error is not None and not self._reported:
            self._raise_error()

    def _flush_loop(self):
        pending = []
        while True:
            item = self._queue.get()
            stop = item is _STOP
            if self._error is not None:
                if stop:
                    return
                continue
            if not stop:
                pending.append(item)
            if pending and (stop or len(pending) >= self.chunk_size or self._queue.empty()):
                try:
                    write_frame(records_to_frame(pending), self.path, header=False, mode="a")
                    self.rows_written += len(pending)
                except Exception as e:
                    logger.error("Telemetry flush failed: %s", e)
                    self._error = e
                pending = []
            if stop:
                return
