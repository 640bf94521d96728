"""
Flat parameter vectors with a layer segmentation map.

Every vector the optimizers touch (weights, SGD gradient, SAM gradient,
PSF, perturbation) is a ParamVector. The layout travels with the values so
that norms over the last few layers can be taken without knowing the model.
"""
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence, Tuple

import numpy as np

from arsam.exceptions import InvalidInputError, InvalidSelectorError, ShapeError


@dataclass(frozen=True)
class Segment:
    """One named, contiguous slice of a flat vector."""
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class LayerMap:
    """Ordered, contiguous, non-overlapping segments covering [0, total)."""
    segments: Tuple[Segment, ...]

    def __post_init__(self):
        if not self.segments:
            raise ShapeError("a layer map needs at least one segment")
        expected = 0
        for segment in self.segments:
            if segment.length < 0:
                raise ShapeError(f"segment {segment.name!r} has negative length")
            if segment.offset != expected:
                raise ShapeError(
                    f"segment {segment.name!r} starts at {segment.offset}, expected {expected}"
                )
            expected = segment.stop

    @classmethod
    def from_lengths(cls, named_lengths: Iterable[Tuple[str, int]]) -> "LayerMap":
        segments = []
        offset = 0
        for name, length in named_lengths:
            segments.append(Segment(name=name, offset=offset, length=int(length)))
            offset += int(length)
        return cls(tuple(segments))

    @classmethod
    def single(cls, length: int, name: str = "all") -> "LayerMap":
        return cls.from_lengths([(name, length)])

    @property
    def total_length(self) -> int:
        return self.segments[-1].stop

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments)

    def to_records(self) -> list:
        return [
            {"name": s.name, "offset": s.offset, "length": s.length}
            for s in self.segments
        ]

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "LayerMap":
        return cls(tuple(Segment(r["name"], int(r["offset"]), int(r["length"])) for r in records))


class ParamVector:
    """Dense float64 values plus their LayerMap.

    The values array is read-only once wrapped; every operation returns a
    new vector, so instances can be shared across threads freely.
    """

    __slots__ = ("_values", "_layout")

    def __init__(self, values, layout: LayerMap):
        array = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if array.shape[0] != layout.total_length:
            raise ShapeError(
                f"vector of length {array.shape[0]} does not match layout "
                f"of length {layout.total_length}"
            )
        array.flags.writeable = False
        self._values = array
        self._layout = layout

    @classmethod
    def zeros(cls, layout: LayerMap) -> "ParamVector":
        return cls(np.zeros(layout.total_length), layout)

    @classmethod
    def wrap(cls, values: np.ndarray, layout: LayerMap) -> "ParamVector":
        """Take ownership of a freshly computed array without copying it."""
        array = np.asarray(values, dtype=np.float64).reshape(-1)
        if array.shape[0] != layout.total_length:
            raise ShapeError(
                f"vector of length {array.shape[0]} does not match layout "
                f"of length {layout.total_length}"
            )
        vector = cls.__new__(cls)
        array.flags.writeable = False
        vector._values = array
        vector._layout = layout
        return vector

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def layout(self) -> LayerMap:
        return self._layout

    def __len__(self) -> int:
        return self._values.shape[0]

    def segment(self, name: str) -> np.ndarray:
        for seg in self._layout:
            if seg.name == name:
                return self._values[seg.offset:seg.stop]
        raise KeyError(name)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self._values).all())

    def zeros_like(self) -> "ParamVector":
        return ParamVector.zeros(self._layout)

    def __repr__(self) -> str:
        return f"ParamVector(len={len(self)}, segments={len(self._layout)})"


def _require_finite(v: ParamVector):
    if not v.is_finite():
        raise InvalidInputError("vector contains non-finite entries")


def _sum_of_squares(v: ParamVector, segments: Sequence[Segment]) -> float:
    # Sequential accumulation in segment order keeps runs bitwise reproducible.
    total = 0.0
    values = v.values
    for seg in segments:
        chunk = values[seg.offset:seg.stop]
        total += float(np.dot(chunk, chunk))
    return total


def l2_norm(v: ParamVector) -> float:
    """Euclidean norm of the whole vector.

    Raises:
        InvalidInputError: if any entry is NaN or infinite
    """
    _require_finite(v)
    return float(np.sqrt(_sum_of_squares(v, v.layout.segments)))


def subset_l2_norm(v: ParamVector, last_k: int) -> float:
    """Euclidean norm restricted to the last ``last_k`` segments of the layout.

    With ``last_k`` equal to the segment count this takes the same
    accumulation path as l2_norm and returns the identical float.

    Raises:
        InvalidSelectorError: if last_k is not in [1, number of segments]
        InvalidInputError: if any entry is NaN or infinite
    """
    n_segments = len(v.layout)
    if not isinstance(last_k, (int, np.integer)) or not 1 <= last_k <= n_segments:
        raise InvalidSelectorError(
            f"last_k must be in [1, {n_segments}], got {last_k!r}"
        )
    _require_finite(v)
    selected = v.layout.segments[n_segments - int(last_k):]
    return float(np.sqrt(_sum_of_squares(v, selected)))


def selected_norm(v: ParamVector, last_k=None) -> float:
    """l2_norm when ``last_k`` is None, subset_l2_norm otherwise."""
    if last_k is None:
        return l2_norm(v)
    return subset_l2_norm(v, last_k)


def linear_combine(a: float, x: ParamVector, b: float, y: ParamVector) -> ParamVector:
    """Elementwise a*x + b*y with the layout of x.

    Raises:
        ShapeError: if x and y have different layouts
    """
    if x.layout != y.layout:
        raise ShapeError("cannot combine vectors with different layouts")
    return ParamVector.wrap(a * x.values + b * y.values, x.layout)
