"""
Differentiable objectives behind one GradientOracle contract.

Analytic objectives (quadratic, two-well) are full-batch and ignore the
batch argument; dataset objectives (logistic regression here, MLPs in
arsam.autodiff) evaluate on the mini-batch they are handed.
"""
import abc
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from arsam.datasets import Dataset
from arsam.exceptions import InvalidInputError, InvalidSpecError, NumericError, ShapeError
from arsam.params import LayerMap, ParamVector

logger = logging.getLogger(__name__)


class GradientOracle(abc.ABC):
    """Abstract differentiable objective L(w; batch).

    Subclasses set ``supports_hessian`` when ``hessian`` returns the exact
    dense Hessian, and ``requires_batch`` when the objective is defined over
    mini-batches. Oracles are read-only after construction.
    """

    supports_hessian: bool = False
    requires_batch: bool = False

    @abc.abstractmethod
    def layout(self) -> LayerMap:
        """Layout every parameter vector for this oracle must have."""

    @abc.abstractmethod
    def loss_and_gradient(self, w: ParamVector, batch=None) -> Tuple[float, ParamVector]:
        """One forward and backward pass."""

    def loss(self, w: ParamVector, batch=None) -> float:
        return self.loss_and_gradient(w, batch)[0]

    def gradient(self, w: ParamVector, batch=None) -> ParamVector:
        return self.loss_and_gradient(w, batch)[1]

    def hessian(self, w: ParamVector, batch=None) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no exact Hessian")

    def _check_layout(self, w: ParamVector):
        if w.layout != self.layout():
            raise ShapeError(
                f"{type(self).__name__} expects a vector of length "
                f"{self.layout().total_length} with its own layout"
            )


@dataclass(frozen=True)
class QuadraticSpec:
    """Eigenvalues of H = Q^T diag(eigenvalues) Q.

    ``rotation_seed=None`` keeps Q = I, any integer draws a seeded random
    orthogonal basis. ``require_psd`` rejects negative eigenvalues.
    """
    eigenvalues: Tuple[float, ...]
    rotation_seed: Optional[int] = None
    dimension: Optional[int] = None
    require_psd: bool = True

    def __post_init__(self):
        eigenvalues = tuple(float(x) for x in self.eigenvalues)
        object.__setattr__(self, "eigenvalues", eigenvalues)
        if not eigenvalues:
            raise InvalidSpecError("a quadratic needs at least one eigenvalue")
        if self.dimension is None:
            object.__setattr__(self, "dimension", len(eigenvalues))
        if self.dimension != len(eigenvalues):
            raise InvalidSpecError(
                f"dimension {self.dimension} != eigenvalue count {len(eigenvalues)}"
            )
        if not np.all(np.isfinite(eigenvalues)):
            raise InvalidSpecError("eigenvalues must be finite")
        if self.require_psd and min(eigenvalues) < 0:
            raise InvalidSpecError("PSD mode requires non-negative eigenvalues")


def random_orthogonal(dimension: int, seed: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix from a seeded QR factorisation."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dimension, dimension)))
    return q * np.sign(np.diag(r))


class QuadraticOracle(GradientOracle):
    """L(w) = 1/2 w^T H w with a known spectrum."""

    supports_hessian = True

    def __init__(self, spec: QuadraticSpec):
        self.spec = spec
        d = np.diag(np.asarray(spec.eigenvalues))
        if spec.rotation_seed is None:
            h = d
        else:
            q = random_orthogonal(spec.dimension, spec.rotation_seed)
            h = q.T @ d @ q
        h = 0.5 * (h + h.T)
        h.flags.writeable = False
        self._hessian = h
        self._layout = LayerMap.single(spec.dimension)

    def layout(self) -> LayerMap:
        return self._layout

    def loss_and_gradient(self, w: ParamVector, batch=None) -> Tuple[float, ParamVector]:
        self._check_layout(w)
        g = self._hessian @ w.values
        loss = 0.5 * float(w.values @ g)
        return loss, ParamVector.wrap(g, self._layout)

    def hessian(self, w: Optional[ParamVector] = None, batch=None) -> np.ndarray:
        return self._hessian.copy()


def quadratic_oracle(spec: QuadraticSpec) -> QuadraticOracle:
    return QuadraticOracle(spec)


@dataclass(frozen=True)
class TwoWellSpec:
    """Sharp Gaussian well (depth a, width sigma1, centre mu1) next to a
    shallower but wider one (depth b, width sigma2, centre mu2)."""
    sharp_depth: float = 1.0
    sharp_width: float = 0.1
    flat_depth: float = 0.9
    flat_width: float = 1.0
    sharp_center: float = -2.0
    flat_center: float = 2.0

    def __post_init__(self):
        if self.sharp_width <= 0 or self.flat_width <= 0:
            raise InvalidSpecError("well widths must be positive")
        if not self.sharp_width < self.flat_width:
            raise InvalidSpecError("the sharp well must be narrower than the flat well")
        if not self.sharp_depth > self.flat_depth > 0:
            raise InvalidSpecError("depths must satisfy sharp_depth > flat_depth > 0")
        if self.sharp_center == self.flat_center:
            raise InvalidSpecError("well centres must differ")


class TwoWellOracle(GradientOracle):
    """1-D landscape L(w) = -a exp(-(w-mu1)^2 / 2 s1^2) - b exp(-(w-mu2)^2 / 2 s2^2)."""

    supports_hessian = True

    def __init__(self, spec: TwoWellSpec):
        self.spec = spec
        self._layout = LayerMap.single(1)

    def layout(self) -> LayerMap:
        return self._layout

    def _terms(self, x):
        s = self.spec
        u1 = (x - s.sharp_center) / s.sharp_width
        u2 = (x - s.flat_center) / s.flat_width
        e1 = s.sharp_depth * np.exp(-0.5 * u1 * u1)
        e2 = s.flat_depth * np.exp(-0.5 * u2 * u2)
        return u1, u2, e1, e2

    def loss_values(self, x: np.ndarray) -> np.ndarray:
        """Vectorised loss on an array of scalar positions (for grid searches)."""
        _, _, e1, e2 = self._terms(np.asarray(x, dtype=np.float64))
        return -e1 - e2

    def loss_and_gradient(self, w: ParamVector, batch=None) -> Tuple[float, ParamVector]:
        self._check_layout(w)
        s = self.spec
        u1, u2, e1, e2 = self._terms(w.values)
        grad = e1 * u1 / s.sharp_width + e2 * u2 / s.flat_width
        return float(-(e1 + e2)[0]), ParamVector.wrap(grad, self._layout)

    def hessian(self, w: ParamVector, batch=None) -> np.ndarray:
        self._check_layout(w)
        s = self.spec
        u1, u2, e1, e2 = self._terms(w.values)
        h = e1 * (1.0 - u1 * u1) / s.sharp_width ** 2 + e2 * (1.0 - u2 * u2) / s.flat_width ** 2
        return h.reshape(1, 1)

    def in_flat_basin(self, x: float) -> bool:
        return abs(x - self.spec.flat_center) < 3.0 * self.spec.flat_width

    def in_sharp_basin(self, x: float) -> bool:
        return abs(x - self.spec.sharp_center) < 3.0 * self.spec.sharp_width


def two_well_oracle(
    sharp_depth: float,
    sharp_width: float,
    flat_depth: float,
    flat_width: float,
    sharp_center: float,
    flat_center: float,
) -> TwoWellOracle:
    return TwoWellOracle(TwoWellSpec(
        sharp_depth=sharp_depth,
        sharp_width=sharp_width,
        flat_depth=flat_depth,
        flat_width=flat_width,
        sharp_center=sharp_center,
        flat_center=flat_center,
    ))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def canonical_order(batch: Dataset) -> np.ndarray:
    """Row order that depends only on the batch contents, not their order."""
    keys = [batch.labels] + [batch.inputs[:, j] for j in range(batch.n_features - 1, -1, -1)]
    return np.lexsort(keys)


class LogisticOracle(GradientOracle):
    """Softmax regression with an L2 penalty lambda * ||w||^2.

    Parameters are the (features x classes) weight matrix in row-major
    order followed by the class biases. Passing ``batch=None`` evaluates
    on the whole dataset the oracle was built with.
    """

    supports_hessian = True
    requires_batch = True

    def __init__(self, dataset: Dataset, l2_lambda: float = 0.0):
        if l2_lambda < 0:
            raise InvalidSpecError("l2_lambda must be >= 0")
        self.dataset = dataset
        self.l2_lambda = float(l2_lambda)
        self.n_features = dataset.n_features
        self.n_classes = max(dataset.n_classes, 2)
        self._layout = LayerMap.from_lengths([
            ("weights", self.n_features * self.n_classes),
            ("bias", self.n_classes),
        ])

    def layout(self) -> LayerMap:
        return self._layout

    def _resolve(self, batch: Optional[Dataset]) -> Dataset:
        batch = self.dataset if batch is None else batch
        if len(batch) == 0:
            raise InvalidInputError("cannot evaluate on an empty batch")
        if batch.n_features != self.n_features:
            raise ShapeError(f"batch has {batch.n_features} features, expected {self.n_features}")
        return batch.take(canonical_order(batch))

    def _unpack(self, w: ParamVector):
        theta = w.values.reshape(self.n_features + 1, self.n_classes)
        return theta[:-1], theta[-1]

    def logits(self, w: ParamVector, inputs: np.ndarray) -> np.ndarray:
        self._check_layout(w)
        weights, bias = self._unpack(w)
        return np.asarray(inputs, dtype=np.float64) @ weights + bias

    def loss_and_gradient(self, w: ParamVector, batch=None) -> Tuple[float, ParamVector]:
        self._check_layout(w)
        batch = self._resolve(batch)
        n = len(batch)
        logp = log_softmax(self.logits(w, batch.inputs))
        if not np.isfinite(logp).all():
            raise NumericError("non-finite logits in logistic objective")
        rows = np.arange(n)
        data_loss = -float(logp[rows, batch.labels].sum()) / n

        delta = np.exp(logp)
        delta[rows, batch.labels] -= 1.0
        delta /= n
        grad_w = batch.inputs.T @ delta
        grad_b = delta.sum(axis=0)
        grad = np.concatenate([grad_w.reshape(-1), grad_b])

        loss = data_loss
        if self.l2_lambda:
            loss += self.l2_lambda * float(w.values @ w.values)
            grad = grad + 2.0 * self.l2_lambda * w.values
        return loss, ParamVector.wrap(grad, self._layout)

    def hessian(self, w: ParamVector, batch=None) -> np.ndarray:
        self._check_layout(w)
        batch = self._resolve(batch)
        n = len(batch)
        probs = np.exp(log_softmax(self.logits(w, batch.inputs)))
        augmented = np.hstack([batch.inputs, np.ones((n, 1))])
        # per-sample softmax curvature diag(p) - p p^T
        curvature = np.einsum("nk,kl->nkl", probs, np.eye(self.n_classes))
        curvature -= np.einsum("nk,nl->nkl", probs, probs)
        h = np.einsum("na,nb,nkl->akbl", augmented, augmented, curvature) / n
        size = self._layout.total_length
        h = h.reshape(size, size)
        h = 0.5 * (h + h.T)
        if self.l2_lambda:
            h = h + 2.0 * self.l2_lambda * np.eye(size)
        return h


def logistic_oracle(dataset: Dataset, l2_lambda: float = 0.0) -> LogisticOracle:
    return LogisticOracle(dataset, l2_lambda)


def finite_difference_gradient(
    oracle: GradientOracle,
    w: ParamVector,
    batch=None,
    step: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central differences of the loss, optionally on a subset of coordinates."""
    values = w.values
    indices = range(len(w)) if indices is None else indices
    estimate = np.zeros(len(w))
    for i in indices:
        bumped = values.copy()
        bumped[i] = values[i] + step
        upper = oracle.loss(ParamVector.wrap(bumped, w.layout), batch)
        bumped[i] = values[i] - step
        lower = oracle.loss(ParamVector.wrap(bumped.copy(), w.layout), batch)
        estimate[i] = (upper - lower) / (2.0 * step)
    return estimate
