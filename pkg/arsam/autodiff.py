"""
Reverse-mode differentiation for small fully-connected classifiers.

A Tape records one closure per primitive forward operation; ``backward``
replays them in reverse. Networks are dense layers with relu or tanh
hidden activations and a fused softmax cross-entropy head. MLPOracle
exposes the network through the GradientOracle contract so it plugs into
the optimizer stack like any analytic objective.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from arsam.datasets import Dataset
from arsam.exceptions import InvalidInputError, InvalidSpecError, NumericError, ShapeError
from arsam.objectives import GradientOracle, canonical_order, log_softmax
from arsam.params import LayerMap, ParamVector

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh")

# Half-width of the uniform init distribution as a function of fan-in.
INIT_RULES = {
    "fan_in_uniform": lambda fan_in: 1.0 / np.sqrt(fan_in),
    "lecun_uniform": lambda fan_in: np.sqrt(3.0 / fan_in),
    "he_uniform": lambda fan_in: np.sqrt(6.0 / fan_in),
}

CHECKPOINT_FORMAT = "arsam-params"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MLPSpec:
    """Widths from input to output, hidden activation and init rule."""
    layer_widths: Tuple[int, ...]
    activation: str = "relu"
    init_seed: int = 0
    init_scale_rule: str = "fan_in_uniform"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise InvalidSpecError("an MLP needs at least an input and an output width")
        if min(widths) < 1:
            raise InvalidSpecError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpecError(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}"
            )
        if self.init_scale_rule not in INIT_RULES:
            raise InvalidSpecError(
                f"init_scale_rule must be one of {sorted(INIT_RULES)}, got {self.init_scale_rule!r}"
            )

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def shapes(self) -> List[Tuple[int, int]]:
        return list(zip(self.layer_widths[:-1], self.layer_widths[1:]))

    def layout(self) -> LayerMap:
        named = []
        for i, (fan_in, fan_out) in enumerate(self.shapes()):
            named.append((f"layer{i}.weight", fan_in * fan_out))
            named.append((f"layer{i}.bias", fan_out))
        return LayerMap.from_lengths(named)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["layer_widths"] = list(self.layer_widths)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "MLPSpec":
        return cls(
            layer_widths=tuple(data["layer_widths"]),
            activation=data.get("activation", "relu"),
            init_seed=int(data.get("init_seed", 0)),
            init_scale_rule=data.get("init_scale_rule", "fan_in_uniform"),
        )


class Node:
    """A value on the tape and its accumulated adjoint."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None

    def accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g


class Tape:
    """Ordered record of primitive operations for one evaluation.

    Each primitive computes its output eagerly and appends a closure that
    pushes the output adjoint back to its inputs. A tape is owned by a
    single evaluation and is discarded afterwards.
    """

    def __init__(self):
        self._backward: List[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._backward)

    def leaf(self, value: np.ndarray) -> Node:
        return Node(value)

    def matmul(self, x: Node, weight: Node) -> Node:
        out = Node(x.value @ weight.value)

        def backward():
            weight.accumulate(x.value.T @ out.grad)
            x.accumulate(out.grad @ weight.value.T)

        self._backward.append(backward)
        return out

    def add_bias(self, x: Node, bias: Node) -> Node:
        out = Node(x.value + bias.value)

        def backward():
            x.accumulate(out.grad)
            bias.accumulate(out.grad.sum(axis=0))

        self._backward.append(backward)
        return out

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        out = Node(np.where(mask, x.value, 0.0))

        def backward():
            x.accumulate(np.where(mask, out.grad, 0.0))

        self._backward.append(backward)
        return out

    def tanh(self, x: Node) -> Node:
        out = Node(np.tanh(x.value))

        def backward():
            x.accumulate(out.grad * (1.0 - out.value * out.value))

        self._backward.append(backward)
        return out

    def softmax_cross_entropy(self, logits: Node, labels: np.ndarray, scale: float) -> Node:
        """Sum of per-row cross-entropies times ``scale``, stabilised by log-sum-exp."""
        logp = log_softmax(logits.value)
        rows = np.arange(labels.shape[0])
        out = Node(-float(logp[rows, labels].sum()) * scale)

        def backward():
            delta = np.exp(logp)
            delta[rows, labels] -= 1.0
            logits.accumulate(delta * (scale * out.grad))

        self._backward.append(backward)
        return out

    def backward(self, out: Node):
        out.grad = 1.0
        for step in reversed(self._backward):
            step()


def init_params(spec: MLPSpec) -> ParamVector:
    """Seeded uniform weights scaled by fan-in, zero biases."""
    rng = np.random.default_rng(spec.init_seed)
    half_width = INIT_RULES[spec.init_scale_rule]
    chunks = []
    for fan_in, fan_out in spec.shapes():
        bound = half_width(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector.wrap(np.concatenate(chunks), spec.layout())


def _unpack(spec: MLPSpec, w: ParamVector) -> List[Tuple[np.ndarray, np.ndarray]]:
    if w.layout != spec.layout():
        raise ShapeError(
            f"parameter vector of length {len(w)} does not match MLP {spec.layer_widths}"
        )
    layers = []
    for i, (fan_in, fan_out) in enumerate(spec.shapes()):
        weight = w.segment(f"layer{i}.weight").reshape(fan_in, fan_out)
        bias = w.segment(f"layer{i}.bias")
        layers.append((weight, bias))
    return layers


def _check_finite(value: np.ndarray, where: str):
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite activation in {where}")


def _forward(tape: Tape, spec: MLPSpec, layers, inputs: np.ndarray):
    activate = tape.relu if spec.activation == "relu" else tape.tanh
    h = tape.leaf(inputs)
    params = []
    for i, (weight, bias) in enumerate(layers):
        w_node, b_node = tape.leaf(weight), tape.leaf(bias)
        params.append((w_node, b_node))
        h = tape.add_bias(tape.matmul(h, w_node), b_node)
        if i < len(layers) - 1:
            h = activate(h)
        _check_finite(h.value, f"layer {i}")
    return h, params


def _evaluate(spec: MLPSpec, layers, batch: Dataset, scale: float):
    tape = Tape()
    logits, params = _forward(tape, spec, layers, batch.inputs)
    loss = tape.softmax_cross_entropy(logits, batch.labels, scale)
    tape.backward(loss)
    grads = []
    for (w_node, b_node), (weight, bias) in zip(params, layers):
        grads.append(np.zeros_like(weight) if w_node.grad is None else w_node.grad)
        grads.append(np.zeros_like(bias) if b_node.grad is None else b_node.grad)
    return loss.value, np.concatenate([g.reshape(-1) for g in grads])


def loss_and_gradient(
    spec: MLPSpec,
    w: ParamVector,
    batch: Dataset,
    workers: int = 1,
) -> Tuple[float, ParamVector]:
    """
    Mean softmax cross-entropy over the batch and its exact gradient.

    Rows are put into a canonical order first, so loss and gradient do not
    depend on how the batch was shuffled. ``workers > 1`` splits the batch
    into chunks evaluated on separate tapes in a thread pool; the chunked
    sum is not bitwise identical to the single-tape result.

    Raises:
        ShapeError: if w does not match the spec or the batch width
        InvalidInputError: on an empty batch
        NumericError: if any activation becomes non-finite
    """
    if len(batch) == 0:
        raise InvalidInputError("cannot evaluate on an empty batch")
    if batch.n_features != spec.layer_widths[0]:
        raise ShapeError(
            f"batch has {batch.n_features} features, network expects {spec.layer_widths[0]}"
        )
    layers = _unpack(spec, w)
    batch = batch.take(canonical_order(batch))
    scale = 1.0 / len(batch)

    if workers <= 1 or len(batch) < 2 * workers:
        loss, grad = _evaluate(spec, layers, batch, scale)
    else:
        chunks = np.array_split(np.arange(len(batch)), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda idx: _evaluate(spec, layers, batch.take(idx), scale), chunks))
        loss = sum(p[0] for p in parts)
        grad = np.sum([p[1] for p in parts], axis=0)
    return float(loss), ParamVector.wrap(grad, w.layout)


def forward_logits(spec: MLPSpec, w: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Class scores for each input row, no tape recorded."""
    h = np.asarray(inputs, dtype=np.float64)
    layers = _unpack(spec, w)
    for i, (weight, bias) in enumerate(layers):
        h = h @ weight + bias
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0) if spec.activation == "relu" else np.tanh(h)
    return h


class MLPOracle(GradientOracle):
    """GradientOracle over an MLPSpec; ``batch=None`` means the full dataset."""

    requires_batch = True

    def __init__(self, spec: MLPSpec, dataset: Optional[Dataset] = None, workers: int = 1):
        if dataset is not None and dataset.n_classes > spec.n_classes:
            raise InvalidSpecError(
                f"output width {spec.n_classes} is smaller than the class count {dataset.n_classes}"
            )
        self.spec = spec
        self.dataset = dataset
        self.workers = workers
        self._layout = spec.layout()

    def layout(self) -> LayerMap:
        return self._layout

    def loss_and_gradient(self, w: ParamVector, batch=None) -> Tuple[float, ParamVector]:
        if batch is None:
            if self.dataset is None:
                raise InvalidInputError("MLPOracle needs a batch when built without a dataset")
            batch = self.dataset
        return loss_and_gradient(self.spec, w, batch, workers=self.workers)

    def logits(self, w: ParamVector, inputs: np.ndarray) -> np.ndarray:
        return forward_logits(self.spec, w, inputs)


def save_checkpoint(
    path: Union[str, Path],
    w: ParamVector,
    spec: Optional[MLPSpec] = None,
    metadata: Optional[dict] = None,
) -> str:
    """
    Write parameters as an 8-byte little-endian header length, a JSON
    header (spec, layout, metadata) and the values as little-endian float64.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "mlp_spec": spec.to_dict() if spec is not None else None,
        "layout": w.layout.to_records(),
        "length": len(w),
        "dtype": "<f8",
        "metadata": metadata or {},
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(encoded).to_bytes(8, "little"))
        f.write(encoded)
        f.write(w.values.astype("<f8").tobytes())
    logger.debug("Saved checkpoint %s (%d values)", path, len(w))
    return str(path)


def load_checkpoint(path: Union[str, Path]) -> Tuple[ParamVector, Optional[MLPSpec], dict]:
    """Read a checkpoint written by save_checkpoint."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise InvalidInputError(f"{path}: truncated checkpoint")
    header_length = int.from_bytes(raw[:8], "little")
    try:
        header = json.loads(raw[8:8 + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InvalidInputError(f"{path}: unreadable checkpoint header: {e}") from e
    if header.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path}: not a parameter checkpoint")

    layout = LayerMap.from_records(header["layout"])
    values = np.frombuffer(raw[8 + header_length:], dtype="<f8")
    if values.shape[0] != header["length"]:
        raise InvalidInputError(
            f"{path}: expected {header['length']} values, found {values.shape[0]}"
        )
    spec = MLPSpec.from_dict(header["mlp_spec"]) if header["mlp_spec"] else None
    return ParamVector(values.astype(np.float64), layout), spec, header.get("metadata", {})
