"""Unit tests for the reverse-mode MLP."""
import math

import numpy as np
import pytest

from arsam.autodiff import (
    MLPOracle,
    MLPSpec,
    Tape,
    forward_logits,
    init_params,
    load_checkpoint,
    loss_and_gradient,
    save_checkpoint,
)
from arsam.datasets import Dataset
from arsam.exceptions import InvalidInputError, InvalidSpecError, NumericError, ShapeError
from arsam.objectives import finite_difference_gradient
from arsam.params import LayerMap, ParamVector


class TestMLPSpec:
    """Test spec validation and layout."""

    def test_layout_counts(self):
        """Test that the (2, 8, 2) layout has 42 parameters in named segments."""
        spec = MLPSpec((2, 8, 2))
        layout = spec.layout()
        assert layout.total_length == 2 * 8 + 8 + 8 * 2 + 2 == 42, "Weights and biases of both layers"
        assert [s.name for s in layout] == ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"]

    @pytest.mark.parametrize("kwargs", [
        {"layer_widths": (2,)},
        {"layer_widths": (2, 0, 2)},
        {"layer_widths": (2, 2), "activation": "sigmoid"},
        {"layer_widths": (2, 2), "init_scale_rule": "normal"},
    ])
    def test_invalid(self, kwargs):
        """Test that malformed specs are rejected."""
        with pytest.raises(InvalidSpecError):
            MLPSpec(**kwargs)


class TestInit:
    """Test parameter initialisation."""

    def test_deterministic(self):
        """Test that the same init seed gives the same parameters."""
        spec = MLPSpec((2, 16, 3), init_seed=5)
        assert np.array_equal(init_params(spec).values, init_params(spec).values)

    def test_biases_zero(self):
        """Test that every bias starts at zero."""
        w = init_params(MLPSpec((2, 8, 8, 2), init_seed=1))
        for name in ("layer0.bias", "layer1.bias", "layer2.bias"):
            assert not w.segment(name).any(), f"{name} should start at zero"

    @pytest.mark.parametrize("rule,bound", [
        ("fan_in_uniform", 1 / math.sqrt(4)),
        ("lecun_uniform", math.sqrt(3 / 4)),
        ("he_uniform", math.sqrt(6 / 4)),
    ])
    def test_fan_in_bounds(self, rule, bound):
        """Test that weights stay inside each rule's fan-in bound."""
        w = init_params(MLPSpec((4, 50), init_scale_rule=rule))
        assert np.abs(w.segment("layer0.weight")).max() <= bound, f"{rule} exceeded its bound"


class TestTape:
    """Test the tape primitives directly."""

    def test_matmul_gradients(self):
        """Test matmul gradients through a softmax cross-entropy head."""
        tape = Tape()
        x = tape.leaf(np.array([[1.0, 2.0]]))
        weight = tape.leaf(np.array([[3.0, 0.0], [0.0, 1.0]]))
        loss = tape.softmax_cross_entropy(tape.matmul(x, weight), np.array([0]), 1.0)
        tape.backward(loss)
        # logits (3, 2): d loss / d logits = softmax - onehot
        probs = np.exp([3.0, 2.0]) / np.exp([3.0, 2.0]).sum()
        delta = probs - np.array([1.0, 0.0])
        assert np.allclose(weight.grad, np.outer([1.0, 2.0], delta), rtol=1e-14)
        assert np.allclose(x.grad, [delta @ np.array([[3.0, 0.0], [0.0, 1.0]]).T], rtol=1e-14)
        assert len(tape) == 2

    def test_relu_blocks_negative(self):
        """Test that ReLU passes no gradient to a negative input."""
        tape = Tape()
        x = tape.leaf(np.array([[-1.0, 2.0]]))
        loss = tape.softmax_cross_entropy(tape.relu(x), np.array([1]), 1.0)
        tape.backward(loss)
        assert x.grad[0, 0] == 0.0, "Negative input should get no gradient"
        assert x.grad[0, 1] == pytest.approx(-1.0 / (1.0 + math.exp(2.0)), rel=1e-12)


def batch_of(rng, n, n_features=2, n_classes=2):
    return Dataset(rng.standard_normal((n, n_features)), rng.integers(0, n_classes, n), n_classes)


class TestLossAndGradient:
    """Test the fused forward/backward pass."""

    def test_zero_weights_uniform_loss(self, rng):
        """Test that zero weights give ln 2."""
        spec = MLPSpec((2, 4, 2))
        batch = Dataset(rng.standard_normal((6, 2)), [0, 1, 0, 1, 0, 1], 2)
        loss, _ = loss_and_gradient(spec, ParamVector.zeros(spec.layout()), batch)
        assert loss == pytest.approx(math.log(2), rel=1e-14)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_finite_differences(self, rng, activation):
        """Test the backward pass against central differences."""
        spec = MLPSpec((2, 4, 2), activation=activation, init_seed=3)
        batch = batch_of(rng, 10)
        oracle = MLPOracle(spec)
        w = init_params(spec)
        analytic = oracle.gradient(w, batch).values
        numeric = finite_difference_gradient(oracle, w, batch)
        assert np.linalg.norm(analytic - numeric) <= 1e-4 * np.linalg.norm(analytic), "Backward pass should match finite differences"

    def test_duplicated_batch_is_unchanged(self, rng):
        """Test that repeating every row leaves the mean loss and gradient unchanged."""
        spec = MLPSpec((2, 6, 3), init_seed=2)
        batch = batch_of(rng, 12, n_classes=3)
        doubled = Dataset(np.vstack([batch.inputs, batch.inputs]),
                          np.concatenate([batch.labels, batch.labels]), 3)
        w = init_params(spec)
        loss, grad = loss_and_gradient(spec, w, batch)
        loss2, grad2 = loss_and_gradient(spec, w, doubled)
        assert loss2 == pytest.approx(loss, rel=1e-13)
        assert np.allclose(grad2.values, grad.values, rtol=1e-12, atol=1e-15)

    def test_permutation_invariance_is_bitwise(self, rng):
        """Test that shuffling the batch gives bitwise-equal results."""
        spec = MLPSpec((2, 8, 2), init_seed=9)
        batch = batch_of(rng, 32)
        shuffled = batch.take(rng.permutation(32))
        w = init_params(spec)
        loss, grad = loss_and_gradient(spec, w, batch)
        loss2, grad2 = loss_and_gradient(spec, w, shuffled)
        assert loss == loss2, "Loss should not depend on row order"
        assert np.array_equal(grad.values, grad2.values), "Gradient should not depend on row order"

    def test_dead_relu_path_has_zero_gradient(self):
        """Test that a unit inactive on every row gets no gradient."""
        spec = MLPSpec((1, 2, 2))
        # hidden unit 1 gets pre-activation -x - 1 < 0 for every x >= 0
        values = np.array([1.0, -1.0, 0.0, -1.0, 0.5, -0.5, 2.0, -2.0, 0.0, 0.0])
        w = ParamVector(values, spec.layout())
        batch = Dataset(np.array([[0.5], [1.0], [2.0]]), [0, 1, 1], 2)
        _, grad = loss_and_gradient(spec, w, batch)
        weight0 = grad.segment("layer0.weight")
        bias0 = grad.segment("layer0.bias")
        weight1 = grad.segment("layer1.weight").reshape(2, 2)
        assert weight0[1] == 0.0 and bias0[1] == 0.0
        assert not weight1[1].any(), "Outgoing weights of the dead unit should get no gradient"

    def test_layout_mismatch(self, rng):
        """Test that parameters with the wrong layout are a ShapeError."""
        spec = MLPSpec((2, 4, 2))
        with pytest.raises(ShapeError):
            loss_and_gradient(spec, ParamVector.zeros(LayerMap.single(5)), batch_of(rng, 4))

    def test_empty_batch(self, rng):
        """Test that an empty batch is an InvalidInputError."""
        spec = MLPSpec((2, 4, 2))
        with pytest.raises(InvalidInputError):
            loss_and_gradient(spec, init_params(spec), batch_of(rng, 4).take([]))

    def test_non_finite_activation(self):
        """Test that overflowing activations raise NumericError."""
        spec = MLPSpec((2, 4, 2))
        w = ParamVector(np.full(spec.layout().total_length, 1e308), spec.layout())
        batch = Dataset(np.array([[1.0, 1.0], [2.0, 0.5]]), [0, 1], 2)
        with pytest.raises(NumericError):
            loss_and_gradient(spec, w, batch)

    def test_parallel_chunks_agree(self, rng):
        """Test that the threaded pass agrees with the single tape."""
        spec = MLPSpec((2, 8, 2), init_seed=4)
        batch = batch_of(rng, 64)
        w = init_params(spec)
        loss, grad = loss_and_gradient(spec, w, batch)
        loss4, grad4 = loss_and_gradient(spec, w, batch, workers=4)
        assert loss4 == pytest.approx(loss, rel=1e-12)
        assert np.allclose(grad4.values, grad.values, rtol=1e-10, atol=1e-14)


class TestOracleAndLogits:
    """Test the MLP oracle adapter and prediction path."""

    def test_full_dataset_default(self, moons):
        """Test that the oracle falls back to its bound dataset."""
        spec = MLPSpec((2, 4, 2), init_seed=1)
        oracle = MLPOracle(spec, moons)
        w = init_params(spec)
        assert oracle.loss(w) == loss_and_gradient(spec, w, moons)[0]

    def test_requires_batch_without_dataset(self):
        """Test that an unbound oracle requires a batch."""
        spec = MLPSpec((2, 4, 2))
        with pytest.raises(InvalidInputError):
            MLPOracle(spec).loss(init_params(spec))

    def test_logits_match_tape_forward(self, rng):
        """Test the shape of forward logits."""
        spec = MLPSpec((2, 5, 3), activation="tanh", init_seed=2)
        w = init_params(spec)
        inputs = rng.standard_normal((7, 2))
        assert forward_logits(spec, w, inputs).shape == (7, 3)


class TestCheckpoint:
    """Test binary parameter checkpoints."""

    def test_mlp_checkpoint(self, tmp_path):
        """Test that an MLP checkpoint restores parameters, spec and metadata."""
        spec = MLPSpec((2, 8, 2), activation="tanh", init_seed=4)
        w = init_params(spec)
        path = save_checkpoint(tmp_path / "ckpt.bin", w, spec, {"iteration": 12})
        loaded, loaded_spec, metadata = load_checkpoint(path)
        assert loaded_spec == spec, "Spec should round-trip through the header"
        assert metadata == {"iteration": 12}
        assert np.array_equal(loaded.values, w.values)
        assert loaded.layout == w.layout

    def test_header_layout(self, tmp_path):
        """Test the length-prefixed JSON header followed by little-endian float64 values."""
        w = ParamVector([1.5, -2.0], LayerMap.single(2))
        path = save_checkpoint(tmp_path / "plain.bin", w)
        raw = open(path, "rb").read()
        header_length = int.from_bytes(raw[:8], "little")
        assert raw[8:8 + header_length].startswith(b"{")
        assert np.array_equal(np.frombuffer(raw[8 + header_length:], dtype="<f8"), [1.5, -2.0])
        _, spec, _ = load_checkpoint(path)
        assert spec is None

    def test_not_a_checkpoint(self, tmp_path):
        """Test that a file with a bad header is rejected."""
        path = tmp_path / "junk.bin"
        path.write_bytes(b"\x02\x00\x00\x00\x00\x00\x00\x00{}")
        with pytest.raises(InvalidInputError):
            load_checkpoint(path)
