"""Unit tests for objectives and synthetic datasets."""
import math

import numpy as np
import pytest

from arsam.datasets import Dataset, inject_label_noise, load_dataset_csv, make_two_moons, save_dataset_csv
from arsam.exceptions import InvalidInputError, InvalidSpecError, ShapeError
from arsam.objectives import (
    QuadraticOracle,
    QuadraticSpec,
    TwoWellSpec,
    finite_difference_gradient,
    logistic_oracle,
    quadratic_oracle,
    two_well_oracle,
)
from arsam.params import LayerMap, ParamVector
from arsam.verify import perturbed_loss_grid


def hessian_matches_gradient_differences(oracle, w, rng, batch=None, step=1e-6):
    d = rng.standard_normal(len(w))
    d /= np.linalg.norm(d)
    plus = oracle.gradient(ParamVector(w.values + step * d, w.layout), batch).values
    minus = oracle.gradient(ParamVector(w.values - step * d, w.layout), batch).values
    numeric = (plus - minus) / (2 * step)
    analytic = oracle.hessian(w, batch) @ d
    return np.linalg.norm(analytic - numeric) <= 1e-4 * max(np.linalg.norm(analytic), 1e-8)


class TestQuadratic:
    """Test the quadratic oracle on the (1, 4) spectrum."""

    def test_hand_values(self, quadratic, w_fixture):
        """Test loss and gradient at w = (2, 1) by hand."""
        loss, grad = quadratic.loss_and_gradient(w_fixture)
        assert loss == 4.0, "0.5 * (1*4 + 4*1) should be 4"
        assert np.array_equal(grad.values, [2.0, 4.0]), "Gradient should be (1*2, 4*1)"

    def test_minimum(self, quadratic):
        """Test that the origin has zero loss and zero gradient."""
        loss, grad = quadratic.loss_and_gradient(ParamVector.zeros(quadratic.layout()))
        assert loss == 0.0
        assert not grad.values.any()

    @pytest.mark.parametrize("seed", [0, 1, 99])
    def test_trace_invariant_under_rotation(self, seed):
        """Test that a random rotation keeps the Hessian trace and symmetry."""
        oracle = quadratic_oracle(QuadraticSpec((0.5, 1.0, 3.0, 7.0), rotation_seed=seed))
        h = oracle.hessian()
        assert np.trace(h) == pytest.approx(11.5, rel=1e-12), "Rotation should keep the trace"
        assert np.allclose(h, h.T, atol=1e-10)

    def test_gradient_is_hessian_product(self, rng):
        """Test that the gradient equals H w and the loss equals w'Hw / 2."""
        oracle = quadratic_oracle(QuadraticSpec(tuple(rng.uniform(0, 5, 6)), rotation_seed=3))
        w = ParamVector(rng.standard_normal(6), oracle.layout())
        loss, grad = oracle.loss_and_gradient(w)
        assert np.array_equal(grad.values, oracle.hessian() @ w.values)
        assert loss == pytest.approx(0.5 * w.values @ grad.values, abs=1e-12)

    def test_negative_eigenvalue_rejected_in_psd_mode(self):
        """Test that negative eigenvalues need require_psd=False."""
        with pytest.raises(InvalidSpecError):
            QuadraticSpec((1.0, -1.0))
        QuadraticSpec((1.0, -1.0), require_psd=False)

    def test_dimension_must_match(self):
        """Test that an explicit dimension must match the spectrum."""
        with pytest.raises(InvalidSpecError):
            QuadraticSpec((1.0, 2.0), dimension=3)

    def test_wrong_layout_rejected(self, quadratic):
        """Test that a vector of the wrong length is a ShapeError."""
        with pytest.raises(ShapeError):
            quadratic.gradient(ParamVector([1.0, 2.0, 3.0], LayerMap.single(3)))

    def test_hessian_directional_derivative(self, rng):
        """Test the Hessian against differences of the gradient."""
        oracle = QuadraticOracle(QuadraticSpec(tuple(rng.uniform(0, 5, 5)), rotation_seed=8))
        w = ParamVector(rng.standard_normal(5), oracle.layout())
        assert hessian_matches_gradient_differences(oracle, w, rng)


class TestTwoWell:
    """Test the sharp/flat two-well landscape."""

    def oracle(self):
        return two_well_oracle(1.0, 0.1, 0.9, 1.0, -2.0, 2.0)

    def test_sharp_term_stationary_at_center(self):
        """Test that the sharp well contributes no gradient at its centre."""
        oracle = self.oracle()
        grad = oracle.gradient(ParamVector([-2.0], oracle.layout())).values[0]
        # only the flat well contributes at the sharp centre
        u2 = -4.0
        assert grad == pytest.approx(0.9 * u2 * math.exp(-0.5 * u2 * u2), rel=1e-12)

    def test_global_minimum_is_sharp(self):
        """Test that the sharp well is deeper than the flat one."""
        oracle = self.oracle()
        sharp = oracle.loss(ParamVector([-2.0], oracle.layout()))
        flat = oracle.loss(ParamVector([2.0], oracle.layout()))
        assert sharp < flat < 0, "The sharp well should be the global minimum"

    def test_perturbed_argmin_is_flat(self):
        """Test that the perturbed loss moves the argmin toward the flat well."""
        oracle = self.oracle()
        grid, perturbed = perturbed_loss_grid(oracle, 0.3)
        argmin = grid[np.argmin(perturbed)]
        assert abs(argmin - 2.0) < 3.0, f"Perturbed argmin {argmin} should sit near the flat well"

    @pytest.mark.parametrize("kwargs", [
        {"sharp_width": 0.0},
        {"flat_width": -1.0},
        {"sharp_depth": 0.5},
        {"sharp_center": 2.0},
    ])
    def test_invalid_specs(self, kwargs):
        """Test that degenerate or overlapping wells are rejected."""
        with pytest.raises(InvalidSpecError):
            TwoWellSpec(**kwargs)

    def test_hessian_directional_derivative(self, rng):
        """Test the second derivative against gradient differences at several points."""
        oracle = self.oracle()
        for x in (-2.05, -1.8, 0.3, 2.5):
            assert hessian_matches_gradient_differences(oracle, ParamVector([x], oracle.layout()), rng)


class TestLogistic:
    """Test softmax regression with an L2 penalty."""

    def test_uniform_prediction_loss(self, moons):
        """Test that zero weights give ln 2 on a balanced batch."""
        balanced = moons.take(np.concatenate([np.flatnonzero(moons.labels == 0)[:5],
                                              np.flatnonzero(moons.labels == 1)[:5]]))
        oracle = logistic_oracle(balanced, l2_lambda=0.0)
        assert oracle.loss(ParamVector.zeros(oracle.layout())) == pytest.approx(math.log(2), rel=1e-15)

    def test_regularizer_vanishes_at_zero(self, moons):
        """Test that the L2 term adds nothing at w = 0."""
        plain = logistic_oracle(moons, 0.0)
        penalised = logistic_oracle(moons, 0.7)
        w = ParamVector.zeros(plain.layout())
        assert penalised.loss(w) == plain.loss(w)
        assert np.array_equal(penalised.gradient(w).values, plain.gradient(w).values)

    def test_gradient_matches_finite_differences(self, moons, rng):
        """Test the analytic gradient against central differences."""
        batch = moons.take(rng.choice(len(moons), size=20, replace=False))
        oracle = logistic_oracle(batch, l2_lambda=0.05)
        w = ParamVector(0.5 * rng.standard_normal(oracle.layout().total_length), oracle.layout())
        analytic = oracle.gradient(w).values
        numeric = finite_difference_gradient(oracle, w)
        assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(analytic), "Gradient should match finite differences"

    def test_hessian_symmetric_and_consistent(self, moons, rng):
        """Test that the exact Hessian is symmetric and matches gradient differences."""
        oracle = logistic_oracle(moons.take(np.arange(30)), l2_lambda=0.01)
        w = ParamVector(rng.standard_normal(oracle.layout().total_length), oracle.layout())
        h = oracle.hessian(w)
        assert np.allclose(h, h.T, atol=1e-10)
        assert hessian_matches_gradient_differences(oracle, w, rng)

    def test_empty_batch_rejected(self, moons):
        """Test that an empty batch is an InvalidInputError."""
        oracle = logistic_oracle(moons)
        with pytest.raises(InvalidInputError):
            oracle.loss(ParamVector.zeros(oracle.layout()), moons.take([]))

    def test_batch_order_does_not_matter(self, moons, rng):
        """Test that permuting a batch leaves the loss unchanged."""
        oracle = logistic_oracle(moons, 0.01)
        w = ParamVector(rng.standard_normal(oracle.layout().total_length), oracle.layout())
        batch = moons.take(np.arange(40))
        shuffled = moons.take(rng.permutation(40))
        assert oracle.loss(w, batch) == oracle.loss(w, shuffled), "Loss should not depend on row order"


class TestTwoMoons:
    """Test two-moons generation."""

    def test_noise_free_points_on_templates(self):
        """Test that noise-free points lie on the two half circles."""
        data = make_two_moons(4, 0.0, seed=0)
        for (x, y), label in zip(data.inputs, data.labels):
            if label == 0:
                assert x * x + y * y == pytest.approx(1.0) and y >= -1e-12
            else:
                assert (x - 1) ** 2 + (y - 0.5) ** 2 == pytest.approx(1.0) and y <= 0.5 + 1e-12

    def test_deterministic(self):
        """Test that the same seed gives the same dataset."""
        a, b = make_two_moons(300, 0.2, seed=3), make_two_moons(300, 0.2, seed=3)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.labels, b.labels)

    @pytest.mark.parametrize("n", [2, 7, 1000])
    def test_balanced(self, n):
        """Test that classes differ in size by at most one."""
        counts = np.bincount(make_two_moons(n, 0.1, seed=1).labels, minlength=2)
        assert abs(counts[0] - counts[1]) <= 1, f"Unbalanced classes {counts}"

    def test_invalid_arguments(self):
        """Test that n < 2 and negative noise are rejected."""
        with pytest.raises(InvalidInputError):
            make_two_moons(1, 0.1, seed=0)
        with pytest.raises(InvalidInputError):
            make_two_moons(10, -0.1, seed=0)


class TestLabelNoise:
    """Test symmetric label flips."""

    def test_zero_rate_is_identity(self, moons):
        """Test that rate 0 leaves every label alone."""
        noisy = inject_label_noise(moons, 0.0, seed=1)
        assert np.array_equal(noisy.labels, moons.labels)

    def test_full_rate_flips_everything(self, moons):
        """Test that rate 1 flips every binary label."""
        noisy = inject_label_noise(moons, 1.0, seed=1)
        assert np.array_equal(noisy.labels, 1 - moons.labels)
        assert noisy.noise_rate == 1.0

    def test_exact_count(self):
        """Test that 40% noise on 1000 rows flips exactly 400 labels."""
        clean = make_two_moons(1000, 0.2, seed=7)
        noisy = inject_label_noise(clean, 0.4, seed=11)
        assert int(np.sum(noisy.labels != clean.labels)) == 400, "Exactly round(0.4 * 1000) labels should flip"

    def test_multiclass_flips_to_other_classes(self, rng):
        """Test that multiclass flips stay in range and hit the exact count."""
        data = Dataset(rng.standard_normal((300, 2)), rng.integers(0, 4, 300), n_classes=4)
        noisy = inject_label_noise(data, 0.5, seed=2)
        changed = noisy.labels != data.labels
        assert changed.sum() == 150
        assert noisy.labels.max() < 4

    @pytest.mark.parametrize("rate", [-0.1, 1.5])
    def test_rate_out_of_range(self, moons, rate):
        """Test that rates outside [0, 1] are rejected."""
        with pytest.raises(InvalidInputError):
            inject_label_noise(moons, rate, seed=0)


class TestDatasetCsv:
    """Test CSV export and import."""

    def test_header_and_values(self, moons, tmp_path):
        """Test the CSV header and an exact round trip of values."""
        path = save_dataset_csv(moons, tmp_path / "moons.csv")
        with open(path) as f:
            assert f.readline().strip() == "x0,x1,label", "Unexpected CSV header"
        loaded = load_dataset_csv(path)
        assert np.array_equal(loaded.inputs, moons.inputs)
        assert np.array_equal(loaded.labels, moons.labels)
