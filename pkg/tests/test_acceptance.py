"""Full-size checks: the verification suite and the two-moons training runs."""
from pathlib import Path

import numpy as np
import pytest

from arsam.autodiff import load_checkpoint
from arsam.datasets import make_two_moons
from arsam.verify import run_suite
from train.config import build_config, load_config
from train.evaluate import evaluate_accuracy
from train.main_loop import run_compare, run_sweep, train

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

pytestmark = pytest.mark.slow


def two_moons(**sections):
    data = {
        "seed": 0,
        "iterations": 600,
        "batch_size": 64,
        "objective": {"kind": "mlp", "hidden": [32, 32]},
        "data": {"n": 1000, "noise_std": 0.2},
        "optimizer": {"variant": "arsam", "eta": 0.05, "rho": 0.05},
        "schedule": {"segment_length": 50, "alpha": 0.4},
        "telemetry": {"clock": "logical"},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return build_config(data)


class TestVerificationSuite:
    """Every check at acceptance size."""

    def test_suite_passes(self):
        """Test that no check fails and none is entirely inconclusive."""
        reports = run_suite(seed=1)
        for report in reports:
            assert report.passed, report.line() + " " + report.details
            assert report.status == "PASS", report.line()


class TestTwoMoons:
    """Two-moons MLP runs."""

    def test_sam_equals_arsam_with_p_one(self):
        """Test that forcing p=1 reproduces SAM bitwise."""
        sam = train(two_moons(optimizer={"variant": "sam"},
                              telemetry={"telemetry_path": "sam.csv", "summary_path": "sam.json"}))
        arsam = train(two_moons(schedule={"fixed_p": 1.0}))
        assert [r.loss for r in sam.records] == [r.loss for r in arsam.records]
        assert sam.summary.test_accuracy == arsam.summary.test_accuracy
        assert np.array_equal(sam.final_w.values, arsam.final_w.values)

    def test_arsam_learns_and_saves_passes(self):
        """Test that ARSAM reaches SAM-level accuracy with fewer gradient passes."""
        sam = train(two_moons(optimizer={"variant": "sam"},
                              telemetry={"telemetry_path": "sam.csv", "summary_path": "sam.json"}))
        arsam = train(two_moons())
        assert arsam.summary.test_accuracy >= 90.0, "Two moons should be learnt"
        assert arsam.summary.test_accuracy >= sam.summary.test_accuracy - 3.0
        assert arsam.summary.pct_sam < 100.0
        assert arsam.summary.grad_evals_total < sam.summary.grad_evals_total

    def test_alpha_sweep_pct_sam_is_monotone(self):
        """Test that realised %SAM does not decrease as alpha grows on a fixed seed."""
        rows = run_sweep(load_config(str(CONFIG_DIR / "two_moons_arsam.toml")), [0.1, 0.2, 0.3, 0.4, 0.5])
        assert len(rows) == 5
        assert rows["completed"].all(), "Every sweep cell should complete"
        assert rows["pct_sam"].is_monotonic_increasing, f"%SAM by alpha: {rows['pct_sam'].tolist()}"
        assert rows["predicted_speed_ratio_vs_sam"].between(1.0, 2.0).all()

    def test_wall_clock_ratio_tracks_prediction(self):
        """Test the SAM/ARSAM wall-clock ratio against 2I / (I + #SAM) with large batches."""
        config = two_moons(batch_size=512, iterations=400, telemetry={"clock": "wall"})
        _, table = run_compare(config, ["sam", "arsam"], [0])
        arsam = table.set_index("variant").loc["arsam"]
        predicted = arsam["predicted_speed_ratio_mean"]
        measured = arsam["speed_ratio_vs_sam"]
        assert measured > 1.0, "ARSAM should run faster than SAM"
        assert abs(measured - predicted) <= 0.15 * predicted, f"measured {measured:.3f} vs predicted {predicted:.3f}"
        assert abs(arsam["ais_vs_sam"] - measured) <= 0.05 * measured, "AIS ratio should follow the wall-clock ratio"


class TestVariantComparison:
    """Five-seed comparisons at desk scale."""

    def test_generalization_parity(self):
        """Test ARSAM against SAM: accuracy within 1 point with far fewer SAM steps."""
        config = two_moons(iterations=4000)
        runs, table = run_compare(config, ["sam", "arsam"], [0, 1, 2, 3, 4])
        assert runs["completed"].all()
        table = table.set_index("variant")
        gap = table.loc["sam", "test_accuracy_mean"] - table.loc["arsam", "test_accuracy_mean"]
        assert gap <= 1.0, f"ARSAM trails SAM by {gap:.2f} points"
        assert table.loc["arsam", "pct_sam_mean"] <= 60.0
        assert table.loc["arsam", "grad_evals_vs_sam"] <= 0.85

    def test_label_noise_direction(self):
        """Test that ARSAM is at least as robust as SGD to 40% label noise."""
        config = two_moons(iterations=4000, data={"label_noise": 0.4}, optimizer={"rho": 0.1})
        runs, table = run_compare(config, ["sgd", "arsam"], [0, 1, 2, 3, 4])
        table = table.set_index("variant")
        assert table.loc["arsam", "test_accuracy_mean"] >= table.loc["sgd", "test_accuracy_mean"]


class TestReferenceSGD:
    """Plain SGD on the seed-7 two-moons set, the accuracy regression anchor."""

    @staticmethod
    def reference_config():
        return two_moons(
            iterations=2000,
            data={"seed": 7},
            optimizer={"variant": "sgd", "eta": 0.1, "momentum": 0.0, "weight_decay": 0.0},
        )

    def test_sgd_fits_two_moons(self):
        """Test that a two-hidden-layer MLP reaches 95% train accuracy within 2000 SGD steps."""
        result = train(self.reference_config())
        s = result.summary
        assert s.completed, "Reference run should complete"
        assert s.iterations_completed == 2000
        assert s.train_accuracy >= 95.0, f"Train accuracy {s.train_accuracy:.2f}% is below the floor"

    def test_accuracy_on_full_clean_set(self):
        """Test evaluate_accuracy on all 1000 clean rows against the split accuracies and a rerun."""
        result = train(self.reference_config())
        s = result.summary
        w, spec, _ = load_checkpoint(s.checkpoint_path)
        full = make_two_moons(1000, 0.2, seed=7)

        accuracy = evaluate_accuracy(spec, w, full)
        assert accuracy >= 95.0, f"Clean accuracy {accuracy:.2f}% is below the floor"
        assert accuracy == pytest.approx((800 * s.train_accuracy + 200 * s.test_accuracy) / 1000), \
            "Full-set accuracy should be the row-weighted mean of the two splits"

        rerun = train(self.reference_config())
        assert evaluate_accuracy(spec, rerun.final_w, full) == accuracy, "Anchor should be reproducible"
