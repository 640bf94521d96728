"""
Command-line entry point.

    python -m train train --config configs/two_moons_arsam.toml [--set optimizer.eta=0.1]
    python -m train verify [--quick] [--report artifacts/verify.json]
    python -m train predict-speedup --iters 1000 --segment 50 --s0 1 --alpha 0.4 --gamma 0
    python -m train sweep --config configs/two_moons_arsam.toml --alpha 0.1,0.2,0.3,0.4,0.5
    python -m train compare --config configs/two_moons_arsam.toml --variants sgd,sam,arsam,arsam_a --seeds 0,1,2,3,4

Exit status: 0 on success, 1 on a failed check or aborted run, 2 on usage
or configuration errors.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from arsam.exceptions import ConfigError, InvalidInputError
from arsam.scheduler import predict_speedup
from arsam.verify import run_suite, write_report
from train.config import default_log_level, load_config, output_dir
from train.main_loop import run_compare, run_sweep, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _csv_floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _csv_ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _csv_words(text: str) -> List[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m train", description="SGD / SAM / ARSAM experiments")
    parser.add_argument("--log-level", default=default_log_level(),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="TOML run config (defaults when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config value")

    p_train = sub.add_parser("train", help="run one configured training job")
    add_config_args(p_train)

    p_verify = sub.add_parser("verify", help="run the verification suite")
    p_verify.add_argument("--seed", type=int, default=1)
    p_verify.add_argument("--quick", action="store_true", help="reduced trial counts")
    p_verify.add_argument("--workers", type=int, default=1)
    p_verify.add_argument("--report", help="JSON report path (default: <output dir>/verify.json)")

    p_speed = sub.add_parser("predict-speedup", help="expected SAM-step count and speed ratio")
    p_speed.add_argument("--iters", type=int, required=True)
    p_speed.add_argument("--segment", type=int, default=50)
    p_speed.add_argument("--s0", type=float, default=1.0)
    p_speed.add_argument("--alpha", type=float, default=0.4)
    p_speed.add_argument("--gamma", type=float, required=True)

    p_sweep = sub.add_parser("sweep", help="grid over alpha, one summary row per cell")
    add_config_args(p_sweep)
    p_sweep.add_argument("--alpha", type=_csv_floats, required=True)
    p_sweep.add_argument("--seeds", type=_csv_ints, default=None)
    p_sweep.add_argument("--output", help="CSV of sweep rows (default: <output dir>/sweep.csv)")

    p_compare = sub.add_parser("compare", help="variants x seeds accuracy / %%SAM / AIS table")
    add_config_args(p_compare)
    p_compare.add_argument("--variants", type=_csv_words, default=["sgd", "sam", "arsam", "arsam_a"])
    p_compare.add_argument("--seeds", type=_csv_ints, default=[0, 1, 2, 3, 4])
    p_compare.add_argument("--output", help="CSV of per-run rows (default: <output dir>/compare.csv)")
    return parser


def _banner(title: str):
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)


def cmd_train(args) -> int:
    config = load_config(args.config, args.overrides)
    _banner(f"Training: {config.optimizer.variant} on {config.objective.kind}")
    result = train(config)
    s = result.summary
    marker = "✓" if s.completed else "✗"
    print(f"{marker} {s.iterations_completed}/{s.iterations_planned} iterations")
    if s.test_accuracy is not None:
        print(f"  - Train accuracy: {s.train_accuracy:.2f}%")
        print(f"  - Test accuracy:  {s.test_accuracy:.2f}%")
    print(f"  - %SAM:           {s.pct_sam:.2f}")
    print(f"  - AIS:            {s.ais:.1f} images/s")
    print(f"  - Grad evals:     {s.grad_evals_total}")
    print(f"  - Summary:        {config.telemetry.resolve('summary_path')}")
    print(f"  - Telemetry:      {config.telemetry.resolve('telemetry_path')}")
    if not s.completed:
        print(f"✗ Run aborted: {s.error}")
        return EXIT_FAILED
    return EXIT_OK


def cmd_verify(args) -> int:
    _banner("Verification suite")
    reports = run_suite(seed=args.seed, quick=args.quick, workers=args.workers)
    for report in reports:
        print(report.line())
    path = write_report(reports, args.report or output_dir() / "verify.json")
    passed = all(r.passed for r in reports)
    print(f"\n{'✓ All checks passed' if passed else '✗ Verification failed'} (report: {path})")
    return EXIT_OK if passed else EXIT_FAILED


def cmd_predict_speedup(args) -> int:
    prediction = predict_speedup(args.iters, args.segment, args.s0, args.alpha, args.gamma)
    print(f"s*={prediction.s_star:g}")
    print(f"v={prediction.v:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = load_config(args.config, args.overrides)
    _banner(f"Alpha sweep: {', '.join(f'{a:g}' for a in args.alpha)}")
    rows = run_sweep(config, args.alpha, args.seeds)
    path = Path(args.output) if args.output else output_dir() / "sweep.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    rows.to_csv(path, index=False)
    print(rows[["alpha", "seed", "test_accuracy", "pct_sam", "grad_evals_total", "ais"]].to_string(index=False))
    print(f"\n✓ Sweep rows written to {path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    config = load_config(args.config, args.overrides)
    _banner(f"Comparison: {', '.join(args.variants)} over seeds {args.seeds}")
    runs, table = run_compare(config, args.variants, args.seeds)
    path = Path(args.output) if args.output else output_dir() / "compare.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    runs.to_csv(path, index=False)
    print(table.to_string(index=False, float_format=lambda x: f"{x:.4f}"))
    print(f"\n✓ Per-run rows written to {path}")
    return EXIT_OK if runs["completed"].all() else EXIT_FAILED


COMMANDS = {
    "train": cmd_train,
    "verify": cmd_verify,
    "predict-speedup": cmd_predict_speedup,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidInputError) as e:
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_USAGE
