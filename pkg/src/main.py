import argparse
import os
import logging
import sys
from dotenv import load_dotenv
from typing import List, Optional

try:
    from .config import ConfigError, PlannerConfig, load_config
    from .estimator import EstimateKey, Phase
    from .pipeline import run_estimate, run_optimize, run_simulation, run_sweep
    from .strategy import ServingStrategy
except ImportError:
    # Fallback for running the script directly
    from config import ConfigError, PlannerConfig, load_config
    from estimator import EstimateKey, Phase
    from pipeline import run_estimate, run_optimize, run_simulation, run_sweep
    from strategy import ServingStrategy


# Configure logging
def setup_logging(level=logging.INFO):
    """Configures logging handlers for stdout (INFO) and stderr (WARNING+)."""
    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # Remove existing handlers attached to the root logger
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    log_formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    # Handler for INFO level -> stdout
    stdout_handler = logging.StreamHandler(sys.stdout)
    stdout_handler.setLevel(logging.DEBUG if level <= logging.DEBUG else logging.INFO)
    stdout_handler.addFilter(lambda record: record.levelno <= logging.INFO) # DEBUG and INFO only
    stdout_handler.setFormatter(log_formatter)
    root_logger.addHandler(stdout_handler)

    # Handler for WARNING and above -> stderr
    stderr_handler = logging.StreamHandler(sys.stderr)
    stderr_handler.setLevel(logging.WARNING) # Catch WARNING, ERROR, CRITICAL
    stderr_handler.setFormatter(log_formatter)
    root_logger.addHandler(stderr_handler)

# Initial setup
setup_logging()
logger = logging.getLogger("GoodputPlanner")


# --- Constants ---
DEFAULT_CONFIG_PATH = "configs/codellama34b_ascend910b3.yaml"
DEFAULT_OUTPUT_DIR = "results"

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3


def parse_rate_grid(text: str) -> List[float]:
    """
    Parses 'a:b:step' (inclusive of b) or a comma-separated list of rates.

    Raises:
        ValueError: on malformed input, non-positive rates or an empty grid.
    """
    text = (text or "").strip()
    if not text:
        raise ValueError("Rate grid is empty")
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"Rate range must look like 'start:stop:step' (got '{text}')")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ValueError(f"Rate step must be > 0 (got {step})")
        if stop < start:
            raise ValueError(f"Rate range is empty (got '{text}')")
        count = int(round((stop - start) / step, 9)) + 1
        rates = [round(start + i * step, 9) for i in range(count)]
    else:
        rates = [float(p) for p in text.split(",") if p.strip()]
    if not rates:
        raise ValueError("Rate grid is empty")
    if any(rate <= 0 for rate in rates):
        raise ValueError(f"Rates must be > 0 (got {rates})")
    return rates


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Predict the SLO-compliant goodput of LLM serving strategies by simulation.")
    parser.add_argument(
        "--config",
        default=os.getenv("GOODPUT_PLANNER_CONFIG", DEFAULT_CONFIG_PATH),
        help=f"Planner configuration file (default: {DEFAULT_CONFIG_PATH})"
    )
    parser.add_argument(
        "--seed",
        type=int,
        help="Override scenario.rng_seed from the config file (optional)"
    )
    parser.add_argument(
        "--out-dir",
        default=os.getenv("GOODPUT_PLANNER_OUT_DIR", DEFAULT_OUTPUT_DIR),
        help=f"Directory for reports and data files (default: {DEFAULT_OUTPUT_DIR})"
    )
    parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help="Worker processes for strategy evaluation (default: tuning.workers from the config)"
    )
    parser.add_argument(
        "--verbose",
        action='store_true',
        help="Enable verbose logging for debugging"
    )

    subparsers = parser.add_subparsers(dest="command", required=True)

    estimate = subparsers.add_parser("estimate", help="Per-module time breakdown of one batch")
    estimate.add_argument("--phase", choices=[p.value for p in Phase], default="prefill",
                          help="Inference phase (default: prefill)")
    estimate.add_argument("--batch", type=int, default=1, help="Batch size (default: 1)")
    estimate.add_argument("--tp", type=int, default=1, help="Tensor parallel size (default: 1)")

    def add_lengths(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--seq-len", type=int, help="Override scenario.seq_len (optional)")
        sub.add_argument("--gen-len", type=int, help="Override scenario.gen_len (optional)")

    def add_run_overrides(sub: argparse.ArgumentParser) -> None:
        add_lengths(sub)
        sub.add_argument("--num-requests", type=int, help="Override scenario.num_requests (optional)")
        sub.add_argument("--repetitions", type=int, help="Override scenario.repetitions (optional)")

    def add_strategy_args(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--arch", required=True, help="Serving architecture, e.g. '2m' or '1p1d'")
        sub.add_argument("--tp", type=int,
                         help="Tensor parallel size (default: smallest of search.tp_sizes)")
        add_run_overrides(sub)

    add_lengths(estimate)

    simulate = subparsers.add_parser("simulate", help="Simulate one strategy at one arrival rate")
    add_strategy_args(simulate)
    simulate.add_argument("--rate", type=float, help="Override scenario.arrival_rate (optional)")
    simulate.add_argument("--emit-hist", action='store_true',
                          help="Write TTFT/TPOT histogram bins and percentile markers")
    simulate.add_argument("--emit-trace", action='store_true',
                          help="Write the per-request trace")

    sweep = subparsers.add_parser("sweep", help="Percentile latencies across arrival rates")
    add_strategy_args(sweep)
    sweep.add_argument("--rates", required=True,
                       help="Rate grid as 'start:stop:step' or a comma-separated list")

    optimize = subparsers.add_parser("optimize", help="Rank all strategies by goodput")
    optimize.add_argument("--arch-filter", choices=["all", "collocation", "disaggregation"],
                          default="all", help="Restrict the enumeration (default: all)")
    optimize.add_argument("--epsilon", type=float,
                          help="Bisection tolerance in req/s (default: tuning.epsilon)")
    add_run_overrides(optimize)
    return parser


def _apply_overrides(config: PlannerConfig, args: argparse.Namespace) -> PlannerConfig:
    return config.with_scenario(
        seq_len=getattr(args, "seq_len", None),
        gen_len=getattr(args, "gen_len", None),
        num_requests=getattr(args, "num_requests", None),
        repetitions=getattr(args, "repetitions", None),
        arrival_rate=getattr(args, "rate", None),
    )


def _strategy(config: PlannerConfig, args: argparse.Namespace) -> ServingStrategy:
    tp = args.tp if args.tp is not None else min(config.search.tp_sizes)
    return ServingStrategy.parse(args.arch, tp, config.search.max_batch_prefill,
                                 config.search.max_batch_decode)


def _finish(failed_files: List[str]) -> int:
    if failed_files:
        for path in failed_files:
            logger.error(f"Failed to write: {path}")
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Parses arguments, runs the requested command and returns the exit code."""
    # Load environment variables from .env file
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.verbose:
        # Reconfigure logging level if verbose is enabled
        setup_logging(logging.DEBUG)
        logger.info("Verbose logging enabled.")

    # --- Configuration ---
    try:
        config = _apply_overrides(load_config(args.config, seed=args.seed), args)
        strategy = _strategy(config, args) if args.command in ("simulate", "sweep") else None
        rates = parse_rate_grid(args.rates) if args.command == "sweep" else None
        workers = args.workers
        if workers is None:
            workers = int(os.getenv("GOODPUT_PLANNER_WORKERS", config.tuning.workers))
        if workers < 1:
            raise ConfigError(f"--workers must be >= 1 (got {workers})")
    except (ConfigError, ValueError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR

    # --- Directory Setup ---
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        logger.info(f"Output directory set to: {args.out_dir}")
    except OSError as e:
        logger.error(f"Failed to create output directory: {e}")
        return EXIT_RUNTIME_ERROR

    try:
        if args.command == "estimate":
            key = EstimateKey(args.batch, config.scenario.seq_len, config.scenario.gen_len,
                              args.tp, Phase(args.phase))
            key.validate()
            result = run_estimate(config, key)
            print(result["table"])
            return EXIT_OK

        if args.command == "simulate":
            result = run_simulation(config, strategy, args.out_dir, args.emit_hist, args.emit_trace)
            report = result["report"]
            logger.info("=" * 20 + " Simulation Summary " + "=" * 20)
            logger.info(f"Strategy: {strategy.label} at {config.scenario.arrival_rate} req/s")
            for p in sorted(report.ttft):
                logger.info(f"P{p * 100:g} TTFT: {report.ttft[p]:.3f} ms | "
                            f"P{p * 100:g} TPOT: {report.tpot[p]:.3f} ms")
            logger.info(f"SLO: TTFT {config.slo.ttft_goal} ms | TPOT {config.slo.tpot_goal} ms")
            logger.info("=" * 60)
            return _finish(result["failed_files"])

        if args.command == "sweep":
            result = run_sweep(config, strategy, rates, args.out_dir)
            logger.info("=" * 20 + " Sweep Summary " + "=" * 20)
            for rate, ttft, tpot in result["rows"]:
                logger.info(f"{rate:g} req/s: TTFT {ttft:.3f} ms | TPOT {tpot:.3f} ms")
            logger.info("=" * 55)
            return _finish(result["failed_files"])

        result = run_optimize(config, args.out_dir, args.arch_filter, args.epsilon, workers)
        logger.info("=" * 20 + " Optimize Summary " + "=" * 20)
        for position, item in enumerate(result["ranked"], start=1):
            flag = "  (infeasible at floor rate)" if item.infeasible_at_floor else ""
            logger.info(f"{position:>3}. {item.strategy.label:<12} goodput {item.goodput:.4f} req/s | "
                        f"normalized {item.normalized:.4f} req/s/accelerator{flag}")
        logger.info("=" * 58)
        return _finish(result["failed_files"])
    except ValueError as e:
        logger.error(f"Invalid request: {e}")
        return EXIT_CONFIG_ERROR
    except Exception as e:
        logger.exception(f"An unexpected error occurred: {e}")
        return EXIT_RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
