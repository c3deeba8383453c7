import logging
import os
from typing import Any, Dict, List, Optional

try:
    from .config import PlannerConfig
    from .estimator import EstimateKey, Estimator, layer_time
    from .formatter import format_estimate_table, write_csv, write_histograms, write_report, write_trace
    from .metrics import percentile_label
    from .optimizer import enumerate_strategies, evaluate_strategies, rank
    from .runner import SimulationRunner
    from .strategy import ServingStrategy
except ImportError:
    from config import PlannerConfig
    from estimator import EstimateKey, Estimator, layer_time
    from formatter import format_estimate_table, write_csv, write_histograms, write_report, write_trace
    from metrics import percentile_label
    from optimizer import enumerate_strategies, evaluate_strategies, rank
    from runner import SimulationRunner
    from strategy import ServingStrategy

logger = logging.getLogger("GoodputPlanner.Pipeline") # Use a child logger

TOOL_VERSION = "0.1.0"


def _report_header(config: PlannerConfig, command: str) -> Dict[str, Any]:
    return {
        "tool_version": TOOL_VERSION,
        "command": command,
        "seed": config.scenario.rng_seed,
        "config": config.to_dict(),
    }


def _write_all(jobs: List[tuple]) -> Dict[str, List[str]]:
    """Runs (path, writer, args) jobs and sorts paths into written/failed."""
    written, failed = [], []
    for path, writer, args in jobs:
        if writer(*args, path):
            written.append(path)
        else:
            failed.append(path)
    return {"files_written": written, "failed_files": failed}


def run_estimate(config: PlannerConfig, key: EstimateKey) -> Dict[str, Any]:
    """
    Per-module breakdown of one batch through the estimator.

    Returns:
        {'key', 'modules', 'per_layer_ms', 'step_ms', 'total_ms', 'table'}
    """
    estimator = Estimator(config.model, config.hardware, config.efficiency)
    costs = estimator.breakdown(key)
    per_layer_ms = layer_time(costs)
    step_ms = estimator.step_time(key)
    total_ms = estimator.estimate_time(key)
    table = format_estimate_table(key, costs, per_layer_ms, step_ms, total_ms, config.model.num_layers)
    return {
        "key": key,
        "modules": costs,
        "per_layer_ms": per_layer_ms,
        "step_ms": step_ms,
        "total_ms": total_ms,
        "table": table,
    }


def run_simulation(config: PlannerConfig, strategy: ServingStrategy, output_dir: str,
                   emit_hist: bool = False, emit_trace: bool = False) -> Dict[str, Any]:
    """
    Simulates one strategy under the configured scenario and writes its report.

    Returns:
        {'report': MetricsReport, 'files_written': [...], 'failed_files': [...]}
    """
    scenario = config.scenario
    logger.info(f"Simulating {strategy.label} at {scenario.arrival_rate} req/s "
                f"({scenario.num_requests} requests x {scenario.repetitions} run(s)).")
    outcome = SimulationRunner(config).run(strategy)
    report = outcome.report

    document = _report_header(config, "simulate")
    document["strategy"] = strategy.label
    document["metrics"] = report.to_dict()
    jobs = [(os.path.join(output_dir, "simulate_report.yaml"), write_report, (document,))]
    if emit_trace:
        jobs.append((os.path.join(output_dir, "trace.csv"), write_trace,
                     (outcome.trace, scenario.gen_len)))
    results = _write_all(jobs)

    if emit_hist:
        goals = {"ttft": config.slo.ttft_goal, "tpot": config.slo.tpot_goal}
        failed = write_histograms(outcome.trace, scenario.gen_len, report, goals, output_dir,
                                  config.tuning.histogram_bins)
        for name in ("ttft_hist.csv", "tpot_hist.csv", "markers.csv"):
            path = os.path.join(output_dir, name)
            (results["failed_files"] if path in failed else results["files_written"]).append(path)

    return {"report": report, **results}


def run_sweep(config: PlannerConfig, strategy: ServingStrategy, rates: List[float],
              output_dir: str) -> Dict[str, Any]:
    """
    Percentile TTFT/TPOT of one strategy across a grid of arrival rates.

    Returns:
        {'rows': [(rate, ttft, tpot), ...], 'files_written': [...], 'failed_files': [...]}
    """
    if not rates:
        raise ValueError("Rate grid is empty")
    runner = SimulationRunner(config)
    percentile = config.slo.percentile
    rows = []
    for index, rate in enumerate(rates):
        logger.info(f"--- Sweep point {index + 1}/{len(rates)}: {rate} req/s ---")
        report = runner.run_at_rate(strategy, rate).report
        rows.append((rate, report.ttft_at(percentile), report.tpot_at(percentile)))

    label = percentile_label(percentile)
    csv_rows = [(f"{rate:g}", f"{ttft:.6f}", f"{tpot:.6f}") for rate, ttft, tpot in rows]
    document = _report_header(config, "sweep")
    document["strategy"] = strategy.label
    document["points"] = [{"rate": rate, f"{label}_ttft_ms": ttft, f"{label}_tpot_ms": tpot}
                          for rate, ttft, tpot in rows]
    results = _write_all([
        (os.path.join(output_dir, "sweep.csv"), write_csv,
         (("rate", f"{label}_ttft_ms", f"{label}_tpot_ms"), csv_rows)),
        (os.path.join(output_dir, "sweep_report.yaml"), write_report, (document,)),
    ])
    return {"rows": rows, **results}


def run_optimize(config: PlannerConfig, output_dir: str, arch_filter: str = "all",
                 epsilon: Optional[float] = None, workers: Optional[int] = None) -> Dict[str, Any]:
    """
    Enumerates strategies, finds each goodput and ranks them.

    Returns:
        {'ranked': [GoodputResult, ...], 'files_written': [...], 'failed_files': [...]}
    """
    strategies = enumerate_strategies(config.search, arch_filter)
    workers = config.tuning.workers if workers is None else workers
    logger.info(f"Pipeline started for {len(strategies)} strategies.")
    results = evaluate_strategies(strategies, config, workers, epsilon)
    ranked = rank(results)

    for result in ranked:
        if result.infeasible_at_floor:
            logger.warning(f"Strategy {result.strategy.label} violates the SLO even at "
                           f"{config.tuning.lower_rate} req/s.")

    document = _report_header(config, "optimize")
    document["epsilon"] = config.tuning.epsilon if epsilon is None else epsilon
    document["ranking"] = [result.to_dict() for result in ranked]
    csv_rows = [(position + 1, r.strategy.name, r.strategy.tp, f"{r.goodput:.6f}",
                 f"{r.normalized:.6f}", r.accelerators_used, r.infeasible_at_floor)
                for position, r in enumerate(ranked)]
    files = _write_all([
        (os.path.join(output_dir, "optimize.csv"), write_csv,
         (("rank", "strategy", "tp", "goodput", "normalized_goodput", "accelerators_used",
           "infeasible_at_floor"), csv_rows)),
        (os.path.join(output_dir, "optimize_report.yaml"), write_report, (document,)),
    ])
    logger.info(f"Pipeline finished. Evaluated: {len(ranked)} strategies.")
    return {"ranked": ranked, **files}
