import csv
import logging
import os
from typing import Any, Dict, List, Sequence

import yaml

try:
    from .estimator import EstimateKey, ModuleCost
    from .metrics import MetricsReport, SimTrace, histogram, percentile_label
except ImportError:
    from estimator import EstimateKey, ModuleCost
    from metrics import MetricsReport, SimTrace, histogram, percentile_label

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def _ensure_parent(output_path: str) -> None:
    parent = os.path.dirname(output_path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def format_estimate_table(key: EstimateKey, costs: List[ModuleCost], per_layer_ms: float,
                          step_ms: float, total_ms: float, num_layers: int) -> str:
    """
    Renders a per-module breakdown of one Transformer block, all times in ms
    with 3 decimals, followed by the total over all layers.
    """
    phase = getattr(key.phase, "value", key.phase)
    lines = [
        f"Phase: {phase}  batch={key.batch}  seq_len={key.seq}  gen_len={key.gen}  tp={key.tp}",
        f"{'Module':<12}{'Dispatch':>10}{'Compute':>10}{'Communicate':>13}",
    ]
    for cost in costs:
        lines.append(f"{cost.module.value:<12}{cost.dispatch_ms:>10.3f}"
                     f"{cost.compute_ms:>10.3f}{cost.comm_ms:>13.3f}")
    lines.append(f"Per layer: {per_layer_ms:.3f}ms x {num_layers} layers")
    if phase == "decode":
        lines.append(f"Per step: {step_ms:.3f}ms x {key.gen} tokens")
    lines.append(f"Total time: {total_ms:.3f}ms")
    return "\n".join(lines)


def write_report(report: Dict[str, Any], output_path: str) -> bool:
    """
    Writes a structured (YAML) report headed by its schema version.

    Returns:
        True if the file was written successfully, False otherwise.
    """
    logger.info(f"Writing report to: {output_path}")
    document = {"schema_version": SCHEMA_VERSION, **report}
    try:
        _ensure_parent(output_path)
        with open(output_path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(document, f, sort_keys=False, default_flow_style=False)
        return True
    except (IOError, OSError) as e:
        logger.error(f"Failed to write report to {output_path}: {e}")
        return False
    except Exception as e:
        logger.exception(f"An unexpected error occurred while writing the report: {e}")
        return False


def write_csv(header: Sequence[str], rows: Sequence[Sequence[Any]], output_path: str) -> bool:
    """Writes delimited rows preceded by a '# schema_version' comment line."""
    try:
        _ensure_parent(output_path)
        with open(output_path, 'w', encoding='utf-8', newline='') as f:
            f.write(f"# schema_version: {SCHEMA_VERSION}\n")
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
        logger.info(f"CSV file saved to: {output_path}")
        return True
    except (IOError, OSError) as e:
        logger.error(f"Failed to write CSV file to {output_path}: {e}")
        return False
    except Exception as e:
        logger.exception(f"An unexpected error occurred while writing {output_path}: {e}")
        return False


def write_trace(trace: SimTrace, gen_len: int, output_path: str) -> bool:
    ttft = trace.ttft()
    tpot = trace.tpot(gen_len)
    rows = [
        (i, f"{trace.arrivals[i]:.6f}", f"{trace.prefill_departures[i]:.6f}",
         f"{trace.decode_departures[i]:.6f}", f"{ttft[i]:.6f}", f"{tpot[i]:.6f}")
        for i in range(len(trace))
    ]
    header = ("request_id", "arrival_ms", "prefill_departure_ms", "decode_departure_ms",
              "ttft_ms", "tpot_ms")
    return write_csv(header, rows, output_path)


def write_histograms(trace: SimTrace, gen_len: int, report: MetricsReport,
                     slo_goals: Dict[str, float], output_dir: str, bins: int = 50) -> List[str]:
    """
    Writes TTFT/TPOT frequency bins and the percentile/SLO marker values.

    Args:
        slo_goals: {'ttft': goal_ms, 'tpot': goal_ms}.

    Returns:
        Paths of the files that failed to write (empty on success).
    """
    failed = []
    series = {"ttft": trace.ttft(), "tpot": trace.tpot(gen_len)}
    for metric, values in series.items():
        path = os.path.join(output_dir, f"{metric}_hist.csv")
        rows = [(f"{left:.6f}", f"{right:.6f}", count)
                for left, right, count in histogram(values, bins)]
        if not write_csv(("bin_left_ms", "bin_right_ms", "count"), rows, path):
            failed.append(path)

    percentiles = sorted(report.ttft)
    header = ["metric"] + [f"{percentile_label(p)}_ms" for p in percentiles] + ["slo_ms"]
    markers = [
        ["ttft"] + [f"{report.ttft[p]:.6f}" for p in percentiles] + [slo_goals["ttft"]],
        ["tpot"] + [f"{report.tpot[p]:.6f}" for p in percentiles] + [slo_goals["tpot"]],
    ]
    path = os.path.join(output_dir, "markers.csv")
    if not write_csv(header, markers, path):
        failed.append(path)
    return failed
