import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional

try:
    from .collocation import simulate_collocation
    from .config import PlannerConfig, Scenario, Tuning
    from .disagg import simulate_disagg
    from .estimator import Estimator, TimeEstimator
    from .metrics import MetricsReport, SimTrace, average_reports, compute_metrics, percentile_label
    from .strategy import ServingStrategy
except ImportError:
    from collocation import simulate_collocation
    from config import PlannerConfig, Scenario, Tuning
    from disagg import simulate_disagg
    from estimator import Estimator, TimeEstimator
    from metrics import MetricsReport, SimTrace, average_reports, compute_metrics, percentile_label
    from strategy import ServingStrategy

logger = logging.getLogger(__name__)


def simulate(strategy: ServingStrategy, scenario: Scenario, estimator: TimeEstimator,
             seed: Optional[int] = None, tuning: Tuning = Tuning()) -> SimTrace:
    """Dispatches to the simulator matching the strategy's architecture."""
    if strategy.is_collocation:
        return simulate_collocation(strategy, scenario, estimator, seed, tuning.pseudo_batch_tau)
    return simulate_disagg(strategy, scenario, estimator, seed, tuning.pseudo_batch_tau)


@dataclass(frozen=True)
class SimulationOutcome:
    report: MetricsReport
    # Trace of the first repetition, kept for trace and histogram export
    trace: SimTrace


class SimulationRunner:
    """Runs a strategy under a scenario, averaging percentiles over repetitions."""

    def __init__(self, config: PlannerConfig, estimator: Optional[TimeEstimator] = None):
        self.config = config
        self.estimator = estimator or Estimator(config.model, config.hardware, config.efficiency)

    @property
    def percentiles(self) -> List[float]:
        return sorted(set(self.config.tuning.percentiles) | {self.config.slo.percentile})

    def run(self, strategy: ServingStrategy, scenario: Optional[Scenario] = None,
            percentiles: Optional[Iterable[float]] = None) -> SimulationOutcome:
        """
        Simulates `scenario.repetitions` runs with seeds seed, seed+1, ...

        Returns:
            The averaged MetricsReport and the trace of the first run.
        """
        scenario = scenario or self.config.scenario
        wanted = list(percentiles) if percentiles is not None else self.percentiles
        reports = []
        first_trace = None
        for k in range(scenario.repetitions):
            seed = scenario.rng_seed + k
            trace = simulate(strategy, scenario, self.estimator, seed, self.config.tuning)
            if first_trace is None:
                first_trace = trace
            reports.append(compute_metrics(trace, scenario.gen_len, wanted))
        report = average_reports(reports)
        slo_p = self.config.slo.percentile
        if slo_p in wanted:
            label = percentile_label(slo_p)
            logger.debug(f"{strategy.label} @ {scenario.arrival_rate:.4f} req/s: "
                         f"{label} TTFT={report.ttft_at(slo_p):.3f} ms, "
                         f"{label} TPOT={report.tpot_at(slo_p):.3f} ms "
                         f"({scenario.repetitions} run(s))")
        return SimulationOutcome(report=report, trace=first_trace)

    def run_at_rate(self, strategy: ServingStrategy, rate: float) -> SimulationOutcome:
        return self.run(strategy, self.config.with_scenario(arrival_rate=rate).scenario)
