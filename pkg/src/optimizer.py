import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional

try:
    from .config import PlannerConfig, SearchSpace, SloSpec
    from .estimator import EstimateKey, Estimator, Phase, TimeEstimator
    from .metrics import MetricsReport
    from .runner import SimulationRunner
    from .strategy import Architecture, ServingStrategy
except ImportError:
    from config import PlannerConfig, SearchSpace, SloSpec
    from estimator import EstimateKey, Estimator, Phase, TimeEstimator
    from metrics import MetricsReport
    from runner import SimulationRunner
    from strategy import Architecture, ServingStrategy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Probe:
    rate: float
    ttft: float
    tpot: float
    feasible: bool


@dataclass(frozen=True)
class GoodputResult:
    strategy: ServingStrategy
    goodput: float
    upper_rate: float
    feasibility_curve: List[Probe] = field(default_factory=list)

    @property
    def accelerators_used(self) -> int:
        return self.strategy.accelerators_used

    @property
    def normalized(self) -> float:
        return self.goodput / self.accelerators_used

    @property
    def infeasible_at_floor(self) -> bool:
        """Flags strategies that violate the SLO even at the lowest probed rate."""
        return self.goodput == 0.0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.name,
            "tp": self.strategy.tp,
            "goodput": self.goodput,
            "normalized_goodput": self.normalized,
            "accelerators_used": self.accelerators_used,
            "upper_rate": self.upper_rate,
            "infeasible_at_floor": self.infeasible_at_floor,
            "feasibility_curve": [
                {"rate": p.rate, "ttft_ms": p.ttft, "tpot_ms": p.tpot, "feasible": p.feasible}
                for p in self.feasibility_curve
            ],
        }


def meets_slo(report: MetricsReport, slo: SloSpec) -> bool:
    """Percentile TTFT and TPOT both within the relaxed goals."""
    slack = 1 + slo.relaxation
    return (report.ttft_at(slo.percentile) <= slack * slo.ttft_goal
            and report.tpot_at(slo.percentile) <= slack * slo.tpot_goal)


def feasible(rate: float, strategy: ServingStrategy, config: PlannerConfig,
             runner: Optional[SimulationRunner] = None) -> bool:
    """Simulates `strategy` at `rate` (same base seed) and checks the SLO."""
    if rate <= 0:
        raise ValueError(f"Arrival rate must be > 0 (got {rate})")
    runner = runner or SimulationRunner(config)
    return meets_slo(runner.run_at_rate(strategy, rate).report, config.slo)


def bisect_goodput(probe: Callable[[float], bool], lower: float, upper: float,
                   epsilon: float) -> float:
    """
    Largest feasible rate found by bisection, to within epsilon.

    Returns 0.0 when `lower` is already infeasible and `upper` when even the
    upper bound is feasible. Issues at most 2 + ceil(log2((upper - lower) / epsilon))
    probes.
    """
    if epsilon <= 0:
        raise ValueError(f"Epsilon must be > 0 (got {epsilon})")
    if not probe(lower):
        return 0.0
    if probe(upper):
        return upper
    while upper - lower > epsilon:
        mid = (lower + upper) / 2
        if probe(mid):
            lower = mid
        else:
            upper = mid
    return lower


def probe_budget(lower: float, upper: float, epsilon: float) -> int:
    return 2 + max(math.ceil(math.log2((upper - lower) / epsilon)), 0)


def upper_rate(strategy: ServingStrategy, config: PlannerConfig, estimator: TimeEstimator) -> float:
    """
    Generous upper bound on the goodput in req/s.

    One request alone takes a prefill at batch 1 plus a full decode at
    pseudo batch 1; every batch slot of the strategy is assumed to work in
    parallel at that speed.
    """
    scenario, tuning = config.scenario, config.tuning
    single_ms = (estimator.estimate_time(EstimateKey(1, scenario.seq_len, 1, strategy.tp, Phase.PREFILL))
                 + estimator.estimate_time(EstimateKey(1, scenario.seq_len, scenario.gen_len,
                                                       strategy.tp, Phase.DECODE)))
    upper = tuning.upper_bound_multiplier * 1000.0 * strategy.batch_slots / single_ms
    return max(upper, tuning.lower_rate + tuning.epsilon)


def get_goodput(strategy: ServingStrategy, config: PlannerConfig,
                runner: Optional[SimulationRunner] = None,
                epsilon: Optional[float] = None) -> GoodputResult:
    """Goodput of one strategy: the highest arrival rate whose SLO percentiles hold."""
    runner = runner or SimulationRunner(config)
    epsilon = config.tuning.epsilon if epsilon is None else epsilon
    lower = config.tuning.lower_rate
    upper = upper_rate(strategy, config, runner.estimator)
    curve: List[Probe] = []

    def probe(rate: float) -> bool:
        report = runner.run_at_rate(strategy, rate).report
        ok = meets_slo(report, config.slo)
        curve.append(Probe(rate, report.ttft_at(config.slo.percentile),
                           report.tpot_at(config.slo.percentile), ok))
        logger.debug(f"{strategy.label}: probe {rate:.4f} req/s -> {'feasible' if ok else 'infeasible'}")
        return ok

    goodput = bisect_goodput(probe, lower, upper, epsilon)
    logger.info(f"Strategy {strategy.label}: goodput {goodput:.4f} req/s "
                f"({len(curve)} probes, upper bound {upper:.4f} req/s)")
    return GoodputResult(strategy, goodput, upper, sorted(curve, key=lambda p: p.rate))


def enumerate_strategies(space: SearchSpace, arch_filter: str = "all") -> List[ServingStrategy]:
    """
    Every collocation Nm and disaggregation YpZd within the instance budget,
    crossed with each admissible tensor parallel size.
    """
    if not space.tp_sizes:
        raise ValueError("No tensor parallel sizes to enumerate")
    if arch_filter not in ("all", Architecture.COLLOCATION.value, Architecture.DISAGGREGATION.value):
        raise ValueError(f"Unknown architecture filter: {arch_filter}")

    strategies = []
    for tp in sorted(space.tp_sizes):
        if arch_filter in ("all", Architecture.COLLOCATION.value):
            for m in range(1, space.max_instances + 1):
                strategies.append(ServingStrategy.collocation(
                    m, tp, space.max_batch_prefill, space.max_batch_decode))
        if arch_filter in ("all", Architecture.DISAGGREGATION.value):
            for y in range(1, space.max_instances):
                for z in range(1, space.max_instances - y + 1):
                    strategies.append(ServingStrategy.disaggregation(
                        y, z, tp, space.max_batch_prefill, space.max_batch_decode))
    return strategies


def rank(results: Iterable[GoodputResult]) -> List[GoodputResult]:
    """Descending goodput; ties go to fewer accelerators, then strategy name."""
    return sorted(results, key=lambda r: (-r.goodput, r.accelerators_used, r.strategy.label))


def _evaluate_one(strategy: ServingStrategy, config: PlannerConfig, epsilon: float) -> GoodputResult:
    # Each worker process owns its estimator memo
    return get_goodput(strategy, config, SimulationRunner(config), epsilon)


def evaluate_strategies(strategies: List[ServingStrategy], config: PlannerConfig,
                        workers: int = 1, epsilon: Optional[float] = None) -> List[GoodputResult]:
    """
    Finds the goodput of every strategy, in parallel when workers > 1.

    Results come back in the order of `strategies` regardless of completion order.
    """
    epsilon = config.tuning.epsilon if epsilon is None else epsilon
    if workers <= 1 or len(strategies) <= 1:
        runner = SimulationRunner(config,
                                  Estimator(config.model, config.hardware, config.efficiency))
        return [get_goodput(strategy, config, runner, epsilon) for strategy in strategies]

    logger.info(f"Evaluating {len(strategies)} strategies with {workers} worker processes.")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_evaluate_one, strategy, config, epsilon) for strategy in strategies]
        return [future.result() for future in futures]
