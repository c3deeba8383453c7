import random
from types import SimpleNamespace
from unittest.mock import patch

import pytest

from src.config import SloSpec, parse_config
from src.estimator import Phase
from src.metrics import MetricsReport
from src.optimizer import (
    GoodputResult,
    bisect_goodput,
    enumerate_strategies,
    evaluate_strategies,
    feasible,
    get_goodput,
    meets_slo,
    probe_budget,
    rank,
    upper_rate,
)
from src.strategy import Architecture, ServingStrategy

RAW_CONFIG = {
    "model": {"hidden_size": 1024, "intermediate_size": 2816, "num_query_heads": 16,
              "num_kv_heads": 4, "num_layers": 4},
    "hardware": {"peak_flops": 300e12, "peak_mem_bw": 1.6e12, "peak_comm_bw": 90e9},
    "scenario": {"seq_len": 128, "gen_len": 8, "num_requests": 50, "arrival_rate": 1.0},
    "slo": {"ttft_goal": 1500, "tpot_goal": 70},
    "search": {"max_instances": 3, "tp_sizes": [1, 2], "max_batch_prefill": 4, "max_batch_decode": 16},
}
CONFIG = parse_config(RAW_CONFIG)


def _report(ttft, tpot, percentile=0.9):
    return MetricsReport({percentile: ttft}, {percentile: tpot}, ttft, tpot, 100)


class StubEstimator:
    def estimate_time(self, key):
        return 100.0 if key.phase == Phase.PREFILL else 900.0


class StepRunner:
    """Meets the SLO up to `threshold` req/s and blows the TTFT goal beyond it."""

    def __init__(self, threshold):
        self.threshold = threshold
        self.estimator = StubEstimator()
        self.rates = []

    def run_at_rate(self, strategy, rate):
        self.rates.append(rate)
        ttft = 1000.0 if rate <= self.threshold else 5000.0
        return SimpleNamespace(report=_report(ttft, 50.0))


# --- SLO check ---

# ttft, tpot, relaxation, expected
slo_cases = [
    (1650.0, 77.0, 0.1, True),
    (1650.01, 77.0, 0.1, False),
    (1650.0, 77.01, 0.1, False),
    (1500.0, 70.0, 0.0, True),
    (1500.01, 70.0, 0.0, False),
]


@pytest.mark.parametrize("ttft, tpot, relaxation, expected", slo_cases)
def test_meets_slo_boundary(ttft, tpot, relaxation, expected):
    slo = SloSpec(ttft_goal=1500, tpot_goal=70, percentile=0.9, relaxation=relaxation)
    assert meets_slo(_report(ttft, tpot), slo) is expected


def test_feasible_rejects_non_positive_rate():
    strategy = ServingStrategy.collocation(1, 1, 4, 16)
    with pytest.raises(ValueError):
        feasible(0.0, strategy, CONFIG, StepRunner(1.0))


def test_feasible_uses_runner_report():
    strategy = ServingStrategy.collocation(1, 1, 4, 16)
    runner = StepRunner(2.0)
    assert feasible(1.5, strategy, CONFIG, runner)
    assert not feasible(2.5, strategy, CONFIG, runner)


# --- Bisection ---

def test_bisection_against_step_oracle():
    """For random thresholds the answer is feasible, within epsilon and within the probe budget."""
    rng = random.Random(1234)
    lower, upper, epsilon = 0.1, 10.0, 0.05
    budget = probe_budget(lower, upper, epsilon)
    for _ in range(100):
        threshold = rng.uniform(lower, upper)
        calls = []

        def probe(rate):
            calls.append(rate)
            return rate <= threshold

        goodput = bisect_goodput(probe, lower, upper, epsilon)
        assert goodput <= threshold
        assert threshold - goodput <= epsilon
        assert len(calls) <= budget


def test_bisection_infeasible_at_lower_returns_zero():
    calls = []

    def probe(rate):
        calls.append(rate)
        return False

    assert bisect_goodput(probe, 0.1, 10.0, 0.05) == 0.0
    assert calls == [0.1]


def test_bisection_feasible_upper_is_returned():
    assert bisect_goodput(lambda rate: True, 0.1, 10.0, 0.05) == 10.0


def test_bisection_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        bisect_goodput(lambda rate: True, 0.1, 10.0, 0.0)


def test_probe_budget():
    assert probe_budget(0.1, 10.0, 0.05) == 10
    assert probe_budget(0.0, 0.04, 0.05) == 2


# --- Goodput ---

def test_upper_rate_scales_with_batch_slots():
    colloc = ServingStrategy.collocation(1, 1, 4, 16)
    disagg = ServingStrategy.disaggregation(1, 2, 1, 4, 16)
    # One request takes 100 + 900 ms alone
    assert upper_rate(colloc, CONFIG, StubEstimator()) == pytest.approx(1.2 * 16)
    assert upper_rate(disagg, CONFIG, StubEstimator()) == pytest.approx(1.2 * (4 + 32))


def test_get_goodput_finds_the_step():
    strategy = ServingStrategy.collocation(1, 1, 4, 16)
    runner = StepRunner(2.0)
    result = get_goodput(strategy, CONFIG, runner)
    assert 2.0 - CONFIG.tuning.epsilon <= result.goodput <= 2.0
    assert result.upper_rate == pytest.approx(19.2)
    assert len(result.feasibility_curve) == len(runner.rates)
    assert len(runner.rates) <= probe_budget(CONFIG.tuning.lower_rate, result.upper_rate,
                                             CONFIG.tuning.epsilon)
    rates = [probe.rate for probe in result.feasibility_curve]
    assert rates == sorted(rates)
    assert all(probe.feasible == (probe.rate <= 2.0) for probe in result.feasibility_curve)
    assert not result.infeasible_at_floor


def test_get_goodput_flags_strategies_infeasible_at_floor():
    strategy = ServingStrategy.collocation(2, 2, 4, 16)
    result = get_goodput(strategy, CONFIG, StepRunner(0.01))
    assert result.goodput == 0.0
    assert result.infeasible_at_floor
    assert result.normalized == 0.0
    assert result.to_dict()["accelerators_used"] == 4


# --- Enumeration and ranking ---

def test_enumerate_strategies_covers_the_budget():
    strategies = enumerate_strategies(CONFIG.search)
    # Per tp: 1m..3m plus 1p1d, 1p2d, 2p1d
    assert len(strategies) == 12
    assert {s.tp for s in strategies} == {1, 2}
    assert all(s.instances <= CONFIG.search.max_instances for s in strategies)
    names = [s.name for s in strategies if s.tp == 1]
    assert names == ["1m", "2m", "3m", "1p1d", "1p2d", "2p1d"]


@pytest.mark.parametrize("arch_filter, arch", [
    ("collocation", Architecture.COLLOCATION),
    ("disaggregation", Architecture.DISAGGREGATION),
])
def test_enumerate_strategies_filter(arch_filter, arch):
    strategies = enumerate_strategies(CONFIG.search, arch_filter)
    assert len(strategies) == 6
    assert all(s.arch == arch for s in strategies)


def test_enumerate_strategies_rejects_unknown_filter():
    with pytest.raises(ValueError):
        enumerate_strategies(CONFIG.search, "hybrid")


def test_rank_orders_by_goodput_then_accelerators_then_label():
    results = [
        GoodputResult(ServingStrategy.collocation(2, 2, 4, 16), 3.0, 10.0),
        GoodputResult(ServingStrategy.disaggregation(1, 1, 1, 4, 16), 3.0, 10.0),
        GoodputResult(ServingStrategy.collocation(2, 1, 4, 16), 3.0, 10.0),
        GoodputResult(ServingStrategy.collocation(3, 1, 4, 16), 5.0, 10.0),
    ]
    ranked = [r.strategy.label for r in rank(results)]
    assert ranked == ["3m-tp1", "1p1d-tp1", "2m-tp1", "2m-tp2"]


@patch('src.optimizer.get_goodput')
def test_evaluate_strategies_sequential_keeps_order(mock_get_goodput):
    strategies = enumerate_strategies(CONFIG.search, "collocation")
    mock_get_goodput.side_effect = lambda strategy, config, runner, epsilon: GoodputResult(
        strategy, float(strategy.instances), 10.0)
    results = evaluate_strategies(strategies, CONFIG, workers=1, epsilon=0.2)
    assert [r.strategy for r in results] == strategies
    assert mock_get_goodput.call_count == len(strategies)
    # One shared runner, the override epsilon passed through
    runners = {id(call.args[2]) for call in mock_get_goodput.call_args_list}
    assert len(runners) == 1
    assert all(call.args[3] == 0.2 for call in mock_get_goodput.call_args_list)
