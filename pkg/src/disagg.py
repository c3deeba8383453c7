import logging
import math
from typing import List, Optional

import numpy as np

try:
    from .config import Scenario
    from .estimator import EstimateKey, Phase, TimeEstimator
    from .metrics import SimTrace
    from .strategy import InstanceGroup, ServingStrategy
    from .workload import generate_arrivals, instance_order, shuffle_rng
except ImportError:
    from config import Scenario
    from estimator import EstimateKey, Phase, TimeEstimator
    from metrics import SimTrace
    from strategy import InstanceGroup, ServingStrategy
    from workload import generate_arrivals, instance_order, shuffle_rng

logger = logging.getLogger(__name__)

DEFAULT_PSEUDO_BATCH_TAU = 2.5


def pseudo_batch(b_active: int, tau: float = DEFAULT_PSEUDO_BATCH_TAU) -> int:
    """
    Batch size charged to a decode request that joins b_active running ones.

    Requests inside a continuous batch overlap only partially, so the
    effective batch is smaller than the number of occupied slots.
    """
    if b_active < 0:
        raise ValueError(f"Active batch size must be >= 0 (got {b_active})")
    if tau <= 0:
        raise ValueError(f"Pseudo batch balance must be > 0 (got {tau})")
    return max(math.floor((b_active + 1) / tau), 1)


def simulate_prefill(arrivals: np.ndarray, group: InstanceGroup, scenario: Scenario,
                     estimator: TimeEstimator, rng: np.random.Generator) -> np.ndarray:
    """
    Prefill stage: FIFO batches of arrived requests on idle instances.

    Args:
        arrivals: Arrival times in ms, sorted non-decreasing.
        group: Prefill instances.
        scenario: Provides the prompt length.
        estimator: Batch-time oracle.
        rng: Generator for the instance visiting order.

    Returns:
        Prefill departure time of every request, in arrival order.
    """
    n = len(arrivals)
    departures = np.empty(n, dtype=float)
    when_idle = [0.0] * group.count
    head = 0
    now = float(arrivals[0]) if n else 0.0

    while head < n:
        for idx in instance_order(rng, group.count):
            if head >= n or arrivals[head] > now:
                break
            if when_idle[idx] > now:
                continue
            end = head
            while end < n and end - head < group.max_batch and arrivals[end] <= now:
                end += 1
            batch_ms = estimator.estimate_time(
                EstimateKey(end - head, scenario.seq_len, 1, group.tp, Phase.PREFILL))
            departures[head:end] = now + batch_ms
            when_idle[idx] = now + batch_ms
            head = end

        if head < n:
            # Advance to the next event: an instance frees up or a request arrives
            now = max(now, min(when_idle), float(arrivals[head]))

    return departures


def simulate_decode(decode_arrivals: np.ndarray, group: InstanceGroup, scenario: Scenario,
                    estimator: TimeEstimator, rng: np.random.Generator,
                    tau: float = DEFAULT_PSEUDO_BATCH_TAU) -> np.ndarray:
    """
    Decode stage: each instance holds max_batch boxes with independent idle times.

    A request joining an instance takes its lowest-index idle box and is
    charged the full generation time at the pseudo batch size derived from
    the boxes already busy there.

    Args:
        decode_arrivals: Time each request becomes ready for decode (its
            prefill departure), indexed by request id.

    Returns:
        Decode departure time of every request, indexed by request id.
    """
    n = len(decode_arrivals)
    departures = np.empty(n, dtype=float)
    # Requests of one prefill batch share a timestamp; ties resolve by request id
    order = np.argsort(decode_arrivals, kind="stable")
    boxes: List[List[float]] = [[0.0] * group.max_batch for _ in range(group.count)]
    pos = 0
    now = float(decode_arrivals[order[0]]) if n else 0.0

    while pos < n:
        for idx in instance_order(rng, group.count):
            if pos >= n:
                break
            request = order[pos]
            if decode_arrivals[request] > now:
                break
            inst_boxes = boxes[idx]
            free = next((j for j, idle_at in enumerate(inst_boxes) if idle_at <= now), None)
            if free is None:
                continue
            b_active = sum(1 for idle_at in inst_boxes if idle_at > now)
            request_ms = estimator.estimate_time(EstimateKey(
                pseudo_batch(b_active, tau), scenario.seq_len, scenario.gen_len, group.tp, Phase.DECODE))
            departures[request] = now + request_ms
            inst_boxes[free] = now + request_ms
            pos += 1

        if pos < n:
            earliest_box = min(min(inst_boxes) for inst_boxes in boxes)
            now = max(now, earliest_box, float(decode_arrivals[order[pos]]))

    return departures


def simulate_disagg(strategy: ServingStrategy, scenario: Scenario, estimator: TimeEstimator,
                    seed: Optional[int] = None, tau: float = DEFAULT_PSEUDO_BATCH_TAU,
                    arrivals: Optional[np.ndarray] = None) -> SimTrace:
    """
    Runs the prefill stage and feeds its departures into the decode stage.

    `arrivals` replaces the generated Poisson arrivals when given.
    """
    if strategy.is_collocation:
        raise ValueError(f"Strategy {strategy.name} is not a disaggregation strategy")
    seed = scenario.rng_seed if seed is None else seed
    if arrivals is None:
        arrivals = generate_arrivals(scenario.arrival_rate, scenario.num_requests, seed).arrivals
    rng = shuffle_rng(seed)

    prefill_departures = simulate_prefill(arrivals, strategy.prefill_group(), scenario, estimator, rng)
    decode_departures = simulate_decode(prefill_departures, strategy.decode_group(), scenario,
                                        estimator, rng, tau)
    logger.debug(f"Simulated {strategy.label} at {scenario.arrival_rate} req/s "
                 f"({scenario.num_requests} requests, seed={seed})")
    return SimTrace(arrivals, prefill_departures, decode_departures)
