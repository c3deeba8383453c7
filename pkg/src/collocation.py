import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Collection, List, Optional, Set, Tuple

import numpy as np

try:
    from .config import Scenario
    from .disagg import DEFAULT_PSEUDO_BATCH_TAU, pseudo_batch
    from .estimator import EstimateKey, Phase, TimeEstimator
    from .metrics import SimTrace
    from .strategy import ServingStrategy
    from .workload import generate_arrivals, instance_order, shuffle_rng
except ImportError:
    from config import Scenario
    from disagg import DEFAULT_PSEUDO_BATCH_TAU, pseudo_batch
    from estimator import EstimateKey, Phase, TimeEstimator
    from metrics import SimTrace
    from strategy import ServingStrategy
    from workload import generate_arrivals, instance_order, shuffle_rng

logger = logging.getLogger(__name__)


class EventKind(str, Enum):
    RESUME = "resume"
    PREFILL = "prefill"
    DECODE = "decode"


# Tie-break between events sharing a timestamp
_EVENT_PRIORITY = {EventKind.RESUME: 0, EventKind.PREFILL: 1, EventKind.DECODE: 2}


@dataclass
class CollocInstance:
    """One instance serving both phases. `when_idle` holds the decode boxes."""
    max_batch_decode: int
    status: Phase = Phase.DECODE
    when_idle_prefill: float = 0.0
    when_idle: List[float] = field(default_factory=list)
    box_requests: List[Optional[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.when_idle:
            self.when_idle = [0.0] * self.max_batch_decode
        if not self.box_requests:
            self.box_requests = [None] * self.max_batch_decode

    def idle_box(self, now: float) -> Optional[int]:
        return next((j for j, idle_at in enumerate(self.when_idle) if idle_at <= now), None)

    def busy_boxes(self, now: float) -> List[int]:
        return [j for j, idle_at in enumerate(self.when_idle) if idle_at > now]


@dataclass(order=True)
class ResumeRecord:
    resume_time: float
    instance: int


@dataclass
class EventQueueState:
    """
    Prefill queue (FIFO by arrival, as a cursor over sorted arrivals), decode
    queue (heap keyed by prefill departure then request id) and resume queue
    (kept sorted by resume time).
    """
    arrivals: np.ndarray
    prefill_departures: np.ndarray
    decode_departures: np.ndarray
    next_prefill: int = 0
    decode_queue: List[Tuple[float, int]] = field(default_factory=list)
    resume_queue: List[ResumeRecord] = field(default_factory=list)

    @classmethod
    def for_arrivals(cls, arrivals: np.ndarray) -> "EventQueueState":
        n = len(arrivals)
        return cls(arrivals, np.full(n, np.nan), np.full(n, np.nan))

    @property
    def prefill_pending(self) -> bool:
        return self.next_prefill < len(self.arrivals)

    def is_empty(self) -> bool:
        return not (self.prefill_pending or self.decode_queue or self.resume_queue)

    def pending_events(self) -> List[Tuple[float, EventKind]]:
        """Head of every non-empty queue with its timestamp, earliest first."""
        events = []
        if self.resume_queue:
            events.append((self.resume_queue[0].resume_time, EventKind.RESUME))
        if self.prefill_pending:
            events.append((float(self.arrivals[self.next_prefill]), EventKind.PREFILL))
        if self.decode_queue:
            events.append((self.decode_queue[0][0], EventKind.DECODE))
        events.sort(key=lambda event: (event[0], _EVENT_PRIORITY[event[1]]))
        return events

    def resume_record(self, instance: int) -> Optional[ResumeRecord]:
        return next((rec for rec in self.resume_queue if rec.instance == instance), None)

    def schedule_resume(self, instance: int, resume_time: float) -> None:
        """Adds or postpones the single resume record of an instance."""
        record = self.resume_record(instance)
        if record is None:
            self.resume_queue.append(ResumeRecord(resume_time, instance))
        else:
            record.resume_time = resume_time
        self.resume_queue.sort()


def is_available(inst: CollocInstance, next_type: Phase, now: float,
                 prioritize_prefill: bool = True) -> bool:
    """Whether `inst` can take the next request of type `next_type` at `now`."""
    next_type = Phase(next_type)
    if inst.status == Phase.PREFILL:
        if next_type == Phase.PREFILL:
            return inst.when_idle_prefill <= now
        return inst.when_idle_prefill <= now and inst.idle_box(now) is not None
    if next_type == Phase.DECODE:
        return inst.idle_box(now) is not None
    if prioritize_prefill:
        # Running decodes get suspended
        return True
    return not inst.busy_boxes(now)


def what_comes_next(state: EventQueueState, now: Optional[float] = None,
                    exclude: Collection[EventKind] = ()) -> Optional[EventKind]:
    """
    Type of the earliest pending event; ties go resume, then prefill, then decode.

    With `now`, only events due by then are considered. Kinds in `exclude` are
    skipped. Returns None when nothing eligible is left.
    """
    events = state.pending_events()
    if not events:
        raise ValueError("No pending events")
    for event_time, kind in events:
        if now is not None and event_time > now:
            break
        if kind not in exclude:
            return kind
    return None


def process_prefill(state: EventQueueState, instances: List[CollocInstance], order: List[int],
                    now: float, scenario: Scenario, tp: int, max_batch_prefill: int,
                    estimator: TimeEstimator, prioritize_prefill: bool = True) -> bool:
    """
    Runs one prefill batch on the first available instance.

    Busy decode boxes of that instance freeze for the batch duration and its
    resume record is set to the end of the batch.

    Returns:
        True if a batch was processed.
    """
    if not state.prefill_pending or state.arrivals[state.next_prefill] > now:
        return False
    for idx in order:
        inst = instances[idx]
        if not is_available(inst, Phase.PREFILL, now, prioritize_prefill):
            continue

        start = state.next_prefill
        end = start
        n = len(state.arrivals)
        while end < n and end - start < max_batch_prefill and state.arrivals[end] <= now:
            end += 1
        batch_ms = estimator.estimate_time(
            EstimateKey(end - start, scenario.seq_len, 1, tp, Phase.PREFILL))
        done_at = now + batch_ms
        for request in range(start, end):
            state.prefill_departures[request] = done_at
            heapq.heappush(state.decode_queue, (done_at, request))
        state.next_prefill = end
        inst.when_idle_prefill = done_at

        # Suspend ongoing decodes
        for j in inst.busy_boxes(now):
            inst.when_idle[j] += batch_ms
            state.decode_departures[inst.box_requests[j]] += batch_ms
        inst.status = Phase.PREFILL
        state.schedule_resume(idx, done_at)
        return True
    return False


def process_decode(state: EventQueueState, instances: List[CollocInstance], order: List[int],
                   now: float, scenario: Scenario, tp: int, estimator: TimeEstimator,
                   tau: float = DEFAULT_PSEUDO_BATCH_TAU) -> bool:
    """Places the head of the decode queue into an idle box. Returns True on success."""
    if not state.decode_queue or state.decode_queue[0][0] > now:
        return False
    for idx in order:
        inst = instances[idx]
        if not is_available(inst, Phase.DECODE, now):
            continue
        _, request = heapq.heappop(state.decode_queue)
        box = inst.idle_box(now)
        b_active = len(inst.busy_boxes(now))
        request_ms = estimator.estimate_time(EstimateKey(
            pseudo_batch(b_active, tau), scenario.seq_len, scenario.gen_len, tp, Phase.DECODE))
        inst.when_idle[box] = now + request_ms
        inst.box_requests[box] = request
        state.decode_departures[request] = now + request_ms
        return True
    return False


def _next_epoch(state: EventQueueState, instances: List[CollocInstance], now: float) -> float:
    """Earliest future time at which any availability or queue head changes."""
    candidates = [t for t, _ in state.pending_events() if t > now]
    for inst in instances:
        if inst.when_idle_prefill > now:
            candidates.append(inst.when_idle_prefill)
        candidates.extend(t for t in inst.when_idle if t > now)
    if not candidates:
        raise RuntimeError(f"Collocation simulation stalled at {now:.3f} ms")
    return min(candidates)


def simulate_collocation(strategy: ServingStrategy, scenario: Scenario, estimator: TimeEstimator,
                         seed: Optional[int] = None, tau: float = DEFAULT_PSEUDO_BATCH_TAU,
                         prioritize_prefill: bool = True,
                         arrivals: Optional[np.ndarray] = None) -> SimTrace:
    """
    Collocation simulation with prefill prioritization.

    A prefill batch may start on an instance that is decoding; the decodes
    there are suspended until the batch finishes, when a resume event flips
    the instance back to decode status.

    `arrivals` replaces the generated Poisson arrivals when given.
    """
    if not strategy.is_collocation:
        raise ValueError(f"Strategy {strategy.name} is not a collocation strategy")
    seed = scenario.rng_seed if seed is None else seed
    if arrivals is None:
        arrivals = generate_arrivals(scenario.arrival_rate, scenario.num_requests, seed).arrivals
    rng = shuffle_rng(seed)

    state = EventQueueState.for_arrivals(arrivals)
    instances = [CollocInstance(strategy.max_batch_decode) for _ in range(strategy.instances)]
    now = 0.0

    while not state.is_empty():
        now = max(now, state.pending_events()[0][0])
        progressed = False
        stuck: Set[EventKind] = set()
        while not progressed:
            kind = what_comes_next(state, now, exclude=stuck)
            if kind is None:
                break
            if kind == EventKind.RESUME:
                record = state.resume_queue.pop(0)
                instances[record.instance].status = Phase.DECODE
                progressed = True
            elif kind == EventKind.PREFILL:
                progressed = process_prefill(
                    state, instances, instance_order(rng, len(instances)), now, scenario,
                    strategy.tp, strategy.max_batch_prefill, estimator, prioritize_prefill)
            else:
                progressed = process_decode(
                    state, instances, instance_order(rng, len(instances)), now, scenario,
                    strategy.tp, estimator, tau)
            if not progressed:
                stuck.add(kind)
        if not progressed:
            now = _next_epoch(state, instances, now)

    logger.debug(f"Simulated {strategy.label} at {scenario.arrival_rate} req/s "
                 f"({scenario.num_requests} requests, seed={seed})")
    return SimTrace(arrivals, state.prefill_departures, state.decode_departures)
