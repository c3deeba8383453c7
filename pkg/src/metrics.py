from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

# Sub-nanosecond residue from (D1 + T) - D1 is dropped so equal latencies compare equal
LATENCY_DECIMALS = 6


@dataclass(frozen=True)
class SimTrace:
    """Per-request timestamps (ms) of one simulation run, indexed by request id."""
    arrivals: np.ndarray
    prefill_departures: np.ndarray
    decode_departures: np.ndarray

    def __len__(self) -> int:
        return len(self.arrivals)

    def is_causal(self, tolerance: float = 1e-9) -> bool:
        """A <= D1 <= D2 for every request."""
        return bool(np.all(self.prefill_departures >= self.arrivals - tolerance)
                    and np.all(self.decode_departures >= self.prefill_departures - tolerance))

    def ttft(self) -> np.ndarray:
        return np.round(self.prefill_departures - self.arrivals, LATENCY_DECIMALS)

    def tpot(self, gen_len: int) -> np.ndarray:
        # Includes decode queueing and suspension, amortized over the generated tokens
        return np.round((self.decode_departures - self.prefill_departures) / gen_len, LATENCY_DECIMALS)


@dataclass(frozen=True)
class MetricsReport:
    ttft: Dict[float, float]
    tpot: Dict[float, float]
    ttft_mean: float
    tpot_mean: float
    num_requests: int
    runs: int = 1

    def ttft_at(self, percentile: float) -> float:
        return self.ttft[_key(percentile)]

    def tpot_at(self, percentile: float) -> float:
        return self.tpot[_key(percentile)]

    def to_dict(self) -> Dict[str, object]:
        return {
            "num_requests": self.num_requests,
            "runs": self.runs,
            "ttft_ms": {percentile_label(p): v for p, v in sorted(self.ttft.items())},
            "tpot_ms": {percentile_label(p): v for p, v in sorted(self.tpot.items())},
            "ttft_mean_ms": self.ttft_mean,
            "tpot_mean_ms": self.tpot_mean,
        }


def _key(percentile: float) -> float:
    return round(float(percentile), 6)


def percentile_label(percentile: float) -> str:
    """0.9 -> 'p90', 0.999 -> 'p99.9'."""
    value = round(percentile * 100, 6)
    return f"p{int(value)}" if value == int(value) else f"p{value:g}"


def nearest_rank(values: Sequence[float], percentile: float) -> float:
    """Smallest value v such that at least percentile * n values are <= v."""
    if len(values) == 0:
        raise ValueError("Cannot take a percentile of an empty sample")
    if not 0 < percentile <= 1:
        raise ValueError(f"Percentile must be in (0, 1] (got {percentile})")
    return float(np.quantile(np.asarray(values, dtype=float), percentile, method="inverted_cdf"))


def compute_metrics(trace: SimTrace, gen_len: int,
                    percentiles: Iterable[float] = (0.9, 0.99)) -> MetricsReport:
    """TTFT and TPOT percentiles (nearest rank) and means of a complete trace."""
    ttft = trace.ttft()
    tpot = trace.tpot(gen_len)
    wanted = sorted({_key(p) for p in percentiles})
    return MetricsReport(
        ttft={p: nearest_rank(ttft, p) for p in wanted},
        tpot={p: nearest_rank(tpot, p) for p in wanted},
        ttft_mean=float(np.mean(ttft)),
        tpot_mean=float(np.mean(tpot)),
        num_requests=len(trace),
    )


def average_reports(reports: List[MetricsReport]) -> MetricsReport:
    """Averages percentile metrics across repeated runs with different seeds."""
    if not reports:
        raise ValueError("No reports to average")
    if len(reports) == 1:
        return reports[0]
    keys = reports[0].ttft.keys()
    return MetricsReport(
        ttft={p: float(np.mean([r.ttft[p] for r in reports])) for p in keys},
        tpot={p: float(np.mean([r.tpot[p] for r in reports])) for p in keys},
        ttft_mean=float(np.mean([r.ttft_mean for r in reports])),
        tpot_mean=float(np.mean([r.tpot_mean for r in reports])),
        num_requests=reports[0].num_requests,
        runs=sum(r.runs for r in reports),
    )


def is_degenerate(values: Sequence[float], tolerance: float = 1e-9) -> bool:
    """True when every request saw the same metric value (e.g. constant TPOT)."""
    values = np.asarray(values, dtype=float)
    return bool(values.size and np.ptp(values) <= tolerance * max(1.0, abs(values[0])))


def histogram(values: Sequence[float], bins: int = 50) -> List[Tuple[float, float, int]]:
    """Frequency bins as (left_ms, right_ms, count) rows."""
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]
