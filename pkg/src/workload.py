import logging
from dataclasses import dataclass
from typing import List

import numpy as np

logger = logging.getLogger(__name__)

# Child streams of the scenario seed. Arrivals and instance ordering never share draws.
ARRIVAL_STREAM = 0
SHUFFLE_STREAM = 1


def _generator(seed: int, stream: int) -> np.random.Generator:
    """PCG64 generator for one named child stream of `seed`."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))


def shuffle_rng(seed: int) -> np.random.Generator:
    """Generator used to randomize the order in which instances are visited."""
    return _generator(seed, SHUFFLE_STREAM)


def instance_order(rng: np.random.Generator, count: int) -> List[int]:
    """
    Visiting order of `count` instances for one scheduling pass.

    Replace this to plug in a scheduling scheme other than randomized
    round-robin.
    """
    if count == 1:
        return [0]
    return rng.permutation(count).tolist()


@dataclass(frozen=True)
class RequestSet:
    """Arrival timestamps in milliseconds, sorted non-decreasing."""
    arrivals: np.ndarray

    def __len__(self) -> int:
        return len(self.arrivals)


def generate_arrivals(rate: float, num_requests: int, seed: int) -> RequestSet:
    """
    Samples Poisson arrivals by inverse-transform sampling of exponential gaps.

    The uniforms come from the arrival child stream of `seed`, so the same
    draws are reused at every rate: timestamps at rate k*rate equal those at
    `rate` divided by k.

    Args:
        rate: Arrival rate in requests per second.
        num_requests: Number of requests to generate.
        seed: Scenario seed.

    Returns:
        RequestSet with cumulative arrival times in milliseconds.
    """
    if rate <= 0:
        raise ValueError(f"Arrival rate must be > 0 (got {rate})")
    if num_requests < 1:
        raise ValueError(f"Number of requests must be >= 1 (got {num_requests})")

    uniforms = _generator(seed, ARRIVAL_STREAM).random(num_requests)
    gaps_ms = -np.log1p(-uniforms) * (1000.0 / rate)
    arrivals = np.cumsum(gaps_ms)
    logger.debug(f"Generated {num_requests} arrivals at {rate} req/s (seed={seed}), "
                 f"last arrival at {arrivals[-1]:.3f} ms")
    return RequestSet(arrivals=arrivals)
