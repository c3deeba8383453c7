import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional

try:
    from .estimator import Phase
except ImportError:
    from estimator import Phase


class Architecture(str, Enum):
    COLLOCATION = "collocation"
    DISAGGREGATION = "disaggregation"


_COLLOCATION_RE = re.compile(r"^(\d+)m$")
_DISAGGREGATION_RE = re.compile(r"^(\d+)p(\d+)d$")


@dataclass(frozen=True)
class InstanceGroup:
    """Identical instances serving one role. Decode instances hold max_batch boxes each."""
    role: Phase
    count: int
    tp: int
    max_batch: int

    def __post_init__(self):
        if self.count < 1 or self.tp < 1 or self.max_batch < 1:
            raise ValueError(f"Invalid instance group {self}: count, tp and max_batch must be >= 1")


@dataclass(frozen=True)
class ServingStrategy:
    arch: Architecture
    prefill_instances: int
    decode_instances: int
    tp: int
    max_batch_prefill: int
    max_batch_decode: int

    def __post_init__(self):
        if self.tp < 1 or self.max_batch_prefill < 1 or self.max_batch_decode < 1:
            raise ValueError(f"Invalid strategy {self}: tp and batch sizes must be >= 1")
        if self.arch == Architecture.COLLOCATION:
            if self.prefill_instances < 1 or self.prefill_instances != self.decode_instances:
                raise ValueError("A collocation strategy needs m >= 1 shared instances")
        elif self.prefill_instances < 1 or self.decode_instances < 1:
            raise ValueError(f"A disaggregation strategy needs y >= 1 and z >= 1 "
                             f"(got {self.prefill_instances}p{self.decode_instances}d)")

    @classmethod
    def collocation(cls, m: int, tp: int, max_batch_prefill: int,
                    max_batch_decode: int) -> "ServingStrategy":
        return cls(Architecture.COLLOCATION, m, m, tp, max_batch_prefill, max_batch_decode)

    @classmethod
    def disaggregation(cls, y: int, z: int, tp: int, max_batch_prefill: int,
                       max_batch_decode: int) -> "ServingStrategy":
        return cls(Architecture.DISAGGREGATION, y, z, tp, max_batch_prefill, max_batch_decode)

    @classmethod
    def parse(cls, text: str, tp: int, max_batch_prefill: int,
              max_batch_decode: int) -> "ServingStrategy":
        """Parses '5m' or '3p2d' notation. Raises ValueError on anything else."""
        notation = (text or "").strip().lower()
        match = _COLLOCATION_RE.match(notation)
        if match:
            return cls.collocation(int(match.group(1)), tp, max_batch_prefill, max_batch_decode)
        match = _DISAGGREGATION_RE.match(notation)
        if match:
            return cls.disaggregation(int(match.group(1)), int(match.group(2)), tp,
                                      max_batch_prefill, max_batch_decode)
        raise ValueError(f"Cannot parse architecture '{text}': expected 'Nm' or 'YpZd'")

    @property
    def is_collocation(self) -> bool:
        return self.arch == Architecture.COLLOCATION

    @property
    def instances(self) -> int:
        if self.is_collocation:
            return self.prefill_instances
        return self.prefill_instances + self.decode_instances

    @property
    def name(self) -> str:
        if self.is_collocation:
            return f"{self.instances}m"
        return f"{self.prefill_instances}p{self.decode_instances}d"

    @property
    def label(self) -> str:
        return f"{self.name}-tp{self.tp}"

    @property
    def accelerators_used(self) -> int:
        return self.instances * self.tp

    @property
    def batch_slots(self) -> int:
        """Requests the strategy can hold in flight at once, used to bound the search."""
        if self.is_collocation:
            return self.instances * max(self.max_batch_prefill, self.max_batch_decode)
        return (self.prefill_instances * self.max_batch_prefill
                + self.decode_instances * self.max_batch_decode)

    def prefill_group(self) -> Optional[InstanceGroup]:
        if self.is_collocation:
            return None
        return InstanceGroup(Phase.PREFILL, self.prefill_instances, self.tp, self.max_batch_prefill)

    def decode_group(self) -> Optional[InstanceGroup]:
        if self.is_collocation:
            return None
        return InstanceGroup(Phase.DECODE, self.decode_instances, self.tp, self.max_batch_decode)
