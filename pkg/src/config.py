import logging
import math
import numbers
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, NamedTuple, Optional, Tuple

import yaml

logger = logging.getLogger(__name__)


# --- Defaults ---
DEFAULT_DISPATCH_MS = {"rmsnorm": 0.024, "attention": 0.190, "mlp": 0.041}
DEFAULT_COMM_LATENCY_FLOOR_MS = 0.1
DEFAULT_EFFICIENCY = {
    "prefill": {"mfu": 0.65, "mbu": 0.6, "comm_eff": 0.6},
    "decode": {"mfu": 0.65, "mbu": 0.3, "comm_eff": 0.3},
}
# Fitted against the decode attention cell of the reference CodeLlama-34b breakdown.
DEFAULT_KAPPA = {"update": 1.0e12, "kv": 4.0e12, "upcast": 1.0e12}

MODULE_KINDS = ("rmsnorm", "attention", "mlp")


class ConfigError(ValueError):
    """Raised when the planner configuration cannot be parsed or violates an invariant."""


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _as_number(value: Any, label: str, integer: bool = False):
    """Accepts ints, floats and numeric strings such as "1.6e12" (YAML 1.1 reads those as str)."""
    if isinstance(value, bool) or not isinstance(value, (numbers.Real, str)):
        raise ConfigError(f"{label} must be a number (got {value!r})")
    if isinstance(value, str):
        try:
            number = float(value.strip())
        except ValueError:
            raise ConfigError(f"{label} must be a number (got {value!r})") from None
    else:
        number = value
    if not math.isfinite(number):
        raise ConfigError(f"{label} must be finite (got {value!r})")
    if integer:
        if not isinstance(number, numbers.Integral) and not float(number).is_integer():
            raise ConfigError(f"{label} must be an integer (got {value!r})")
        return int(number)
    return float(number)


def _coerce(obj, section: str, floats: Tuple[str, ...] = (), ints: Tuple[str, ...] = ()) -> None:
    # Frozen dataclasses: fields are normalized once, before the range checks run
    for attr in floats:
        object.__setattr__(obj, attr, _as_number(getattr(obj, attr), f"{section}.{attr}"))
    for attr in ints:
        object.__setattr__(obj, attr, _as_number(getattr(obj, attr), f"{section}.{attr}", integer=True))


@dataclass(frozen=True)
class ModelSpec:
    hidden_size: int
    intermediate_size: int
    num_query_heads: int
    num_kv_heads: int
    num_layers: int
    bytes_per_param: int = 2
    name: str = "model"

    def __post_init__(self):
        for attr in ("hidden_size", "intermediate_size", "num_query_heads",
                     "num_kv_heads", "num_layers", "bytes_per_param"):
            value = getattr(self, attr)
            _require(isinstance(value, int) and not isinstance(value, bool) and value > 0,
                     f"model.{attr} must be a positive integer (got {value!r})")
        _require(self.num_query_heads % self.num_kv_heads == 0,
                 f"model.num_query_heads ({self.num_query_heads}) must be a multiple of "
                 f"model.num_kv_heads ({self.num_kv_heads})")
        _require(self.hidden_size % self.num_query_heads == 0,
                 f"model.hidden_size ({self.hidden_size}) must be a multiple of "
                 f"model.num_query_heads ({self.num_query_heads})")

    @property
    def is_gqa(self) -> bool:
        return self.num_kv_heads < self.num_query_heads


@dataclass(frozen=True)
class HardwareSpec:
    peak_flops: float
    peak_mem_bw: float
    peak_comm_bw: float
    dispatch_ms: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_DISPATCH_MS))
    comm_latency_floor_ms: float = DEFAULT_COMM_LATENCY_FLOOR_MS
    # Single calibration scalar applied on top of e_m * S_m.
    mem_bw_scale: float = 1.0
    name: str = "accelerator"

    def __post_init__(self):
        _coerce(self, "hardware", floats=("peak_flops", "peak_mem_bw", "peak_comm_bw",
                                          "mem_bw_scale", "comm_latency_floor_ms"))
        _require(isinstance(self.dispatch_ms, dict),
                 f"hardware.dispatch_ms must be a mapping (got {self.dispatch_ms!r})")
        object.__setattr__(self, "dispatch_ms", {
            kind: _as_number(value, f"hardware.dispatch_ms.{kind}")
            for kind, value in self.dispatch_ms.items()
        })
        for attr in ("peak_flops", "peak_mem_bw", "peak_comm_bw", "mem_bw_scale"):
            value = getattr(self, attr)
            _require(value > 0, f"hardware.{attr} must be > 0 (got {value})")
        _require(self.comm_latency_floor_ms >= 0,
                 f"hardware.comm_latency_floor_ms must be >= 0 (got {self.comm_latency_floor_ms})")
        unknown = set(self.dispatch_ms) - set(MODULE_KINDS)
        _require(not unknown, f"hardware.dispatch_ms has unknown module kinds: {sorted(unknown)}")
        missing = set(MODULE_KINDS) - set(self.dispatch_ms)
        _require(not missing, f"hardware.dispatch_ms is missing module kinds: {sorted(missing)}")
        for kind, value in self.dispatch_ms.items():
            _require(value >= 0, f"hardware.dispatch_ms.{kind} must be >= 0 (got {value})")


@dataclass(frozen=True)
class PhaseEfficiency:
    mfu: float
    mbu: float
    comm_eff: float

    def validate(self, phase: str) -> None:
        _coerce(self, f"efficiency.{phase}", floats=("mfu", "mbu", "comm_eff"))
        for attr in ("mfu", "mbu", "comm_eff"):
            value = getattr(self, attr)
            _require(0 < value <= 1, f"efficiency.{phase}.{attr} must be in (0, 1] (got {value})")


@dataclass(frozen=True)
class EfficiencyParams:
    prefill: PhaseEfficiency
    decode: PhaseEfficiency
    kappa_update: float = DEFAULT_KAPPA["update"]
    kappa_kv: float = DEFAULT_KAPPA["kv"]
    kappa_upcast: float = DEFAULT_KAPPA["upcast"]

    def __post_init__(self):
        self.prefill.validate("prefill")
        for attr in ("kappa_update", "kappa_kv", "kappa_upcast"):
            object.__setattr__(self, attr, _as_number(getattr(self, attr), f"kappa.{attr.split('_', 1)[1]}"))
        self.decode.validate("decode")
        for attr in ("kappa_update", "kappa_kv", "kappa_upcast"):
            value = getattr(self, attr)
            _require(value > 0, f"kappa.{attr.split('_', 1)[1]} must be > 0 (got {value})")

    def for_phase(self, phase: str) -> PhaseEfficiency:
        """Returns the efficiencies of 'prefill' or 'decode'."""
        key = getattr(phase, "value", phase)
        if key == "prefill":
            return self.prefill
        if key == "decode":
            return self.decode
        raise ValueError(f"Unknown phase: {phase!r}")


@dataclass(frozen=True)
class Scenario:
    seq_len: int
    gen_len: int
    num_requests: int
    arrival_rate: float
    rng_seed: int = 0
    repetitions: int = 1

    def __post_init__(self):
        _coerce(self, "scenario", floats=("arrival_rate",),
                ints=("seq_len", "gen_len", "num_requests", "rng_seed", "repetitions"))
        _require(self.seq_len >= 1, f"scenario.seq_len must be >= 1 (got {self.seq_len})")
        _require(self.gen_len >= 1, f"scenario.gen_len must be >= 1 (got {self.gen_len})")
        _require(self.num_requests >= 1,
                 f"scenario.num_requests must be >= 1 (got {self.num_requests})")
        _require(self.arrival_rate > 0,
                 f"scenario.arrival_rate must be > 0 (got {self.arrival_rate})")
        _require(self.repetitions >= 1,
                 f"scenario.repetitions must be >= 1 (got {self.repetitions})")


@dataclass(frozen=True)
class SloSpec:
    ttft_goal: float
    tpot_goal: float
    percentile: float = 0.90
    relaxation: float = 0.1

    def __post_init__(self):
        _coerce(self, "slo", floats=("ttft_goal", "tpot_goal", "percentile", "relaxation"))
        _require(self.ttft_goal > 0, f"slo.ttft_goal must be > 0 (got {self.ttft_goal})")
        _require(self.tpot_goal > 0, f"slo.tpot_goal must be > 0 (got {self.tpot_goal})")
        _require(0 < self.percentile < 1, f"slo.percentile must be in (0, 1) (got {self.percentile})")
        _require(self.relaxation >= 0, f"slo.relaxation must be >= 0 (got {self.relaxation})")


@dataclass(frozen=True)
class SearchSpace:
    max_instances: int
    tp_sizes: Tuple[int, ...]
    max_batch_prefill: int
    max_batch_decode: int

    def __post_init__(self):
        _coerce(self, "search", ints=("max_instances", "max_batch_prefill", "max_batch_decode"))
        _require(isinstance(self.tp_sizes, (list, tuple)),
                 f"search.tp_sizes must be a list (got {self.tp_sizes!r})")
        object.__setattr__(self, "tp_sizes", tuple(sorted({
            _as_number(t, "search.tp_sizes", integer=True) for t in self.tp_sizes
        })))
        _require(self.max_instances >= 1,
                 f"search.max_instances must be >= 1 (got {self.max_instances})")
        _require(len(self.tp_sizes) > 0, "search.tp_sizes must not be empty")
        _require(all(t >= 1 for t in self.tp_sizes),
                 f"search.tp_sizes must contain positive integers (got {list(self.tp_sizes)})")
        _require(self.max_batch_prefill >= 1,
                 f"search.max_batch_prefill must be >= 1 (got {self.max_batch_prefill})")
        _require(self.max_batch_decode >= 1,
                 f"search.max_batch_decode must be >= 1 (got {self.max_batch_decode})")


@dataclass(frozen=True)
class Tuning:
    pseudo_batch_tau: float = 2.5
    lower_rate: float = 0.1
    upper_bound_multiplier: float = 1.2
    epsilon: float = 0.05
    workers: int = 1
    percentiles: Tuple[float, ...] = (0.9, 0.99)
    histogram_bins: int = 50

    def __post_init__(self):
        _coerce(self, "tuning", floats=("pseudo_batch_tau", "lower_rate", "upper_bound_multiplier", "epsilon"),
                ints=("workers", "histogram_bins"))
        object.__setattr__(self, "percentiles", tuple(
            _as_number(p, "tuning.percentiles") for p in self.percentiles))
        _require(self.pseudo_batch_tau > 0,
                 f"tuning.pseudo_batch_tau must be > 0 (got {self.pseudo_batch_tau})")
        _require(self.lower_rate > 0, f"tuning.lower_rate must be > 0 (got {self.lower_rate})")
        _require(self.upper_bound_multiplier > 0,
                 f"tuning.upper_bound_multiplier must be > 0 (got {self.upper_bound_multiplier})")
        _require(self.epsilon > 0, f"tuning.epsilon must be > 0 (got {self.epsilon})")
        _require(self.workers >= 1, f"tuning.workers must be >= 1 (got {self.workers})")
        _require(all(0 < p < 1 for p in self.percentiles),
                 f"tuning.percentiles must lie in (0, 1) (got {list(self.percentiles)})")
        _require(self.histogram_bins >= 1,
                 f"tuning.histogram_bins must be >= 1 (got {self.histogram_bins})")


class PlannerConfig(NamedTuple):
    model: ModelSpec
    hardware: HardwareSpec
    efficiency: EfficiencyParams
    scenario: Scenario
    slo: SloSpec
    search: SearchSpace
    tuning: Tuning = Tuning()

    def with_scenario(self, **overrides: Any) -> "PlannerConfig":
        """Returns a copy with scenario fields replaced; None values are ignored."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        if not changes:
            return self
        return self._replace(scenario=replace(self.scenario, **changes))

    def to_dict(self) -> Dict[str, Any]:
        """Plain-data echo of the configuration, in the config-file layout."""
        kappa = {
            "update": self.efficiency.kappa_update,
            "kv": self.efficiency.kappa_kv,
            "upcast": self.efficiency.kappa_upcast,
        }
        search = asdict(self.search)
        search["tp_sizes"] = list(self.search.tp_sizes)
        tuning = asdict(self.tuning)
        tuning["percentiles"] = list(self.tuning.percentiles)
        return {
            "model": asdict(self.model),
            "hardware": asdict(self.hardware),
            "efficiency": {
                "prefill": asdict(self.efficiency.prefill),
                "decode": asdict(self.efficiency.decode),
            },
            "kappa": kappa,
            "scenario": asdict(self.scenario),
            "slo": asdict(self.slo),
            "search": search,
            "tuning": tuning,
        }


# --- Parsing ---

def _section(raw: Dict[str, Any], name: str, required: bool = True) -> Dict[str, Any]:
    value = raw.get(name)
    if value is None:
        if required:
            raise ConfigError(f"Missing required section '{name}'")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"Section '{name}' must be a mapping (got {type(value).__name__})")
    return value


def _build(cls, section_name: str, values: Dict[str, Any]):
    try:
        return cls(**values)
    except TypeError as e:
        # Unknown or missing keys surface as TypeError from the dataclass constructor
        raise ConfigError(f"Invalid '{section_name}' section: {e}") from e


def _phase_efficiency(efficiency: Dict[str, Any], phase: str) -> PhaseEfficiency:
    values = dict(DEFAULT_EFFICIENCY[phase])
    overrides = efficiency.get(phase) or {}
    if not isinstance(overrides, dict):
        raise ConfigError(f"Section 'efficiency.{phase}' must be a mapping")
    values.update(overrides)
    return _build(PhaseEfficiency, f"efficiency.{phase}", values)


def parse_config(raw: Dict[str, Any]) -> PlannerConfig:
    """
    Builds a validated PlannerConfig from an already-parsed mapping.

    Optional fields omitted from the mapping are filled with the documented
    defaults (efficiencies, kappa rates, dispatch constants, tuning knobs).

    Raises:
        ConfigError: naming the offending section or violated invariant.
    """
    if not isinstance(raw, dict):
        raise ConfigError("Configuration root must be a mapping")

    model = _build(ModelSpec, "model", _section(raw, "model"))

    hardware_values = dict(_section(raw, "hardware"))
    dispatch = dict(DEFAULT_DISPATCH_MS)
    dispatch.update(hardware_values.pop("dispatch_ms", None) or {})
    hardware = _build(HardwareSpec, "hardware", {**hardware_values, "dispatch_ms": dispatch})

    efficiency_section = _section(raw, "efficiency", required=False)
    kappa = dict(DEFAULT_KAPPA)
    kappa.update(_section(raw, "kappa", required=False))
    unknown_kappa = set(kappa) - set(DEFAULT_KAPPA)
    if unknown_kappa:
        raise ConfigError(f"Invalid 'kappa' section: unknown keys {sorted(unknown_kappa)}")
    efficiency = _build(EfficiencyParams, "efficiency", {
        "prefill": _phase_efficiency(efficiency_section, "prefill"),
        "decode": _phase_efficiency(efficiency_section, "decode"),
        "kappa_update": kappa["update"],
        "kappa_kv": kappa["kv"],
        "kappa_upcast": kappa["upcast"],
    })

    scenario = _build(Scenario, "scenario", _section(raw, "scenario"))
    slo = _build(SloSpec, "slo", _section(raw, "slo"))

    search_values = dict(_section(raw, "search"))
    if "tp_sizes" in search_values:
        search_values["tp_sizes"] = search_values["tp_sizes"] or []
    search = _build(SearchSpace, "search", search_values)

    tuning_values = dict(_section(raw, "tuning", required=False))
    if "percentiles" in tuning_values:
        tuning_values["percentiles"] = tuning_values["percentiles"] or []
    tuning = _build(Tuning, "tuning", tuning_values)

    return PlannerConfig(model, hardware, efficiency, scenario, slo, search, tuning)


def load_config(path: str, seed: Optional[int] = None) -> PlannerConfig:
    """
    Loads and validates a planner configuration file.

    Args:
        path: Path to the YAML configuration file.
        seed: Optional override for scenario.rng_seed.

    Returns:
        The validated PlannerConfig.

    Raises:
        ConfigError: if the file is missing, malformed or invalid.
    """
    if not os.path.isfile(path):
        raise ConfigError(f"Configuration file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Failed to parse configuration file {path}: {e}") from e

    config = parse_config(raw)
    if seed is not None:
        config = config.with_scenario(rng_seed=seed)
    logger.debug(f"Loaded configuration from {path} (model={config.model.name}, "
                 f"hardware={config.hardware.name}, seed={config.scenario.rng_seed})")
    return config
