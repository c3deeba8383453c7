import logging
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Dict, List, NamedTuple, Optional, Protocol

try:
    from .config import EfficiencyParams, HardwareSpec, ModelSpec
except ImportError:
    from config import EfficiencyParams, HardwareSpec, ModelSpec

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class ModuleKind(str, Enum):
    RMSNORM = "rmsnorm"
    ATTENTION = "attention"
    MLP = "mlp"


class OpKind(str, Enum):
    COMPUTE = "compute"
    BANDWIDTH_ONLY = "bandwidth_only"


# Module order inside one Transformer block.
LAYER_MODULES = (ModuleKind.RMSNORM, ModuleKind.ATTENTION, ModuleKind.RMSNORM, ModuleKind.MLP)
# Modules followed by a tensor-parallel synchronization.
COMMUNICATING_MODULES = frozenset({ModuleKind.ATTENTION, ModuleKind.MLP})


@dataclass(frozen=True)
class OpCost:
    name: str
    work: float
    traffic: float
    kind: OpKind = OpKind.COMPUTE
    bandwidth_rate: Optional[float] = None


@dataclass(frozen=True)
class ModuleCost:
    module: ModuleKind
    dispatch_ms: float
    compute_ms: float
    comm_ms: float


class EstimateKey(NamedTuple):
    batch: int
    seq: int
    gen: int
    tp: int
    phase: Phase

    def validate(self) -> None:
        if self.batch < 1 or self.seq < 1 or self.gen < 1 or self.tp < 1:
            raise ValueError(f"Invalid estimate key {self}: batch, seq, gen and tp must be >= 1")


class TimeEstimator(Protocol):
    def estimate_time(self, key: EstimateKey) -> float:
        ...


# --- Roofline ---

def roofline_perf(work: float, traffic: float, phase: Phase,
                  hw: HardwareSpec, eff: EfficiencyParams) -> float:
    """Attainable FLOP/s: min(I, I*) * e_m * S_m, written as min(I * e_m * S_m, e_c * S_c)."""
    if work <= 0 or traffic <= 0:
        raise ValueError(f"Roofline needs positive work and traffic (got W={work}, Q={traffic})")
    pe = eff.for_phase(phase)
    mem_bw = pe.mbu * hw.peak_mem_bw * hw.mem_bw_scale
    return min(work / traffic * mem_bw, pe.mfu * hw.peak_flops)


def critical_intensity(phase: Phase, hw: HardwareSpec, eff: EfficiencyParams) -> float:
    pe = eff.for_phase(phase)
    return (pe.mfu / pe.mbu) * (hw.peak_flops / (hw.peak_mem_bw * hw.mem_bw_scale))


# --- Operator tables ---
# Rows are evaluated in exact rational arithmetic so the tensor-parallel tables
# at t=1 produce exactly the same floats as the single-device tables.

def _op(name: str, work, traffic) -> OpCost:
    return OpCost(name=name, work=float(work), traffic=float(traffic))


def _bandwidth_op(name: str, traffic, rate: float) -> OpCost:
    return OpCost(name=name, work=0.0, traffic=float(traffic),
                  kind=OpKind.BANDWIDTH_ONLY, bandwidth_rate=rate)


def _rmsnorm_table(b: Fraction, s: Fraction, h: Fraction) -> List[OpCost]:
    # Decode passes s=1; tensor parallelism leaves normalization untouched.
    return [
        _op("POW", b * s * h, 4 * b * s * h),
        _op("MEAN", b * s * h, 2 * b * s * h + 2 * b * s),
        _op("ADD", b * s, 4 * b * s),
        _op("RSQRT", b * s, 4 * b * s),
        _op("MUL", b * s * h, 4 * b * s * h + 2 * b * s),
        _op("MUL", b * s * h, 4 * b * s * h + 2 * h),
    ]


def _mlp_table(b: Fraction, s: Fraction, h: Fraction, h0: Fraction) -> List[OpCost]:
    proj_w = 2 * b * s * h * h0
    proj_q = 2 * (b * s * (h + h0) + h * h0)
    return [
        _op("GATE_PROJ", proj_w, proj_q),
        _op("SiLU", 5 * b * s * h0, 4 * b * s * h0),
        _op("UP_PROJ", proj_w, proj_q),
        _op("mul", b * s * h0, 6 * b * s * h0),
        _op("DOWN_PROJ", proj_w, proj_q),
        _op("add", b * s * h, 4 * b * s * h0),
    ]


def _mlp_table_tp(b: Fraction, s: Fraction, h: Fraction, h0: Fraction, t: Fraction) -> List[OpCost]:
    proj_w = 2 * b * s * h * h0 / t
    proj_q = 2 * (b * s * (h + h0) + h * h0) / t
    return [
        _op("GATE_PROJ", proj_w, proj_q),
        _op("SiLU", 5 * b * s * h0 / t, 4 * b * s * h0 / t),
        _op("UP_PROJ", proj_w, proj_q),
        _op("mul", b * s * h0 / t, 6 * b * s * h0 / t),
        _op("DOWN_PROJ", proj_w, proj_q),
        _op("add", b * s * h / t, 4 * b * s * h0 / t),
    ]


def _attention_prefill(b, s, h, hq, hkv) -> List[OpCost]:
    r = hkv / hq
    return [
        _op("Q_PROJ", 2 * b * s * h * h, 2 * (2 * b * s * h + h * h)),
        _op("K_PROJ", 2 * b * s * h * h * r, 2 * (b * s * h + h * h * r + b * s * h * r)),
        _op("V_PROJ", 2 * b * s * h * h * r, 2 * (b * s * h + h * h * r + b * s * h * r)),
        _op("RoPE", Fraction(7, 2) * b * s * h * (1 + r),
            2 * b * s * h * (Fraction(17, 2) + Fraction(17, 2) * r + 2 / hq)),
        _op("QK^T", 2 * b * s * s * h, 2 * (2 * b * s * h + b * hq * s * s)),
        _op("div", b * hq * s * s, 4 * b * hq * s * s),
        _op("add", b * hq * s * s, 2 * (2 * b * hq * s * s + b * s * s)),
        _op("softmax", 3 * b * hq * s * s, 4 * b * hq * s * s),
        _op("@V", 2 * b * s * s * h, 2 * (b * hq * s * s + 2 * b * s * h)),
        _op("O_PROJ", 2 * b * s * h * h, 2 * (2 * b * s * h + h * h)),
    ]


def _attention_prefill_tp(b, s, h, hq, hkv, t) -> List[OpCost]:
    r = hkv / hq
    return [
        _op("Q_PROJ", 2 * b * s * h * h / t, 2 * (2 * b * s * h + h * h) / t),
        _op("K_PROJ", 2 * b * s * h * h * hkv / (t * hq),
            2 * (b * s * h + h * h * hkv / (t * hq) + b * s * h * hkv / (t * hq))),
        _op("V_PROJ", 2 * b * s * h * h * hkv / (t * hq),
            2 * (b * s * h + h * h * hkv / (t * hq) + b * s * h * hkv / (t * hq))),
        _op("RoPE", Fraction(7, 2) * b * s * h * (1 + r),
            2 * b * s * h * (Fraction(17, 2) + Fraction(17, 2) * r + 2 / hq)),
        _op("QK^T", 2 * b * s * s * h / t, 2 * (2 * b * s * h + b * hq * s * s) / t),
        _op("div", b * hq * s * s / t, 4 * b * hq * s * s / t),
        _op("add", b * hq * s * s / t, 2 * (2 * b * hq * s * s / t + b * s * s)),
        _op("softmax", 3 * b * hq * s * s / t, 4 * b * hq * s * s / t),
        _op("@V", 2 * b * s * s * h / t, 2 * (b * hq * s * s + 2 * b * s * h) / t),
        _op("O_PROJ", 2 * b * s * h * h / t, 2 * (b * s * h + b * s * h / t + h * h)),
    ]


def _attention_decode(b, s, h, hq, hkv, gqa: bool, eff: EfficiencyParams) -> List[OpCost]:
    # s is the context length held in the KV-Cache.
    r = hkv / hq
    rows = [
        _op("Q_PROJ", 2 * b * h * h, 2 * (2 * b * h + h * h)),
        _op("K_PROJ", 2 * b * h * h * r, 2 * (b * h + h * h * r + b * h * r)),
        _op("V_PROJ", 2 * b * h * h * r, 2 * (b * h + h * h * r + b * h * r)),
        _op("RoPE", Fraction(7, 2) * b * h * (1 + r),
            2 * b * h * (Fraction(17, 2) + Fraction(17, 2) * r + 2 / hq)),
        _bandwidth_op("update", 4 * b * s * h * r, eff.kappa_update),
    ]
    if gqa:
        rows.append(_bandwidth_op("repeat_kv", 4 * b * s * h * (1 + r), eff.kappa_kv))
    rows += [
        _op("QK^T", 2 * b * s * h, 2 * b * (h + h * s + hq * s)),
        _op("div", b * hq * s, 4 * b * hq * s),
        _op("add", b * hq * s, 2 * (2 * b * hq * s + b * s)),
        _bandwidth_op("upcast", 4 * b * hq * s, eff.kappa_upcast),
        _op("softmax", 3 * b * hq * s, 4 * b * hq * s),
        _op("@V", 2 * b * s * h, 2 * b * (h + h * s + hq * s)),
        _op("O_PROJ", 2 * b * h * h, 2 * (2 * b * h + h * h)),
    ]
    return rows


def _attention_decode_tp(b, s, h, hq, hkv, t, gqa: bool, eff: EfficiencyParams) -> List[OpCost]:
    r = hkv / hq
    rows = [
        _op("Q_PROJ", 2 * b * h * h / t, 2 * (2 * b * h + h * h) / t),
        _op("K_PROJ", 2 * b * h * h * hkv / (t * hq),
            2 * (b * h + h * h * hkv / (t * hq) + b * h * hkv / (t * hq))),
        _op("V_PROJ", 2 * b * h * h * hkv / (t * hq),
            2 * (b * h + h * h * hkv / (t * hq) + b * h * hkv / (t * hq))),
        _op("RoPE", Fraction(7, 2) * b * h * (1 + r),
            2 * b * h * (Fraction(17, 2) + Fraction(17, 2) * r + 2 / hq)),
        _bandwidth_op("update", 4 * b * s * h * r / t, eff.kappa_update),
    ]
    if gqa:
        rows.append(_bandwidth_op("repeat_kv", 4 * b * s * h * (1 + r) / t, eff.kappa_kv))
    rows += [
        _op("QK^T", 2 * b * s * h / t, 2 * b * (h + h * s + hq * s) / t),
        _op("div", b * hq * s / t, 4 * b * hq * s / t),
        _op("add", b * hq * s / t, 2 * (2 * b * hq * s / t + b * s)),
        _bandwidth_op("upcast", 4 * b * hq * s / t, eff.kappa_upcast),
        _op("softmax", 3 * b * hq * s / t, 4 * b * hq * s / t),
        _op("@V", 2 * b * s * h / t, 2 * b * (h + h * s + hq * s) / t),
        _op("O_PROJ", 2 * b * h * h / t, 2 * (b * h + h * h / t + b * h / t)),
    ]
    return rows


def single_device_table(module_kind: ModuleKind, phase: Phase, model: ModelSpec,
                        b: int, s: int, eff: EfficiencyParams) -> List[OpCost]:
    """Operator rows of one module on a single accelerator (no tensor parallelism)."""
    b, s = Fraction(b), Fraction(s)
    h, h0 = Fraction(model.hidden_size), Fraction(model.intermediate_size)
    hq, hkv = Fraction(model.num_query_heads), Fraction(model.num_kv_heads)
    tokens = s if phase == Phase.PREFILL else Fraction(1)
    kind = ModuleKind(module_kind)
    if kind == ModuleKind.RMSNORM:
        return _rmsnorm_table(b, tokens, h)
    if kind == ModuleKind.MLP:
        return _mlp_table(b, tokens, h, h0)
    if phase == Phase.PREFILL:
        return _attention_prefill(b, s, h, hq, hkv)
    return _attention_decode(b, s, h, hq, hkv, model.is_gqa, eff)


def tensor_parallel_table(module_kind: ModuleKind, phase: Phase, model: ModelSpec,
                          b: int, s: int, t: int, eff: EfficiencyParams) -> List[OpCost]:
    """Operator rows of one module sharded over t accelerators."""
    b, s, t = Fraction(b), Fraction(s), Fraction(t)
    h, h0 = Fraction(model.hidden_size), Fraction(model.intermediate_size)
    hq, hkv = Fraction(model.num_query_heads), Fraction(model.num_kv_heads)
    tokens = s if phase == Phase.PREFILL else Fraction(1)
    kind = ModuleKind(module_kind)
    if kind == ModuleKind.RMSNORM:
        return _rmsnorm_table(b, tokens, h)
    if kind == ModuleKind.MLP:
        return _mlp_table_tp(b, tokens, h, h0, t)
    if phase == Phase.PREFILL:
        return _attention_prefill_tp(b, s, h, hq, hkv, t)
    return _attention_decode_tp(b, s, h, hq, hkv, t, model.is_gqa, eff)


def op_table(module_kind: ModuleKind, phase: Phase, model: ModelSpec, b: int, s: int, t: int,
             eff: EfficiencyParams) -> List[OpCost]:
    """
    Work (FLOP) and traffic (bytes) of every operator in a module.

    For decode, `s` is the context length in the KV-Cache; normalization and
    MLP process one token per request. Decode attention includes the
    bandwidth-only KV-Cache update, head repetition (GQA models only) and
    upcast rows.

    Raises:
        ValueError: for an unknown module kind or t < 1.
    """
    try:
        kind = ModuleKind(module_kind)
    except ValueError:
        raise ValueError(f"Unknown module kind: {module_kind!r}") from None
    if t < 1:
        raise ValueError(f"Tensor parallel size must be >= 1 (got {t})")
    phase = Phase(phase)
    if t == 1:
        return single_device_table(kind, phase, model, b, s, eff)
    return tensor_parallel_table(kind, phase, model, b, s, t, eff)


# --- Module timing ---

def ops_time_ms(ops: List[OpCost], phase: Phase, hw: HardwareSpec, eff: EfficiencyParams) -> float:
    total_s = 0.0
    for op in ops:
        if op.kind == OpKind.BANDWIDTH_ONLY:
            total_s += op.traffic / op.bandwidth_rate
        else:
            total_s += op.work / roofline_perf(op.work, op.traffic, phase, hw, eff)
    return total_s * 1000.0


def module_compute_time(module_kind: ModuleKind, phase: Phase, model: ModelSpec, b: int, s: int,
                        t: int, hw: HardwareSpec, eff: EfficiencyParams) -> float:
    """Compute time of one module in milliseconds."""
    return ops_time_ms(op_table(module_kind, phase, model, b, s, t, eff), Phase(phase), hw, eff)


def comm_time(b: int, s_tokens: int, h: int, t: int, phase: Phase,
              hw: HardwareSpec, eff: EfficiencyParams) -> float:
    """Tensor-parallel synchronization cost in milliseconds; 0 without replicas."""
    if t <= 1:
        return 0.0
    pe = eff.for_phase(phase)
    transfer_ms = (b * s_tokens * h / t) / (pe.comm_eff * hw.peak_comm_bw) * 1000.0
    return max(hw.comm_latency_floor_ms, transfer_ms)


def module_costs(key: EstimateKey, model: ModelSpec, hw: HardwareSpec,
                 eff: EfficiencyParams) -> List[ModuleCost]:
    """Per-module dispatch/compute/communication costs of one Transformer block."""
    key.validate()
    phase = Phase(key.phase)
    if phase == Phase.PREFILL:
        context, tokens = key.seq, key.seq
    else:
        context, tokens = key.seq + key.gen, 1

    computed: Dict[ModuleKind, ModuleCost] = {}
    costs = []
    for kind in LAYER_MODULES:
        if kind not in computed:
            comm_ms = 0.0
            if kind in COMMUNICATING_MODULES:
                comm_ms = comm_time(key.batch, tokens, model.hidden_size, key.tp, phase, hw, eff)
            computed[kind] = ModuleCost(
                module=kind,
                dispatch_ms=hw.dispatch_ms[kind.value],
                compute_ms=module_compute_time(kind, phase, model, key.batch, context, key.tp, hw, eff),
                comm_ms=comm_ms,
            )
        costs.append(computed[kind])
    return costs


def layer_time(costs: List[ModuleCost]) -> float:
    """
    Latency of one block from its module costs.

    Dispatch is issued asynchronously on its own clock; a module starts
    computing once both its dispatch finished and the previous module's
    computation (and synchronization) completed.
    """
    dispatch_clock = 0.0
    compute_clock = 0.0
    for cost in costs:
        dispatch_clock += cost.dispatch_ms
        if dispatch_clock > compute_clock:
            # Dispatch-bound: the device idles until the kernel launch arrives
            start = dispatch_clock
        else:
            start = compute_clock
        compute_clock = start + cost.compute_ms + cost.comm_ms
    return compute_clock


def estimate_time(key: EstimateKey, model: ModelSpec, hw: HardwareSpec, eff: EfficiencyParams,
                  num_layers: Optional[int] = None) -> float:
    """
    Processing time of a batch in milliseconds.

    Prefill returns the time to process the prompt of every request in the
    batch. Decode returns the time to generate all `gen` tokens, evaluated
    per step at the final context length seq + gen.
    """
    layers = model.num_layers if num_layers is None else num_layers
    per_layer = layer_time(module_costs(key, model, hw, eff))
    if Phase(key.phase) == Phase.PREFILL:
        return layers * per_layer
    return key.gen * (layers * per_layer)


class Estimator:
    """
    Memoized batch-time oracle shared by the simulators.

    Safe to share across threads: dict.setdefault is atomic, and two threads racing on
    one key compute the same deterministic value.
    """

    def __init__(self, model: ModelSpec, hardware: HardwareSpec, efficiency: EfficiencyParams):
        self.model = model
        self.hardware = hardware
        self.efficiency = efficiency
        self._memo: Dict[EstimateKey, float] = {}

    def estimate_time(self, key: EstimateKey) -> float:
        cached = self._memo.get(key)
        if cached is not None:
            return cached
        value = estimate_time(key, self.model, self.hardware, self.efficiency)
        return self._memo.setdefault(key, value)

    def estimate(self, batch: int, seq: int, gen: int, tp: int, phase: Phase) -> float:
        return self.estimate_time(EstimateKey(batch, seq, gen, tp, Phase(phase)))

    def breakdown(self, key: EstimateKey) -> List[ModuleCost]:
        return module_costs(key, self.model, self.hardware, self.efficiency)

    def step_time(self, key: EstimateKey) -> float:
        """One forward pass over all layers (a single decode step for decode keys)."""
        return self.model.num_layers * layer_time(self.breakdown(key))

    @property
    def cache_size(self) -> int:
        return len(self._memo)
