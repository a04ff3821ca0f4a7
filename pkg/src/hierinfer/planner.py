"""Memory, communication and throughput models for hybrid-parallel deployment.

Prefill runs pipeline parallel over ``pp_p`` clusters and is replicated
``dp_p`` times; decode runs ``tp`` x ``pp_d`` clusters; a buffer pool of
``buffer_pool_clusters`` holds KV caches between the two. All byte counts
are exact; time ratios use Fractions so tie-breaking is deterministic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from typing import Any, Mapping

from .errors import ConfigError, InfeasibleError, InvalidArgument
from .hw_model import HardwareSpec, Precision, as_fraction

GIB = 1 << 30


def _positive_ints(obj, names):
    for name in names:
        v = getattr(obj, name)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise InvalidArgument(f"{name} must be an integer >= 1, got {v!r}")


@dataclass(frozen=True)
class ModelSpec:
    model_size_bytes: int
    layers: int
    s_max: int
    d_emb: int
    precision: Precision = Precision.FP16

    def __post_init__(self):
        object.__setattr__(self, "precision", Precision.parse(self.precision))
        _positive_ints(self, ("model_size_bytes", "layers", "s_max", "d_emb"))

    @property
    def d_size(self) -> int:
        return self.precision.bytes_per_element

    def kv_bytes_per_request(self) -> int:
        """Full-depth KV cache of one request at s_max tokens."""
        return self.s_max * 2 * self.d_size * self.d_emb * self.layers

    def to_dict(self) -> dict:
        return {**asdict(self), "precision": self.precision.value}

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ModelSpec":
        data = dict(data)
        if "model_size_bytes" in data:
            data["model_size_bytes"] = int(data["model_size_bytes"])
        return _build(cls, data, "model")


@dataclass(frozen=True)
class ParallelConfig:
    tp: int = 1
    pp_p: int = 1
    pp_d: int = 1
    dp_p: int = 1
    dp_d: int = 1
    b_micro_p: int = 1
    b_micro_d: int = 1
    buffer_pool_clusters: int = 1

    def __post_init__(self):
        _positive_ints(self, [f.name for f in fields(self)])
        if self.dp_d != 1:
            raise InvalidArgument("dp_d is fixed to 1")

    @property
    def batch(self) -> int:
        return self.pp_d * self.b_micro_d

    def to_dict(self) -> dict:
        return {**asdict(self), "batch": self.batch}

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ParallelConfig":
        data = {k: v for k, v in data.items() if k != "batch"}
        return _build(cls, data, "parallel config")


@dataclass(frozen=True)
class LayerTimes:
    """Per-layer component times and the DP=1 stage latencies (seconds).

    ``t_d`` is the decode stage latency at tp=1; other tp degrees scale it
    by the ratio of per-layer times.
    """

    t_norm: float = 0.0
    t_self_attention: float = 0.0
    t_ffn: float = 0.0
    t_all_reduce: float = 0.0
    t_launch_group: float = 0.0
    t_p: float = 1.0
    t_d: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidArgument(f"{f.name} must be nonnegative")
        if self.t_p <= 0 or self.t_d <= 0:
            raise InvalidArgument("t_p and t_d must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "LayerTimes":
        return _build(cls, dict(data), "layer times")


def _build(cls, data: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {what} key: {unknown[0]!r}")
    try:
        return cls(**data)
    except (InvalidArgument, TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from None


@dataclass(frozen=True)
class Footprint:
    params: Fraction
    kv: int

    @property
    def total(self) -> Fraction:
        return self.params + self.kv


def prefill_memory(model: ModelSpec, cfg: ParallelConfig) -> Footprint:
    """Per-cluster bytes while prefilling; KV counts a single layer (taken literally)."""
    params = Fraction(model.model_size_bytes, cfg.pp_p)
    kv = cfg.b_micro_p * model.s_max * 2 * model.d_size * model.d_emb
    return Footprint(params, kv)


def decode_memory(model: ModelSpec, cfg: ParallelConfig) -> Footprint:
    params = Fraction(model.model_size_bytes, cfg.tp * cfg.pp_d)
    kv = Fraction(cfg.b_micro_d * model.s_max * 2 * model.d_size * model.d_emb * model.layers, cfg.tp)
    return Footprint(params, kv)


@dataclass(frozen=True)
class StageMargin:
    stage: str
    params: Fraction
    kv: Fraction
    overhead: int
    limit: int

    @property
    def used(self) -> Fraction:
        return self.params + self.kv + self.overhead

    @property
    def margin(self) -> Fraction:
        return self.limit - self.used

    @property
    def ok(self) -> bool:
        return self.used < self.limit

    def to_dict(self) -> dict:
        return {"stage": self.stage, "params_bytes": float(self.params), "kv_bytes": float(self.kv),
                "overhead_bytes": self.overhead, "used_bytes": float(self.used),
                "limit_bytes": self.limit, "margin_bytes": float(self.margin), "ok": self.ok}


@dataclass(frozen=True)
class FeasibilityReport:
    prefill: StageMargin
    decode: StageMargin

    @property
    def feasible(self) -> bool:
        return self.prefill.ok and self.decode.ok

    def __bool__(self) -> bool:
        return self.feasible

    def to_dict(self) -> dict:
        return {"feasible": self.feasible, "prefill": self.prefill.to_dict(), "decode": self.decode.to_dict()}


def _margin(stage: str, fp: Footprint, overhead: int, spec: HardwareSpec) -> StageMargin:
    return StageMargin(stage, Fraction(fp.params), Fraction(fp.kv), overhead, spec.ddr_bytes)


def feasible(model: ModelSpec, cfg: ParallelConfig, overhead_bytes: int = GIB,
             spec: HardwareSpec | None = None) -> FeasibilityReport:
    """params + kv + overhead strictly below per-cluster DDR, for both stages."""
    spec = spec or HardwareSpec()
    if overhead_bytes < 0:
        raise InvalidArgument("overhead_bytes must be nonnegative")
    return FeasibilityReport(_margin("prefill", prefill_memory(model, cfg), overhead_bytes, spec),
                             _margin("decode", decode_memory(model, cfg), overhead_bytes, spec))


def tp_comm_bytes(cfg: ParallelConfig, model: ModelSpec) -> int:
    """All-reduce bytes per decode step inside one TP group."""
    return cfg.batch * 2 * model.d_emb * model.d_size * (cfg.tp - 1)


def layer_time(times: LayerTimes, tp: int) -> Fraction:
    if tp < 1:
        raise InvalidArgument("tp must be >= 1")
    norm = as_fraction(times.t_norm)
    attn = as_fraction(times.t_self_attention)
    ffn = as_fraction(times.t_ffn)
    if tp == 1:
        return 2 * norm + attn + ffn
    return (2 * norm + (attn + ffn) / tp + 2 * as_fraction(times.t_all_reduce)
            + 2 * as_fraction(times.t_launch_group))


def tp_benefits(times: LayerTimes, tp: int) -> bool:
    """Closed-form condition for layer_time(tp) < layer_time(1)."""
    work = as_fraction(times.t_self_attention) + as_fraction(times.t_ffn)
    cost = 2 * (as_fraction(times.t_all_reduce) + as_fraction(times.t_launch_group))
    return tp > 1 and work * (1 - Fraction(1, tp)) > cost


def pool_clusters(cfg: ParallelConfig) -> int:
    return cfg.dp_p * cfg.pp_p + cfg.tp * cfg.pp_d + cfg.buffer_pool_clusters


def decode_stage_time(times: LayerTimes, tp: int) -> Fraction:
    base = layer_time(times, 1)
    t_d = as_fraction(times.t_d)
    return t_d if base == 0 else t_d * layer_time(times, tp) / base


def objective(cfg: ParallelConfig, times: LayerTimes) -> Fraction:
    """Cost to minimize: pool size x bottleneck stage time."""
    t_p = as_fraction(times.t_p)
    return pool_clusters(cfg) * max(t_p / cfg.dp_p, decode_stage_time(times, cfg.tp))


def relative_throughput(cfg: ParallelConfig, times: LayerTimes, clu_total: int) -> Fraction:
    t_p = as_fraction(times.t_p)
    return Fraction(clu_total, pool_clusters(cfg)) / max(t_p / cfg.dp_p, decode_stage_time(times, cfg.tp))


def choose_dp_p(t_p, t_d, pool_for_dp) -> tuple[int, Fraction]:
    """argmin over dp_p of pool(dp_p) * max(t_p/dp_p, t_d); ties keep the smallest dp_p.

    ``pool_for_dp`` maps each candidate dp_p (in increasing order) to its pool size.
    """
    t_p, t_d = as_fraction(t_p), as_fraction(t_d)
    best = None
    for dp, pool in pool_for_dp.items():
        obj = pool * max(t_p / dp, t_d)
        if best is None or obj < best[1] or (obj == best[1] and pool < best[2]):
            best = (dp, obj, pool)
    if best is None:
        raise InvalidArgument("no dp_p candidates")
    return best[0], best[1]


@dataclass
class SearchResult:
    config: ParallelConfig
    objective: Fraction
    throughput: Fraction
    feasibility: FeasibilityReport
    trace: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "pool_clusters": pool_clusters(self.config),
                "objective": float(self.objective), "relative_throughput": float(self.throughput),
                "feasibility": self.feasibility.to_dict(), "trace": list(self.trace),
                "notes": list(self.notes)}


def _min_pp(size: int, stage_fixed: Fraction, per: int, overhead: int, limit: int, cap: int) -> int | None:
    """Smallest pp with size/(per*pp) + stage_fixed + overhead < limit."""
    room = limit - overhead - stage_fixed
    if room <= 0:
        return None
    pp = max(1, math.floor(Fraction(size, per) / room) + 1)
    while Fraction(size, per * pp) >= room:
        pp += 1
    return pp if pp <= cap else None


def _decode_pp(model, tp, b_micro_d, overhead, spec, cap):
    kv = decode_memory(model, ParallelConfig(tp=tp, b_micro_d=b_micro_d)).kv
    return _min_pp(model.model_size_bytes, kv, tp, overhead, spec.ddr_bytes, cap)


def _prefill_pp(model, b_micro_p, overhead, spec, cap):
    kv = prefill_memory(model, ParallelConfig(b_micro_p=b_micro_p)).kv
    return _min_pp(model.model_size_bytes, Fraction(kv), 1, overhead, spec.ddr_bytes, cap)


def buffer_pool_size(model: ModelSpec, batch: int, spec: HardwareSpec) -> int:
    return max(1, -(-batch * model.kv_bytes_per_request() // spec.ddr_bytes))


def search_config(model: ModelSpec, spec: HardwareSpec | None = None, times: LayerTimes | None = None,
                  overhead: int = GIB, clu_total: int | None = None, b_micro_p: int = 1,
                  b_micro_d: int = 4, comm_budget_bytes: int | None = None, max_tp: int = 8,
                  max_pp: int = 64, max_dp: int | None = None) -> SearchResult:
    """Staged search: tp, pp_d, batch, buffer pool, pp_p, then dp_p."""
    spec = spec or HardwareSpec()
    times = times or LayerTimes()
    clu_total = spec.clusters_total if clu_total is None else clu_total
    trace: list[str] = []

    # (i)+(ii): tp minimizing layer time among degrees with a feasible decode layout
    options = []
    comm_blocked = mem_blocked = 0
    for tp in range(1, max_tp + 1):
        pp_d = _decode_pp(model, tp, b_micro_d, overhead, spec, max_pp)
        if pp_d is None:
            mem_blocked += 1
            continue
        comm = tp_comm_bytes(ParallelConfig(tp=tp, pp_d=pp_d, b_micro_d=b_micro_d), model)
        if comm_budget_bytes is not None and comm > comm_budget_bytes:
            comm_blocked += 1
            continue
        options.append((layer_time(times, tp), tp, pp_d, comm))
    if not options:
        binding = "tp communication budget" if comm_blocked else "decode memory"
        raise InfeasibleError(f"no tp in 1..{max_tp} admits a feasible decode layout "
                              f"(pp_d <= {max_pp}); binding constraint: {binding}", binding)
    lt, tp, pp_d, comm = min(options, key=lambda o: (o[0], o[1]))
    trace.append(f"tp={tp}: per-layer time {float(lt):.6g} s is minimal over {len(options)} admissible degrees "
                 f"(all-reduce {comm} B/step)")
    trace.append(f"pp_d={pp_d}: smallest pipeline depth fitting decode params+KV under {spec.ddr_bytes} B")
    batch = pp_d * b_micro_d
    trace.append(f"B={batch}: pp_d x b_micro_d")
    b_p = buffer_pool_size(model, batch, spec)
    trace.append(f"buffer_pool_clusters={b_p}: ceil(B x {model.kv_bytes_per_request()} B KV / DDR)")
    pp_p = _prefill_pp(model, b_micro_p, overhead, spec, max_pp)
    if pp_p is None:
        raise InfeasibleError(f"prefill does not fit with pp_p <= {max_pp}; binding constraint: prefill memory",
                              "prefill memory")
    trace.append(f"pp_p={pp_p}: smallest prefill pipeline depth fitting params+KV")

    base = ParallelConfig(tp=tp, pp_p=pp_p, pp_d=pp_d, b_micro_p=b_micro_p, b_micro_d=b_micro_d,
                          buffer_pool_clusters=b_p)
    fixed = pool_clusters(base) - pp_p
    dp_cap = (clu_total - fixed) // pp_p
    if max_dp is not None:
        dp_cap = min(dp_cap, max_dp)
    if dp_cap < 1:
        raise InfeasibleError(f"pool needs {pool_clusters(base)} clusters but only {clu_total} exist; "
                              "binding constraint: cluster budget", "cluster budget")
    t_d_eff = decode_stage_time(times, tp)
    dp_p, obj = choose_dp_p(times.t_p, t_d_eff, {d: fixed + d * pp_p for d in range(1, dp_cap + 1)})
    cfg = replace(base, dp_p=dp_p)
    trace.append(f"dp_p={dp_p}: minimizes pool x max(t_p/dp_p, t_d) = {float(obj):.6g} over 1..{dp_cap}")
    report = feasible(model, cfg, overhead, spec)
    assert report.feasible
    notes = []
    full_kv = prefill_memory(model, cfg).kv * model.layers
    if prefill_memory(model, cfg).params + full_kv + overhead >= spec.ddr_bytes:
        notes.append("prefill KV is counted for one layer; counting all layers would make this prefill "
                     "layout infeasible")
    return SearchResult(cfg, obj, relative_throughput(cfg, times, clu_total), report, trace, notes)


@dataclass(frozen=True)
class EnumerationResult:
    config: ParallelConfig | None
    objective: Fraction | None
    evaluated: int


def enumerate_configs(model: ModelSpec, spec: HardwareSpec | None = None, times: LayerTimes | None = None,
                      overhead: int = GIB, clu_total: int | None = None, b_micro_p: int = 1,
                      b_micro_d: int = 4, comm_budget_bytes: int | None = None, max_tp: int = 4,
                      max_pp_d: int = 8, max_dp: int = 8, max_pp_p: int = 64) -> EnumerationResult:
    """Exhaustive minimum of the objective over (tp, pp_d, dp_p) with pp_p and buffer pool derived."""
    spec = spec or HardwareSpec()
    times = times or LayerTimes()
    clu_total = spec.clusters_total if clu_total is None else clu_total
    pp_p = _prefill_pp(model, b_micro_p, overhead, spec, max_pp_p)
    best, best_obj, n = None, None, 0
    if pp_p is None:
        return EnumerationResult(None, None, 0)
    for tp, pp_d, dp_p in itertools.product(range(1, max_tp + 1), range(1, max_pp_d + 1), range(1, max_dp + 1)):
        b_p = buffer_pool_size(model, pp_d * b_micro_d, spec)
        cfg = ParallelConfig(tp=tp, pp_p=pp_p, pp_d=pp_d, dp_p=dp_p, b_micro_p=b_micro_p,
                             b_micro_d=b_micro_d, buffer_pool_clusters=b_p)
        if pool_clusters(cfg) > clu_total or not feasible(model, cfg, overhead, spec):
            continue
        if comm_budget_bytes is not None and tp_comm_bytes(cfg, model) > comm_budget_bytes:
            continue
        n += 1
        obj = objective(cfg, times)
        if best_obj is None or obj < best_obj:
            best, best_obj = cfg, obj
    return EnumerationResult(best, best_obj, n)
