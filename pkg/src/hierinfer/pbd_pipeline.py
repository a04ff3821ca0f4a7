"""Discrete-event model of the Prefill-Buffer-Decode pipeline.

Three logical stages exchange whole micro-batches. Prefill writes each
finished micro-batch (first token plus KV cache) into a bounded buffer;
decode pulls from it whenever a decode group is free. A prefill replica may
only start a new micro-batch while the buffer, counting slots reserved by
prefills already in flight, has room; otherwise the prefill stage is under
backpressure.

Events at equal times are ordered (time, stage P < B < D, id).
"""

from __future__ import annotations

import csv
import heapq
import io
import random
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Iterable, Mapping, Sequence

from .errors import ConfigError, InvalidArgument, SimulationError
from .kernel import LaunchMode, kernel_launch_overhead

STAGE_RANK = {"P": 0, "B": 1, "D": 2}


@dataclass(frozen=True)
class Request:
    id: int
    prompt_len: int
    gen_len: int
    arrival_time: float = 0.0

    def __post_init__(self):
        if self.prompt_len < 1 or self.gen_len < 1:
            raise InvalidArgument(f"request {self.id}: lengths must be >= 1")
        if self.arrival_time < 0:
            raise InvalidArgument(f"request {self.id}: arrival_time must be >= 0")


BATCHED_OPS = ("linear", "layernorm")
PER_REQUEST_OPS = ("attention",)


@dataclass(frozen=True)
class MicroBatch:
    id: int
    request_ids: tuple[int, ...]
    kv_bytes: int = 0
    batched_ops: tuple[str, ...] = BATCHED_OPS
    per_request_ops: tuple[str, ...] = PER_REQUEST_OPS

    def __post_init__(self):
        if not self.request_ids:
            raise InvalidArgument("micro-batch must hold at least one request")

    @property
    def size(self) -> int:
        return len(self.request_ids)


def form_batches(requests: Sequence[Request], max_batch: int = 4, policy: str = "selective",
                 kv_bytes_per_token: int = 0) -> list[MicroBatch]:
    """Greedy micro-batches in arrival order.

    ``selective``: shared-weight operators run once per micro-batch while
    attention runs per request. ``none``: every request is its own batch.
    """
    if not requests:
        raise InvalidArgument("no requests to batch")
    if policy not in ("selective", "none"):
        raise InvalidArgument(f"unknown batching policy {policy!r}")
    limit = max_batch if policy == "selective" else 1
    if limit < 1:
        raise InvalidArgument("max_batch must be >= 1")
    ordered = sorted(requests, key=lambda r: (r.arrival_time, r.id))
    out = []
    for i in range(0, len(ordered), limit):
        chunk = ordered[i:i + limit]
        kv = sum(r.prompt_len for r in chunk) * kv_bytes_per_token
        out.append(MicroBatch(len(out), tuple(r.id for r in chunk), kv,
                              BATCHED_OPS if policy == "selective" else (),
                              PER_REQUEST_OPS if policy == "selective" else BATCHED_OPS + PER_REQUEST_OPS))
    return out


@dataclass(frozen=True)
class ServiceModel:
    """Pluggable stage service times (seconds).

    With selective batching the shared-weight (linear) cost is charged once
    per micro-batch; attention is always charged per request. Prompts in a
    micro-batch are padded to the longest one.
    """

    prefill_linear_per_token: float = 2e-4
    prefill_attn_per_token: float = 2e-5
    decode_linear_per_step: float = 4e-3
    decode_attn_per_step: float = 5e-4
    kv_bytes_per_token: int = 524288
    kv_link_bandwidth: float = 12.5e9
    selective_batching: bool = True
    t_create_group: float = 0.0
    t_launch_group: float = 0.0
    kernels_per_pass: int = 1
    unified_launch: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, bool) and v < 0:
                raise InvalidArgument(f"{f.name} must be nonnegative")
        if self.kv_link_bandwidth <= 0 or self.kernels_per_pass < 1:
            raise InvalidArgument("kv_link_bandwidth and kernels_per_pass must be positive")

    def launch_time(self) -> float:
        mode = LaunchMode.UNIFIED if self.unified_launch else LaunchMode.PER_OP
        return kernel_launch_overhead(self.kernels_per_pass, mode, self.t_create_group,
                                      self.t_launch_group, [0.0] * self.kernels_per_pass)

    def prefill_parts(self, batch: int, prompt_len: int) -> tuple[float, float, float]:
        """(linear, attention, launch) seconds for one micro-batch prefill."""
        reps = 1 if self.selective_batching else batch
        linear = self.prefill_linear_per_token * prompt_len * reps
        attn = self.prefill_attn_per_token * prompt_len * batch
        return linear, attn, self.launch_time() * reps

    def decode_parts(self, batch: int) -> tuple[float, float, float]:
        reps = 1 if self.selective_batching else batch
        return (self.decode_linear_per_step * reps, self.decode_attn_per_step * batch,
                self.launch_time() * reps)

    def t_prefill(self, batch: int, prompt_len: int) -> float:
        return sum(self.prefill_parts(batch, prompt_len))

    def t_decode_step(self, batch: int) -> float:
        return sum(self.decode_parts(batch))

    def kv_transfer_time(self, nbytes: int) -> float:
        return nbytes / self.kv_link_bandwidth


@dataclass(frozen=True)
class PoolConfig:
    prefill_clusters: int = 1
    buffer_slots: int = 2
    decode_clusters: int = 1
    micro_batch_size: int = 4
    service: ServiceModel = field(default_factory=ServiceModel)
    overlap_transfers: bool = True
    decoupled: bool = True  # False: one shared pool alternates between prefill and decode

    def __post_init__(self):
        for name in ("prefill_clusters", "buffer_slots", "decode_clusters", "micro_batch_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise InvalidArgument(f"{name} must be an integer >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "PoolConfig":
        data = dict(data)
        svc = data.pop("service", {}) or {}
        known = {f.name for f in fields(cls)} - {"service"}
        svc_known = {f.name for f in fields(ServiceModel)}
        bad = sorted(set(data) - known) + sorted(f"service.{k}" for k in set(svc) - svc_known)
        if bad:
            raise ConfigError(f"unknown pool config key: {bad[0]!r}")
        try:
            return cls(service=ServiceModel(**svc), **data)
        except (InvalidArgument, TypeError) as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class TimelineEvent:
    time: float
    stage: str
    kind: str
    ref: int
    buffer_occupancy: int


@dataclass
class SimResult:
    throughput: float
    latencies: dict[int, float]
    max_buffer_occupancy: int
    backpressure_events: int
    timeline: list[TimelineEvent]
    tokens: int
    makespan: float
    completed: int
    unfinished: int
    micro_batches: int
    busy: dict[str, float]
    completion_times: list[float] = field(default_factory=list)

    def to_dict(self, with_timeline: bool = False) -> dict:
        out = {
            "throughput_tokens_per_s": self.throughput,
            "tokens": self.tokens,
            "makespan_s": self.makespan,
            "completed": self.completed,
            "unfinished": self.unfinished,
            "micro_batches": self.micro_batches,
            "max_buffer_occupancy": self.max_buffer_occupancy,
            "backpressure_events": self.backpressure_events,
            "mean_latency_s": (sum(self.latencies.values()) / len(self.latencies)) if self.latencies else 0.0,
            "latencies_s": {str(k): v for k, v in sorted(self.latencies.items())},
            "busy_s": dict(self.busy),
        }
        if with_timeline:
            out["timeline"] = [asdict(e) for e in self.timeline]
        return out

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "stage", "kind", "ref", "buffer_occupancy"])
        for e in self.timeline:
            w.writerow([repr(e.time), e.stage, e.kind, e.ref, e.buffer_occupancy])
        return buf.getvalue()


class _Sim:
    def __init__(self, requests: Sequence[Request], config: PoolConfig, horizon: float | None,
                 max_events: int | None):
        ids = [r.id for r in requests]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("request ids must be unique")
        self.cfg = config
        self.svc = config.service
        self.requests = {r.id: r for r in requests}
        self.horizon = float("inf") if horizon is None else horizon
        self.max_events = max_events if max_events is not None else 50 * (len(requests) + 1)
        self.heap: list = []
        self.seq = 0
        self.waiting: deque[Request] = deque()
        self.buffer: deque[MicroBatch] = deque()
        self.reserved = 0
        self.prefill_busy = 0
        self.decode_busy = 0
        self.blocked = False
        self.max_occ = 0
        self.backpressure = 0
        self.timeline: list[TimelineEvent] = []
        self.done: dict[int, float] = {}
        self.mb_count = 0
        self.busy = {"linear": 0.0, "attention": 0.0, "launch": 0.0, "kv_transfer": 0.0}
        self.mb_batches: dict[int, MicroBatch] = {}

    def push(self, t: float, stage: str, ref: int, kind: str, payload=None):
        heapq.heappush(self.heap, (t, STAGE_RANK[stage], ref, self.seq, stage, kind, payload))
        self.seq += 1

    def log(self, t, stage, kind, ref):
        self.timeline.append(TimelineEvent(t, stage, kind, ref, len(self.buffer)))

    def run(self) -> SimResult:
        for r in sorted(self.requests.values(), key=lambda r: (r.arrival_time, r.id)):
            self.push(r.arrival_time, "P", r.id, "arrival", r)
        n_events = 0
        while self.heap:
            t, _, ref, _, stage, kind, payload = heapq.heappop(self.heap)
            if t > self.horizon:
                break
            n_events += 1
            if n_events > self.max_events:
                raise SimulationError(
                    f"event budget of {self.max_events} exhausted at t={t}; configuration does not terminate")
            getattr(self, "on_" + kind)(t, ref, payload)
            if not self.heap or self.heap[0][0] > t:
                self.dispatch(t)
        return self.result()

    def on_arrival(self, t, ref, req):
        self.waiting.append(req)
        self.log(t, "P", "arrival", ref)

    def on_prefill_done(self, t, ref, mb):
        self.prefill_busy -= 1
        self.reserved -= 1
        self.buffer.append(mb)
        occ = len(self.buffer)
        assert occ <= self.cfg.buffer_slots, "buffer overflow"
        self.max_occ = max(self.max_occ, occ)
        self.log(t, "B", "buffer_put", ref)

    def on_decode_done(self, t, ref, mb):
        self.decode_busy -= 1
        self.log(t, "D", "decode_done", ref)

    def on_request_done(self, t, ref, _):
        self.done[ref] = t
        self.log(t, "D", "request_done", ref)

    def dispatch(self, t: float) -> None:
        cfg = self.cfg
        while self.decode_busy < cfg.decode_clusters and self.buffer and (cfg.decoupled or self.prefill_busy == 0):
            mb = self.buffer.popleft()
            self.decode_busy += 1
            self.log(t, "B", "buffer_pull", mb.id)
            self.start_decode(t, mb)
        while self.prefill_busy < cfg.prefill_clusters and self.waiting:
            if not cfg.decoupled and (self.decode_busy or self.buffer):
                break
            if len(self.buffer) + self.reserved >= cfg.buffer_slots:
                if not self.blocked:
                    self.blocked = True
                    self.backpressure += 1
                    self.log(t, "P", "backpressure", -1)
                break
            self.blocked = False
            self.start_prefill(t)

    def start_prefill(self, t: float) -> None:
        reqs = [self.waiting.popleft() for _ in range(min(self.cfg.micro_batch_size, len(self.waiting)))]
        prompt = max(r.prompt_len for r in reqs)
        kv = sum(r.prompt_len for r in reqs) * self.svc.kv_bytes_per_token
        mb = MicroBatch(self.mb_count, tuple(r.id for r in reqs), kv)
        self.mb_batches[mb.id] = mb
        self.mb_count += 1
        lin, attn, launch = self.svc.prefill_parts(len(reqs), prompt)
        self.busy["linear"] += lin
        self.busy["attention"] += attn
        self.busy["launch"] += launch
        self.reserved += 1
        self.prefill_busy += 1
        self.log(t, "P", "prefill_start", mb.id)
        self.push(t + lin + attn + launch, "P", mb.id, "prefill_done", mb)

    def start_decode(self, t: float, mb: MicroBatch) -> None:
        xfer = 0.0 if self.cfg.overlap_transfers else self.svc.kv_transfer_time(mb.kv_bytes)
        self.busy["kv_transfer"] += xfer
        reqs = [self.requests[i] for i in mb.request_ids]
        clock = t + xfer
        steps = max(r.gen_len for r in reqs)
        for step in range(1, steps + 1):
            active = sum(1 for r in reqs if r.gen_len >= step)
            lin, attn, launch = self.svc.decode_parts(active)
            self.busy["linear"] += lin
            self.busy["attention"] += attn
            self.busy["launch"] += launch
            clock += lin + attn + launch
            for r in reqs:
                if r.gen_len == step:
                    self.push(clock, "D", r.id, "request_done")
        self.log(t, "D", "decode_start", mb.id)
        self.push(clock, "D", mb.id, "decode_done", mb)

    def result(self) -> SimResult:
        lat = {i: t - self.requests[i].arrival_time for i, t in self.done.items()}
        tokens = sum(self.requests[i].gen_len for i in self.done)
        first = min((r.arrival_time for r in self.requests.values()), default=0.0)
        last = max(self.done.values(), default=first)
        span = last - first
        return SimResult(
            throughput=tokens / span if span > 0 else 0.0,
            latencies=lat,
            max_buffer_occupancy=self.max_occ,
            backpressure_events=self.backpressure,
            timeline=self.timeline,
            tokens=tokens,
            makespan=span,
            completed=len(self.done),
            unfinished=len(self.requests) - len(self.done),
            micro_batches=self.mb_count,
            busy=self.busy,
            completion_times=sorted(self.done.values()),
        )


def simulate(requests: Iterable[Request], config: PoolConfig, horizon: float | None = None,
             max_events: int | None = None) -> SimResult:
    """Run the pipeline to completion (or ``horizon``) on one deterministic event loop."""
    return _Sim(list(requests), config, horizon, max_events).run()


def analytic_throughput(t_p: float, t_d: float, dp_p: int, clu_pool: int, clu_total: int) -> float:
    """Relative throughput (clu_total/clu_pool) / max(t_p/dp_p, t_d)."""
    if min(t_p, t_d) <= 0 or min(dp_p, clu_pool, clu_total) < 1:
        raise InvalidArgument("times must be positive and counts >= 1")
    return (clu_total / clu_pool) / max(t_p / dp_p, t_d)


def steady_state_batch_rate(result: SimResult, batch_size: int, warmup: float = 0.2) -> float:
    """Micro-batches completed per second after discarding the first ``warmup`` fraction."""
    times = result.completion_times[batch_size - 1::batch_size]
    if len(times) < 3:
        raise InvalidArgument("not enough completed micro-batches for a steady-state estimate")
    start = int(len(times) * warmup)
    start = min(start, len(times) - 2)
    return (len(times) - 1 - start) / (times[-1] - times[start])


def random_workload(n: int, seed: int, prompt_range=(16, 1024), gen_range=(1, 128),
                    mean_interarrival: float = 0.0) -> list[Request]:
    """Seeded synthetic requests; interarrival gaps are exponential when the mean is positive."""
    rng = random.Random(seed)
    t = 0.0
    out = []
    for i in range(n):
        if mean_interarrival > 0:
            t += rng.expovariate(1.0 / mean_interarrival)
        out.append(Request(i, rng.randint(*prompt_range), rng.randint(*gen_range), t))
    return out


def load_workload(data: Any) -> list[Request]:
    """Requests from a parsed document: a list, or a mapping with a ``requests`` list."""
    if isinstance(data, Mapping):
        data = data.get("requests")
    if not isinstance(data, list):
        raise ConfigError("workload must be a list of requests")
    out = []
    for i, item in enumerate(data):
        if not isinstance(item, Mapping):
            raise ConfigError(f"request #{i} is not a mapping")
        extra = set(item) - {"id", "prompt_len", "gen_len", "arrival_time"}
        if extra:
            raise ConfigError(f"request #{i}: unknown key {sorted(extra)[0]!r}")
        try:
            out.append(Request(int(item.get("id", i)), int(item["prompt_len"]), int(item["gen_len"]),
                               float(item.get("arrival_time", 0.0))))
        except KeyError as exc:
            raise ConfigError(f"request #{i}: missing {exc.args[0]!r}") from None
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from None
    return out
