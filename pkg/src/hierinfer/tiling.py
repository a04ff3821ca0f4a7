"""GEMM blocking constraints, analytic transfer counts and tile-plan search.

Loop structure assumed by :func:`dma_bytes` (and executed verbatim by
:func:`hierinfer.executor.gemm_tiled`):

BroadcastW (large M)::

    for each GSM row block (m_g rows):
        X_g -> GSM once if k_g covers K, else once per (n_2 block, k_g block)
        for each n_2 block:                # Y_2 stationary in AM
            for each k_2 block:
                broadcast W_2[k_2, n_2] to every DSP
                each DSP: X_2[m_2, k_2] GSM -> SM, accumulate
            each DSP: write Y_2 as ceil(rows / y_tile_rows) sub-tiles

BroadcastX (small M, M <= m_2)::

    for each wave of dsps_per_cluster column tiles:
        for each k_2 block:
            broadcast X[:, k_2] to every DSP
            each DSP: W_2[k_2, n_2] DDR -> AM, accumulate
        each DSP: write Y_2 sub-tiles

Edge tiles are clamped to the matrix, never padded.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterator

from .errors import InfeasibleError, InvalidArgument
from .hw_model import HardwareSpec, Precision

K2_CANDIDATES = (64, 128, 256, 512)


def cdiv(a: int, b: int) -> int:
    return -(-a // b)


def round_up(a: int, b: int) -> int:
    return cdiv(a, b) * b


def edge_sizes(total: int, block: int) -> Iterator[int]:
    """Sizes of consecutive clamped blocks covering ``total``."""
    for start in range(0, total, block):
        yield min(block, total - start)


class MemLevel(enum.Enum):
    SM = "SM"
    AM = "AM"
    GSM = "GSM"
    DDR = "DDR"


class Dataflow(enum.Enum):
    BROADCAST_W = "broadcast_w"
    BROADCAST_X = "broadcast_x"


@dataclass(frozen=True)
class GemmShape:
    m: int
    k: int
    n: int

    def __post_init__(self):
        for name in ("m", "k", "n"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise InvalidArgument(f"{name} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class TilePlan:
    m_g: int
    k_g: int
    m_2: int
    k_2: int
    n_2: int
    m_1: int = 6
    n_1: int = 128
    k_1: int | None = None
    dataflow: Dataflow = Dataflow.BROADCAST_W
    y_tile_rows: int | None = None

    def __post_init__(self):
        if self.k_1 is None:
            object.__setattr__(self, "k_1", self.k_2)
        if self.y_tile_rows is None:
            object.__setattr__(self, "y_tile_rows", min(self.m_1, self.m_2))
        if isinstance(self.dataflow, str):
            object.__setattr__(self, "dataflow", Dataflow(self.dataflow))
        for name in ("m_g", "k_g", "m_2", "k_2", "n_2", "m_1", "n_1", "k_1", "y_tile_rows"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise InvalidArgument(f"{name} must be a positive integer, got {v!r}")
        if self.n_1 > self.n_2:
            raise InvalidArgument("n_1 must not exceed n_2")
        if self.k_1 > self.k_2:
            raise InvalidArgument("k_1 must not exceed k_2")
        if self.y_tile_rows > self.m_2:
            raise InvalidArgument("y_tile_rows must not exceed m_2")

    @property
    def p_pieces(self) -> int:
        return cdiv(self.m_g, self.m_2)

    def replace(self, **changes) -> "TilePlan":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return TilePlan(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataflow"] = self.dataflow.value
        d["p_pieces"] = self.p_pieces
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TilePlan":
        data = {k: v for k, v in data.items() if k != "p_pieces"}
        return cls(**data)


@dataclass(frozen=True)
class CapacityCheck:
    level: MemLevel
    used_bytes: int
    limit_bytes: int

    @property
    def satisfied(self) -> bool:
        return self.used_bytes <= self.limit_bytes

    def to_dict(self) -> dict:
        return {"level": self.level.value, "used_bytes": self.used_bytes,
                "limit_bytes": self.limit_bytes, "satisfied": self.satisfied}


def check_outer_product(m: int, k: int, n: int, precision: Precision = Precision.FP32,
                        spec: HardwareSpec | None = None) -> list[CapacityCheck]:
    """Single-buffered outer-product kernel: X block in SM, W and Y blocks in AM."""
    spec = spec or HardwareSpec()
    b = precision.bytes_per_element
    return [
        CapacityCheck(MemLevel.SM, b * m * k, spec.sm_bytes),
        CapacityCheck(MemLevel.AM, b * k * n + b * m * n, spec.am_bytes),
    ]


def check_buffered_plan(plan: TilePlan, n_total: int, precision: Precision = Precision.FP32,
                        spec: HardwareSpec | None = None) -> list[CapacityCheck]:
    """SM/AM/GSM checks with double-buffered X_2, W_2 and triple-buffered Y_2.

    The AM budget also reserves one full output row of ``n_total`` elements.
    """
    spec = spec or HardwareSpec()
    b = precision.bytes_per_element
    return [
        CapacityCheck(MemLevel.SM, 2 * b * plan.m_2 * plan.k_2, spec.sm_bytes),
        CapacityCheck(MemLevel.AM,
                      2 * b * plan.k_2 * plan.n_2 + 3 * b * plan.m_2 * plan.n_2 + b * n_total,
                      spec.am_bytes),
        CapacityCheck(MemLevel.GSM, b * plan.k_g * plan.m_g, spec.gsm_bytes),
    ]


@dataclass(frozen=True)
class TransferClass:
    count: int
    bytes: int

    def __add__(self, other: "TransferClass") -> "TransferClass":
        return TransferClass(self.count + other.count, self.bytes + other.bytes)


@dataclass(frozen=True)
class DmaBytes:
    """Per-class transfer totals. Keys match the tags written by the executor."""

    dataflow: Dataflow
    x_ddr: TransferClass
    x_piece: TransferClass
    w: TransferClass
    y: TransferClass

    @property
    def offchip_bytes(self) -> int:
        return self.x_ddr.bytes + self.w.bytes + self.y.bytes

    def by_tag(self) -> dict[str, TransferClass]:
        return {"x_ddr": self.x_ddr, "x_piece": self.x_piece, "w": self.w, "y": self.y}

    def to_dict(self) -> dict:
        out = {"dataflow": self.dataflow.value, "offchip_bytes": self.offchip_bytes}
        for tag, tc in self.by_tag().items():
            out[tag] = {"count": tc.count, "bytes": tc.bytes}
        return out


def validate_plan_for_shape(plan: TilePlan, shape: GemmShape, spec: HardwareSpec) -> None:
    if plan.dataflow is Dataflow.BROADCAST_W:
        if plan.p_pieces > spec.dsps_per_cluster:
            raise InvalidArgument(
                f"plan has {plan.p_pieces} X_2 pieces per GSM block but only "
                f"{spec.dsps_per_cluster} DSPs")
    elif shape.m > plan.m_2:
        raise InvalidArgument("broadcast-X dataflow requires m <= m_2")


def dma_bytes(plan: TilePlan, shape: GemmShape, precision: Precision = Precision.FP32,
              spec: HardwareSpec | None = None) -> DmaBytes:
    spec = spec or HardwareSpec()
    validate_plan_for_shape(plan, shape, spec)
    b = precision.bytes_per_element
    m, k, n = shape.m, shape.k, shape.n
    nk2 = cdiv(k, plan.k_2)
    nn2 = cdiv(n, plan.n_2)
    zero = TransferClass(0, 0)

    if plan.dataflow is Dataflow.BROADCAST_X:
        waves = cdiv(nn2, spec.dsps_per_cluster)
        y_count = nn2 * cdiv(m, plan.y_tile_rows)
        return DmaBytes(
            Dataflow.BROADCAST_X,
            x_ddr=TransferClass(waves * nk2, waves * m * k * b),
            x_piece=zero,
            w=TransferClass(nn2 * nk2, k * n * b),
            y=TransferClass(y_count, m * n * b),
        )

    resident = plan.k_g >= k
    nkg = cdiv(k, plan.k_g)
    # k_2 blocking restarts at each k_g boundary
    nk2 = sum(cdiv(kg, plan.k_2) for kg in edge_sizes(k, plan.k_g))
    x_ddr = zero
    x_piece = zero
    w = zero
    y = zero
    for mg in edge_sizes(m, plan.m_g):
        x_loads = nkg if resident else nkg * nn2
        x_ddr += TransferClass(x_loads, (1 if resident else nn2) * mg * k * b)
        pieces = list(edge_sizes(mg, plan.m_2))
        x_piece += TransferClass(len(pieces) * nk2 * nn2, nn2 * mg * k * b)
        w += TransferClass(nk2 * nn2, k * n * b)
        y += TransferClass(nn2 * sum(cdiv(p, plan.y_tile_rows) for p in pieces), mg * n * b)
    return DmaBytes(Dataflow.BROADCAST_W, x_ddr, x_piece, w, y)


def plan_score(plan: TilePlan, shape: GemmShape, precision: Precision,
               spec: HardwareSpec) -> Fraction:
    """Modeled MACs per off-chip byte. Larger is better."""
    return Fraction(shape.m * shape.k * shape.n, dma_bytes(plan, shape, precision, spec).offchip_bytes)


def choose_dataflow(shape: GemmShape, spec: HardwareSpec, m_1: int = 6) -> Dataflow:
    if shape.m < m_1 * spec.dsps_per_cluster:
        return Dataflow.BROADCAST_X
    return Dataflow.BROADCAST_W


def _k_g_candidates(k: int, k_2: int) -> list[int]:
    top = round_up(k, k_2)
    out = []
    v = k_2
    while v < top:
        out.append(v)
        v *= 2
    out.append(top)
    return out


def _candidates(shape: GemmShape, precision: Precision, spec: HardwareSpec,
                m_1: int, n_1: int, flow: Dataflow) -> Iterator[TilePlan]:
    b = precision.bytes_per_element
    n2_top = round_up(shape.n, n_1)
    for k_2 in K2_CANDIDATES:
        if flow is Dataflow.BROADCAST_X:
            m2_values = [round_up(shape.m, m_1)]
        else:
            m2_top = min(round_up(shape.m, m_1), spec.sm_bytes // (2 * b * k_2))
            m2_values = range(m_1, max(m2_top, m_1) + 1, m_1)
        n2_top_am = max(n_1, min(n2_top, spec.am_bytes // (2 * b * k_2)))
        for m_2 in m2_values:
            m_g = m_2 if flow is Dataflow.BROADCAST_X else m_2 * spec.dsps_per_cluster
            k_g_values = [k_2] if flow is Dataflow.BROADCAST_X else _k_g_candidates(shape.k, k_2)
            for n_2 in range(n_1, n2_top_am + 1, n_1):
                for k_g in k_g_values:
                    yield TilePlan(m_g=m_g, k_g=k_g, m_2=m_2, k_2=k_2, n_2=n_2,
                                   m_1=m_1, n_1=n_1, dataflow=flow,
                                   y_tile_rows=min(m_1, m_2))


def minimal_candidate(shape: GemmShape, spec: HardwareSpec, m_1: int = 6, n_1: int = 128) -> TilePlan:
    flow = choose_dataflow(shape, spec, m_1)
    m_2 = round_up(shape.m, m_1) if flow is Dataflow.BROADCAST_X else m_1
    k_2 = K2_CANDIDATES[0]
    m_g = m_2 if flow is Dataflow.BROADCAST_X else m_2 * spec.dsps_per_cluster
    return TilePlan(m_g=m_g, k_g=k_2, m_2=m_2, k_2=k_2, n_2=n_1, m_1=m_1, n_1=n_1,
                    dataflow=flow, y_tile_rows=min(m_1, m_2))


def search_tile_plan(shape: GemmShape, precision: Precision = Precision.FP32,
                     spec: HardwareSpec | None = None, m_1: int = 6, n_1: int = 128) -> TilePlan:
    """Grid search for the feasible plan with the best MACs-per-off-chip-byte.

    Ties go to larger m_2*n_2, then to the lexicographically smallest
    (m_g, k_g, m_2, k_2, n_2). The result is independent of iteration order.
    If broadcast-X has no feasible plan (X[:, k_2] too tall for SM), the
    broadcast-W nest is searched instead.
    """
    spec = spec or HardwareSpec()
    preferred = choose_dataflow(shape, spec, m_1)
    flows = [preferred]
    if preferred is Dataflow.BROADCAST_X:
        flows.append(Dataflow.BROADCAST_W)
    best = None
    for flow in flows:
        best_key = None
        for plan in _candidates(shape, precision, spec, m_1, n_1, flow):
            if not all(c.satisfied for c in check_buffered_plan(plan, shape.n, precision, spec)):
                continue
            lex = (plan.m_g, plan.k_g, plan.m_2, plan.k_2, plan.n_2)
            key = (plan_score(plan, shape, precision, spec), plan.m_2 * plan.n_2,
                   tuple(-v for v in lex))
            if best_key is None or key > best_key:
                best, best_key = plan, key
        if best is not None:
            break
    if best is None:
        smallest = minimal_candidate(shape, spec, m_1, n_1)
        failed = [c for c in check_buffered_plan(smallest, shape.n, precision, spec)
                  if not c.satisfied]
        detail = "; ".join(f"{c.level.value}: {c.used_bytes} > {c.limit_bytes}" for c in failed)
        binding = failed[0].level.value if failed else None
        raise InfeasibleError(f"no feasible tile plan; smallest candidate violates {detail}",
                              binding=binding)
    return best
