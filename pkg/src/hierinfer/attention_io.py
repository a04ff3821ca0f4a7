"""Analytic I/O operation counts and latency estimates for the two attention schedules."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

from .errors import InvalidArgument
from .hw_model import HardwareSpec, Precision
from .tiling import cdiv


class AttentionMethod(enum.Enum):
    MT = "mt"
    FLASH = "flash"


@dataclass(frozen=True)
class AttentionShape:
    s: int
    d: int = 128
    heads: int = 1
    m_r: int = 8
    m_c: int = 128

    def __post_init__(self):
        for name in ("s", "d", "heads", "m_r", "m_c"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise InvalidArgument(f"{name} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class IoCounts:
    q_dma: int
    o_dma: int
    k_broadcast: int
    v_broadcast: int

    def __post_init__(self):
        if min(self.q_dma, self.o_dma, self.k_broadcast, self.v_broadcast) < 0:
            raise InvalidArgument("I/O counts must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


CLASSES = ("q_dma", "o_dma", "k_broadcast", "v_broadcast")


def io_counts(shape: AttentionShape, method: AttentionMethod | str,
              spec: HardwareSpec | None = None) -> IoCounts:
    """Per-shape operation counts, linear in the number of heads."""
    spec = spec or HardwareSpec()
    method = AttentionMethod(method)
    h = shape.heads
    if method is AttentionMethod.FLASH:
        blocks = cdiv(shape.s, shape.m_c)
        return IoCounts(h * blocks, h * 2 * blocks, h, h)
    rounds = cdiv(shape.s, shape.m_r * spec.dsps_per_cluster)
    return IoCounts(h, h, h * rounds, h * rounds)


def uniform_op_bytes(shape: AttentionShape, precision: Precision = Precision.FP32) -> dict[str, int]:
    """Default cost unit: every counted operation moves one m_c x d block."""
    blk = shape.m_c * shape.d * precision.bytes_per_element
    return {c: blk for c in CLASSES}


def io_latency_estimate(counts: IoCounts, bytes_per_op: Mapping[str, int],
                        spec: HardwareSpec | None = None) -> float:
    """Seconds: DMAs at DDR bandwidth, broadcasts scaled by the broadcast/DMA latency ratio."""
    spec = spec or HardwareSpec()
    missing = [c for c in CLASSES if c not in bytes_per_op]
    if missing:
        raise InvalidArgument(f"bytes_per_op lacks {missing}")
    if any(bytes_per_op[c] <= 0 for c in CLASSES):
        raise InvalidArgument("bytes per operation must be positive")
    bw = spec.ddr_bandwidth
    f = spec.broadcast_latency_factor
    dma = counts.q_dma * bytes_per_op["q_dma"] + counts.o_dma * bytes_per_op["o_dma"]
    bc = counts.k_broadcast * bytes_per_op["k_broadcast"] + counts.v_broadcast * bytes_per_op["v_broadcast"]
    return dma / bw + f * bc / bw


def speedup_report(shapes: Iterable[AttentionShape], methods: Iterable[AttentionMethod | str] = ("mt", "flash"),
                   spec: HardwareSpec | None = None,
                   precision: Precision = Precision.FP32) -> list[dict]:
    """Rows of modeled counts and latency per (shape, method), plus MT/Flash ratios.

    A ``ratio_mt_over_flash`` entry is added to each MT row when both
    methods are requested.
    """
    spec = spec or HardwareSpec()
    methods = [AttentionMethod(m) for m in methods]
    rows = []
    for shape in shapes:
        est = {}
        for method in methods:
            c = io_counts(shape, method, spec)
            t = io_latency_estimate(c, uniform_op_bytes(shape, precision), spec)
            est[method] = t
            rows.append({"S": shape.s, "heads": shape.heads, "method": method.value,
                         "q_dma": c.q_dma, "o_dma": c.o_dma, "k_bc": c.k_broadcast,
                         "v_bc": c.v_broadcast, "est_ms": t * 1e3})
        if AttentionMethod.MT in est and AttentionMethod.FLASH in est:
            ratio = est[AttentionMethod.MT] / est[AttentionMethod.FLASH]
            for row in rows[-len(methods):]:
                if row["method"] == "mt":
                    row["ratio_mt_over_flash"] = ratio
    return rows
