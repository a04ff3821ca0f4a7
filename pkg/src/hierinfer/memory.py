"""Tensors, the simulated memory hierarchy and the transfer log."""

from __future__ import annotations

import contextlib
import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import CapacityError, InvalidArgument
from .hw_model import HardwareSpec, Precision
from .tiling import MemLevel, TransferClass


def quantize(data: np.ndarray, precision: Precision) -> np.ndarray:
    """Round-trip ``data`` through the storage format; always returns float32."""
    out = np.asarray(data, dtype=np.float32)
    if precision is Precision.FP16:
        with np.errstate(over="ignore"):
            out = out.astype(np.float16).astype(np.float32)
    return out


@dataclass
class Tensor:
    """Row-major FP32 values with an emulated storage precision."""

    data: np.ndarray
    storage_precision: Precision = Precision.FP32

    def __post_init__(self):
        self.data = quantize(self.data, self.storage_precision)
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgument("tensor values must be finite"
                                  + (" (FP16 overflow?)" if self.storage_precision is Precision.FP16 else ""))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return int(self.data.size) * self.storage_precision.bytes_per_element

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.data).tobytes()).hexdigest()


def as_tensor(x, precision: Precision | None = None) -> Tensor:
    if isinstance(x, Tensor):
        if precision is None or precision is x.storage_precision:
            return x
        return Tensor(x.data, precision)
    return Tensor(np.asarray(x), precision or Precision.FP32)


class TransferKind(enum.Enum):
    DMA = "DMA"
    BROADCAST = "Broadcast"


@dataclass(frozen=True)
class TransferRecord:
    kind: TransferKind
    src: MemLevel
    dst: MemLevel
    bytes: int
    tag: str
    chunks: int = 1  # blocks streamed within this one logical transfer

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "src": self.src.value, "dst": self.dst.value,
                "bytes": self.bytes, "tag": self.tag, "chunks": self.chunks}


@dataclass
class TransferTrace:
    """Append-only ordered log of transfers."""

    records: list[TransferRecord] = field(default_factory=list)
    stats: dict[str, int] = field(default_factory=dict)

    def add(self, kind: TransferKind, src: MemLevel, dst: MemLevel, nbytes: int, tag: str,
            chunks: int = 1) -> None:
        if nbytes <= 0:
            raise InvalidArgument("transfer size must be positive")
        self.records.append(TransferRecord(kind, src, dst, int(nbytes), tag, chunks))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TransferRecord]:
        return iter(self.records)

    def by_tag(self) -> dict[str, TransferClass]:
        out: dict[str, TransferClass] = {}
        for r in self.records:
            out[r.tag] = out.get(r.tag, TransferClass(0, 0)) + TransferClass(1, r.bytes)
        return out

    def count(self, tag: str, kind: TransferKind | None = None) -> int:
        return sum(1 for r in self.records if r.tag == tag and (kind is None or r.kind is kind))

    def summary(self) -> dict:
        return {tag: {"count": tc.count, "bytes": tc.bytes} for tag, tc in sorted(self.by_tag().items())}

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(repr(r.to_dict()).encode())
        return h.hexdigest()


class SimMemory:
    """Occupancy counters per memory level and owner.

    SM and AM are private to a DSP (owner = DSP index), GSM and DDR are
    shared by the cluster. Exceeding a capacity raises immediately.
    """

    PRIVATE = (MemLevel.SM, MemLevel.AM)

    def __init__(self, spec: HardwareSpec):
        self.spec = spec
        self.capacity = {MemLevel.SM: spec.sm_bytes, MemLevel.AM: spec.am_bytes,
                         MemLevel.GSM: spec.gsm_bytes, MemLevel.DDR: spec.ddr_bytes}
        self.used: dict[tuple[MemLevel, int], int] = {}
        self.peak: dict[MemLevel, int] = {lvl: 0 for lvl in MemLevel}

    def _key(self, level: MemLevel, owner: int) -> tuple[MemLevel, int]:
        return (level, owner if level in self.PRIVATE else 0)

    def alloc(self, level: MemLevel, nbytes: int, owner: int = 0, step: str = "",
              hint: str = "") -> tuple[MemLevel, int, int]:
        key = self._key(level, owner)
        new = self.used.get(key, 0) + int(nbytes)
        if new > self.capacity[level]:
            where = f"{step} (dsp {owner})" if level in self.PRIVATE else step
            raise CapacityError(level.value, where, new, self.capacity[level], hint)
        self.used[key] = new
        self.peak[level] = max(self.peak[level], new)
        return (level, key[1], int(nbytes))

    def free(self, handle: tuple[MemLevel, int, int]) -> None:
        level, owner, nbytes = handle
        key = (level, owner)
        self.used[key] -= nbytes
        assert self.used[key] >= 0

    @contextlib.contextmanager
    def hold(self, level: MemLevel, nbytes: int, owner: int = 0, step: str = "", hint: str = ""):
        h = self.alloc(level, nbytes, owner, step, hint)
        try:
            yield h
        finally:
            self.free(h)

    def occupancy(self, level: MemLevel, owner: int = 0) -> int:
        return self.used.get(self._key(level, owner), 0)
