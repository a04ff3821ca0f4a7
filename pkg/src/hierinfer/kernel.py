"""Five-slot VLIW bundle model: hazard checking, steady-state metrics, launch overhead.

The pipeline is in-order and issues one bundle per cycle. A schedule is
never repaired; read-after-write distances shorter than the producer's
latency are reported.

Text format, one bundle per line::

    @loop                                  # optional: body of a software-pipelined loop
    VMAC:vfmulas32 acc<-x0,w0,acc; VLDST:vldw w1<-
    -                                      # empty bundle
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .errors import InvalidArgument, ScheduleHazardError


class Slot(enum.Enum):
    VMAC = "VMAC"
    SMAC = "SMAC"
    SLDST = "SLDST"
    VLDST = "VLDST"
    SIEU = "SIEU"


@dataclass(frozen=True)
class InstructionClass:
    name: str
    latency_cycles: int
    slot: Slot
    assumed: bool = False  # latency not taken from measured instruction data


# Measured latencies for the GEMM kernel instructions; the vector ops used by
# the fused Linear-RoPE epilogue have no measured latency and default to 1.
LATENCY_TABLE: dict[str, InstructionClass] = {
    c.name: c
    for c in (
        InstructionClass("vfmulas32", 6, Slot.VMAC),
        InstructionClass("svbcast", 4, Slot.SMAC),
        InstructionClass("sldh", 7, Slot.SLDST),
        InstructionClass("sbale2", 1, Slot.SIEU),
        InstructionClass("vldw", 9, Slot.VLDST),
        InstructionClass("vec_neg", 1, Slot.VMAC, assumed=True),
        InstructionClass("bale2lh", 1, Slot.VMAC, assumed=True),
        InstructionClass("vec_muli", 1, Slot.VMAC, assumed=True),
        InstructionClass("vm_sinf32_u35", 1, Slot.VMAC, assumed=True),
        InstructionClass("vm_cosf32_u35", 1, Slot.VMAC, assumed=True),
        InstructionClass("mula", 1, Slot.VMAC, assumed=True),
        InstructionClass("generic", 1, Slot.SIEU, assumed=True),
    )
}


def latency_table(overrides: Mapping[str, int] | None = None) -> dict[str, InstructionClass]:
    """Copy of the built-in table with selected latencies replaced."""
    table = dict(LATENCY_TABLE)
    for name, lat in (overrides or {}).items():
        if name not in table:
            raise InvalidArgument(f"unknown instruction {name!r}")
        if lat < 1:
            raise InvalidArgument(f"latency of {name} must be >= 1")
        base = table[name]
        table[name] = InstructionClass(name, int(lat), base.slot, assumed=base.assumed)
    return table


@dataclass(frozen=True)
class Instruction:
    opcode: str
    dst: str | None
    srcs: tuple[str, ...] = ()

    def __post_init__(self):
        if self.dst == "" or any(not s for s in self.srcs):
            raise InvalidArgument(f"{self.opcode}: register names must be nonempty")

    def __str__(self) -> str:
        return f"{self.opcode} {self.dst or ''}<-{','.join(self.srcs)}"


@dataclass(frozen=True)
class Bundle:
    slots: Mapping[Slot, Instruction] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "slots", {Slot(s): i for s, i in dict(self.slots).items()})

    def __iter__(self):
        for slot in Slot:
            if slot in self.slots:
                yield slot, self.slots[slot]


@dataclass(frozen=True)
class Schedule:
    bundles: tuple[Bundle, ...] = ()
    loop_body: bool = False

    def __post_init__(self):
        object.__setattr__(self, "bundles", tuple(self.bundles))

    def __len__(self) -> int:
        return len(self.bundles)

    def without(self, index: int) -> "Schedule":
        return Schedule(self.bundles[:index] + self.bundles[index + 1:], self.loop_body)

    def to_text(self) -> str:
        lines = ["@loop"] if self.loop_body else []
        for b in self.bundles:
            parts = [f"{slot.value}:{ins}" for slot, ins in b]
            lines.append("; ".join(parts) if parts else "-")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Hazard:
    consumer_index: int
    slot: Slot
    register: str
    required: int
    actual: int
    producer_index: int

    def to_dict(self) -> dict:
        return {"consumer_index": self.consumer_index, "slot": self.slot.value,
                "register": self.register, "required": self.required,
                "actual": self.actual, "producer_index": self.producer_index}


@dataclass(frozen=True)
class HazardReport:
    violations: tuple[Hazard, ...] = ()
    assumed_latencies: tuple[str, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"valid": self.valid,
                "violations": [h.to_dict() for h in self.violations],
                "assumed_latencies": list(self.assumed_latencies)}


def parse_schedule(text: str, loop_body: bool | None = None) -> Schedule:
    """Parse the line-oriented bundle format. ``loop_body`` overrides ``@loop``."""
    bundles = []
    is_loop = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "@loop":
            is_loop = True
            continue
        if line == "-":
            bundles.append(Bundle())
            continue
        slots: dict[Slot, Instruction] = {}
        for part in line.split(";"):
            part = part.strip()
            if not part:
                continue
            try:
                slot_name, rest = part.split(":", 1)
                slot = Slot(slot_name.strip().upper())
            except ValueError:
                raise InvalidArgument(f"line {lineno}: expected SLOT:opcode, got {part!r}") from None
            if slot in slots:
                raise InvalidArgument(f"line {lineno}: slot {slot.value} used twice in one bundle")
            rest = rest.strip()
            opcode, _, operands = rest.partition(" ")
            operands = operands.replace(" ", "")
            if "<-" in operands:
                dst, src = operands.split("<-", 1)
            else:
                dst, src = operands, ""
            srcs = tuple(s for s in src.split(",") if s) if src else ()
            slots[slot] = Instruction(opcode, dst or None, srcs)
        bundles.append(Bundle(slots))
    return Schedule(tuple(bundles), is_loop if loop_body is None else loop_body)


PRESETS = {"gemm-microkernel": "gemm_microkernel.txt"}


def load_preset(name: str) -> Schedule:
    try:
        fname = PRESETS[name]
    except KeyError:
        raise InvalidArgument(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
    text = resources.files("hierinfer").joinpath("presets").joinpath(fname).read_text(encoding="utf-8")
    return parse_schedule(text)


def _classes_for(s: Schedule, classes: Mapping[str, InstructionClass]) -> None:
    for b in s.bundles:
        for _, ins in b:
            if ins.opcode not in classes:
                raise InvalidArgument(f"unknown instruction {ins.opcode!r}")


def validate_schedule(s: Schedule,
                      classes: Mapping[str, InstructionClass] | None = None) -> HazardReport:
    """Check every source operand against the latency of its most recent producer.

    Distances count bundles. In a loop body they wrap, so a value produced
    late in the body feeds an early bundle of the next iteration.
    """
    classes = LATENCY_TABLE if classes is None else classes
    _classes_for(s, classes)
    n = len(s.bundles)
    producers: dict[str, list[tuple[int, str]]] = {}
    used: set[str] = set()
    for idx, b in enumerate(s.bundles):
        for _, ins in b:
            used.add(ins.opcode)
            if ins.dst is not None:
                producers.setdefault(ins.dst, []).append((idx, ins.opcode))

    hazards = []
    for c, b in enumerate(s.bundles):
        for slot, ins in b:
            for reg in dict.fromkeys(ins.srcs):
                best = None
                for p, opcode in producers.get(reg, ()):
                    if s.loop_body:
                        d = (c - p) % n or n
                    elif p < c:
                        d = c - p
                    else:
                        continue
                    if best is None or d < best[0]:
                        best = (d, p, opcode)
                if best is None:
                    continue
                d, p, opcode = best
                need = classes[opcode].latency_cycles
                if d < need:
                    hazards.append(Hazard(c, slot, reg, need, d, p))
    assumed = tuple(sorted(op for op in used if classes[op].assumed))
    return HazardReport(tuple(hazards), assumed)


@dataclass(frozen=True)
class KernelMetrics:
    cycles_per_iteration: int
    slot_occupancy: dict[str, float]
    vmac_flops_per_iteration: int

    def to_dict(self) -> dict:
        return {"cycles_per_iteration": self.cycles_per_iteration,
                "slot_occupancy": dict(self.slot_occupancy),
                "vmac_flops_per_iteration": self.vmac_flops_per_iteration}


def steady_state_metrics(s: Schedule, classes: Mapping[str, InstructionClass] | None = None,
                         flops_per_mac: int = 1, row_groups: int = 3, lanes: int = 32) -> KernelMetrics:
    """Cycles, slot fill ratio and VMAC work of one iteration of a hazard-free schedule."""
    if flops_per_mac not in (1, 2):
        raise InvalidArgument("flops_per_mac must be 1 or 2")
    report = validate_schedule(s, classes)
    if not report.valid:
        raise ScheduleHazardError(report)
    n = len(s.bundles)
    occ = {slot.value: (sum(slot in b.slots for b in s.bundles) / n if n else 0.0) for slot in Slot}
    macs = sum(1 for b in s.bundles for _, ins in b if ins.opcode == "vfmulas32")
    return KernelMetrics(n, occ, macs * row_groups * lanes * flops_per_mac)


class LaunchMode(enum.Enum):
    PER_OP = "per_op"
    UNIFIED = "unified"


def kernel_launch_overhead(n_ops: int, mode: LaunchMode | str, t_create: float, t_launch: float,
                           t_exec: Sequence[float] | Iterable[float]) -> float:
    """Total time of ``n_ops`` kernels launched one thread group each, or as one group."""
    t_exec = list(t_exec)
    mode = LaunchMode(mode)
    if n_ops != len(t_exec):
        raise InvalidArgument("n_ops must equal len(t_exec)")
    if t_create < 0 or t_launch < 0 or any(t < 0 for t in t_exec):
        raise InvalidArgument("times must be nonnegative")
    if mode is LaunchMode.PER_OP:
        return sum(t_create + t_launch + t for t in t_exec)
    if n_ops == 0:
        return 0.0
    return t_create + t_launch + sum(t_exec)
