"""Hardware description and roofline formulas.

Intensities and thresholds are kept as :class:`fractions.Fraction` so that
boundary comparisons (e.g. 192/13 against 135) never depend on rounding.
Convert with ``float()`` only when reporting.
"""

from __future__ import annotations

import dataclasses
import json
import re
import enum
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError, InvalidArgument

Number = int | float | Fraction


def as_fraction(x: Number) -> Fraction:
    """Exact rational for ``x``; floats go through their shortest repr."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(repr(float(x)))


class Precision(enum.Enum):
    FP32 = "fp32"
    FP16 = "fp16"

    @property
    def bytes_per_element(self) -> int:
        return 4 if self is Precision.FP32 else 2

    @classmethod
    def parse(cls, value: "str | Precision") -> "Precision":
        if isinstance(value, Precision):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidArgument(f"unknown precision {value!r} (expected fp32 or fp16)") from None


@dataclass(frozen=True)
class HardwareSpec:
    """Per-cluster memory hierarchy and compute peaks.

    Defaults describe one cluster of the modeled accelerator: 24 DSPs, each
    with 768 KB of vector memory (AM) and 64 KB of scalar memory (SM),
    6 MB of shared GSM, 20 GiB of DDR at 30 GB/s.
    """

    am_bytes: int = 786432
    sm_bytes: int = 65536
    gsm_bytes: int = 6291456
    ddr_bytes: int = 20 * 2**30
    ddr_bandwidth: float = 30e9
    fp32_peak: float = 4.05e12
    fp16_peak_factor: float = 2.0
    dsps_per_cluster: int = 24
    accel_cores_per_dsp: int = 16
    broadcast_latency_factor: float = 0.9
    clusters_total: int = 12

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, (int, float, Fraction)):
                raise InvalidArgument(f"{f.name} must be numeric, got {v!r}")
            if v <= 0:
                raise InvalidArgument(f"{f.name} must be strictly positive, got {v!r}")
        if not 0 < self.broadcast_latency_factor <= 2:
            raise InvalidArgument("broadcast_latency_factor must lie in (0, 2]")
        if self.am_bytes <= self.sm_bytes:
            raise InvalidArgument("am_bytes must exceed sm_bytes")
        for name in ("am_bytes", "sm_bytes", "gsm_bytes", "ddr_bytes",
                     "dsps_per_cluster", "accel_cores_per_dsp", "clusters_total"):
            if int(getattr(self, name)) != getattr(self, name):
                raise InvalidArgument(f"{name} must be an integer")

    def peak(self, precision: Precision) -> Fraction:
        p = as_fraction(self.fp32_peak)
        if precision is Precision.FP16:
            p *= as_fraction(self.fp16_peak_factor)
        return p

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None) -> "HardwareSpec":
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown hardware key: {unknown[0]!r}")
        int_fields = {"am_bytes", "sm_bytes", "gsm_bytes", "ddr_bytes",
                      "dsps_per_cluster", "accel_cores_per_dsp", "clusters_total"}
        kwargs = {}
        for key, value in data.items():
            if key in int_fields and isinstance(value, float) and value.is_integer():
                value = int(value)
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path: str | Path) -> "HardwareSpec":
        """Load from a YAML/JSON file; a top-level ``hardware`` section is honored."""
        data = load_structured(path)
        if isinstance(data, Mapping) and "hardware" in data:
            data = data["hardware"]
        if data is not None and not isinstance(data, Mapping):
            raise ConfigError(f"{path}: hardware spec must be a mapping")
        return cls.from_mapping(data)


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot, such as 2e-05."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)[eE][-+]?[0-9]+$"),
    list("-+0123456789."))


def load_structured(path: str | Path) -> Any:
    """Parse a UTF-8 JSON or YAML document."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except ValueError:
        pass
    try:
        return yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None


def _check_dims(**dims: int) -> None:
    for name, v in dims.items():
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise InvalidArgument(f"{name} must be a positive integer, got {v!r}")


def arithmetic_intensity(m: int, k: int, n: int, precision: Precision = Precision.FP32) -> Fraction:
    """FLOPs per byte of a Y = X @ W GEMM that reads X, W and writes Y once.

    FLOPs are counted as M*K*N (one per multiply-accumulate).
    """
    _check_dims(m=m, k=k, n=n)
    return Fraction(m * k * n, precision.bytes_per_element * (m * k + k * n + m * n))


def intensity_threshold(spec: HardwareSpec, precision: Precision = Precision.FP32) -> Fraction:
    """Roofline knee: peak / bandwidth."""
    return spec.peak(precision) / as_fraction(spec.ddr_bandwidth)


def attainable_performance(intensity: Number, spec: HardwareSpec,
                           precision: Precision = Precision.FP32) -> Fraction:
    intensity = as_fraction(intensity)
    if intensity < 0:
        raise InvalidArgument("intensity must be nonnegative")
    return min(spec.peak(precision), as_fraction(spec.ddr_bandwidth) * intensity)


def measured_gflops(s: int, input_dim: int, output_dim: int, time_ms: float) -> float:
    """GFLOPS figure used for the Linear benchmark tables.

    (S/1024)(in/1024)(out/1024)(1000/ms). This is the literal reporting
    formula; some reported utilization figures derived from it do not
    reproduce, so no correction factor is applied.
    """
    if time_ms <= 0:
        raise InvalidArgument("time_ms must be positive")
    return (s / 1024) * (input_dim / 1024) * (output_dim / 1024) * (1000 / time_ms)
