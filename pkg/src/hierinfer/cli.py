"""Command-line entry point.

Every report embeds a manifest whose ``config`` block is itself a valid
``--config`` document, so feeding a report back in reproduces it byte for
byte. Data goes to stdout (or ``--out``); diagnostics go to stderr.
Exit status: 0 success, 1 domain failure (infeasible, hazards, capacity),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import hashlib
import io
import json
import os
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import __version__
from .attention import attention_reference, flash_attention_ref, mt_attention
from .attention_io import AttentionMethod, AttentionShape, io_counts, speedup_report
from .errors import (CapacityError, ConfigError, HierInferError, InfeasibleError, InvalidArgument,
                     ScheduleHazardError, SimulationError)
from .executor import gemm_tiled, linear_rope_fused, rope_reference
from .hw_model import HardwareSpec, Precision, arithmetic_intensity, intensity_threshold, load_structured
from .kernel import (load_preset, latency_table, parse_schedule, steady_state_metrics,
                     validate_schedule)
from .memory import Tensor
from .pbd_pipeline import PoolConfig, Request, load_workload, random_workload, simulate
from .planner import GIB, LayerTimes, ModelSpec, enumerate_configs, search_config
from .tiling import GemmShape, check_buffered_plan, dma_bytes, plan_score, search_tile_plan

ENV_CONFIG = "THINFER_SIM_CONFIG"
SECTIONS = {"args", "hardware", "pool", "model", "layer_times", "workload", "schedule"}
# (error metric, bound): GEMM-class errors are scaled by max |reference|
TOLERANCE = {"gemm": ("relative", 1e-5), "linear-rope": ("relative", 1e-5),
             "mt-attn": ("absolute", 1e-4), "flash-attn": ("absolute", 1e-4)}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser whose errors carry a close-match suggestion."""

    def error(self, message: str):
        hint = _suggest(self, message)
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}{hint}\n")
        raise SystemExit(2)


def _all_options(parser: argparse.ArgumentParser) -> list[str]:
    out = []
    for action in parser._actions:
        out.extend(action.option_strings)
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                out.extend(_all_options(sub))
    return sorted(set(out))


def _suggest(parser: argparse.ArgumentParser, message: str) -> str:
    m = re.search(r"invalid choice: '([^']*)' \(choose from (.*)\)", message)
    if m:
        choices = re.findall(r"'([^']*)'", m.group(2))
        close = difflib.get_close_matches(m.group(1), choices, n=1)
        return f" (did you mean {close[0]!r}?)" if close else ""
    m = re.search(r"unrecognized arguments: (.*)", message)
    if m:
        flags = [t.split("=")[0] for t in m.group(1).split() if t.startswith("-")]
        options = _all_options(_ROOT[0]) if _ROOT else _all_options(parser)
        for f in flags:
            close = difflib.get_close_matches(f, options, n=1)
            if close:
                return f" (did you mean {close[0]!r}?)"
    return ""


_ROOT: list[argparse.ArgumentParser] = []


# ---------------------------------------------------------------- helpers

def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def sha256_of(obj: Any) -> str:
    if isinstance(obj, bytes):
        return hashlib.sha256(obj).hexdigest()
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def load_config(path: str | None) -> dict:
    """Read a config document; a previously emitted report is accepted as-is."""
    if not path:
        return {}
    doc = load_structured(path)
    if doc is None:
        return {}
    if isinstance(doc, Mapping) and isinstance(doc.get("manifest"), Mapping):
        doc = doc["manifest"].get("config", {})
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: config must be a mapping")
    unknown = sorted(set(doc) - SECTIONS)
    if unknown:
        close = difflib.get_close_matches(unknown[0], sorted(SECTIONS), n=1)
        hint = f" (did you mean {close[0]!r}?)" if close else ""
        raise ConfigError(f"{path}: unknown config section {unknown[0]!r}{hint}")
    return dict(doc)


def _section(cfg: dict, name: str, kind=Mapping):
    sec = cfg.get(name)
    if sec is None:
        return None
    if not isinstance(sec, kind):
        raise ConfigError(f"config section {name!r} has the wrong type")
    return sec


def _resolve(ns: argparse.Namespace, cfg: dict, defaults: Mapping[str, Any]) -> dict:
    """Flag value, else config ``args`` entry, else built-in default."""
    from_cfg = _section(cfg, "args") or {}
    unknown = sorted(set(from_cfg) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown argument {unknown[0]!r} in config for '{ns.command}'")
    out = {}
    for key, default in defaults.items():
        val = getattr(ns, key, None)
        if val is None:
            val = from_cfg.get(key, default)
        out[key] = val
    return out


def _hardware(ns, cfg) -> HardwareSpec:
    if getattr(ns, "hardware", None):
        return HardwareSpec.from_file(ns.hardware)
    return HardwareSpec.from_mapping(_section(cfg, "hardware"))


def _read_section_file(path: str | None, cfg: dict, name: str):
    if path:
        data = load_structured(path)
        if isinstance(data, Mapping) and name in data:
            data = data[name]
        return data
    return cfg.get(name)


class Run:
    """Result of one subcommand: payload, optional table rows, text, snapshot and input digests."""

    def __init__(self, result: dict, config: dict, inputs: dict | None = None,
                 rows: list[dict] | None = None, text: str | None = None, status: int = 0):
        self.result = result
        self.config = config
        self.inputs = inputs or {}
        self.rows = rows
        self.text = text
        self.status = status


def manifest(command: str, run: Run) -> dict:
    return {"subcommand": command, "version": __version__, "config": run.config,
            "inputs": dict(sorted(run.inputs.items()))}


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols: list[str] = []
    for r in rows:
        cols.extend(c for c in r if c not in cols)
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(v) for k, v in r.items()})
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (dict, list)):
        return _canonical(v)
    return v


def _rows_text(rows: list[dict]) -> str:
    cols: list[str] = []
    for r in rows:
        cols.extend(c for c in r if c not in cols)
    cells = [[str(_fmt(r.get(c, ""))) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (dict, list)):
        return _canonical(v)
    return v


def _dict_text(d: Mapping, indent: int = 0) -> str:
    lines = []
    for k, v in d.items():
        if isinstance(v, Mapping):
            lines.append(" " * indent + f"{k}:")
            lines.append(_dict_text(v, indent + 2).rstrip("\n"))
        else:
            lines.append(" " * indent + f"{k}: {_fmt(v)}")
    return "\n".join(lines) + "\n"


def render(command: str, run: Run, fmt: str) -> str:
    man = manifest(command, run)
    if fmt == "json":
        doc = {"manifest": man, "result": run.result}
        return json.dumps(doc, sort_keys=True, indent=2, default=_json_default) + "\n"
    if fmt == "csv":
        rows = run.rows if run.rows is not None else [_flatten(run.result)]
        digest = sha256_of(man)
        return _rows_csv([{**r, "manifest_digest": r.get("manifest_digest", digest)} for r in rows])
    body = run.text if run.text is not None else (
        _rows_text(run.rows) if run.rows is not None else _dict_text(run.result))
    return body + f"manifest sha256: {sha256_of(man)}\n"


def _flatten(d: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


# ---------------------------------------------------------------- subcommands

TILE_DEFAULTS = {"m": None, "k": None, "n": None, "precision": "fp32", "m_1": 6, "n_1": 128}


def cmd_tile(ns, cfg) -> Run:
    a = _resolve(ns, cfg, TILE_DEFAULTS)
    if None in (a["m"], a["k"], a["n"]):
        raise UsageError("tile needs --m, --k and --n")
    spec = _hardware(ns, cfg)
    prec = Precision.parse(a["precision"])
    shape = GemmShape(a["m"], a["k"], a["n"])
    plan = search_tile_plan(shape, prec, spec, m_1=a["m_1"], n_1=a["n_1"])
    checks = check_buffered_plan(plan, shape.n, prec, spec)
    traffic = dma_bytes(plan, shape, prec, spec)
    result = {
        "plan": plan.to_dict(),
        "capacity": [c.to_dict() for c in checks],
        "dma": traffic.to_dict(),
        "macs_per_offchip_byte": float(plan_score(plan, shape, prec, spec)),
        "arithmetic_intensity": float(arithmetic_intensity(shape.m, shape.k, shape.n, prec)),
        "intensity_threshold": float(intensity_threshold(spec, prec)),
    }
    text = _dict_text({"plan": plan.to_dict(), "dma": traffic.to_dict(),
                       "macs_per_offchip_byte": result["macs_per_offchip_byte"]})
    return Run(result, {"args": a, "hardware": spec.to_dict()}, text=text)


KERNEL_DEFAULTS = {"preset": "gemm-microkernel", "latency": [], "drop_bundle": None}


def cmd_kernel_check(ns, cfg) -> Run:
    a = _resolve(ns, cfg, KERNEL_DEFAULTS)
    if ns.schedule:
        text = Path(ns.schedule).read_text(encoding="utf-8")
    else:
        text = _section(cfg, "schedule", str)
    if text is not None:
        sched = parse_schedule(text)
        source = "file"
    else:
        sched = load_preset(a["preset"])
        source = a["preset"]
    overrides = {}
    for item in a["latency"]:
        op, _, cyc = str(item).partition("=")
        if not cyc.isdigit():
            raise UsageError(f"--latency expects opcode=cycles, got {item!r}")
        overrides[op] = int(cyc)
    classes = latency_table(overrides)
    if a["drop_bundle"] is not None:
        if not 0 <= a["drop_bundle"] < len(sched):
            raise UsageError(f"--drop-bundle must be in 0..{len(sched) - 1}")
        sched = sched.without(a["drop_bundle"])
    report = validate_schedule(sched, classes)
    result = {"source": source, "bundles": len(sched), "hazards": report.to_dict()}
    if report.valid:
        result["metrics"] = steady_state_metrics(sched, classes).to_dict()
    rows = [{"consumer": h.consumer_index, "slot": h.slot.value if hasattr(h.slot, "value") else h.slot,
             "register": h.register, "required": h.required, "actual": h.actual,
             "producer": h.producer_index} for h in report.violations]
    lines = [f"{len(sched)} bundles, {len(report.violations)} hazard(s)"]
    lines += [f"  bundle {r['consumer']} {r['slot']}: {r['register']} needs distance {r['required']}, "
              f"has {r['actual']} (producer bundle {r['producer']})" for r in rows]
    if report.valid:
        occ = result["metrics"]["slot_occupancy"]
        lines.append("occupancy " + " ".join(f"{k}={v:.2f}" for k, v in occ.items()))
    if report.assumed_latencies:
        lines.append("assumed latencies: " + ", ".join(report.assumed_latencies))
    config = {"args": a, "schedule": sched.to_text() if source == "file" else None}
    config = {k: v for k, v in config.items() if v is not None}
    return Run(result, config, {"schedule": sha256_of(sched.to_text().encode())}, rows=rows,
               text="\n".join(lines) + "\n", status=0 if report.valid else 1)


EXEC_DEFAULTS = {"op": "gemm", "m": 64, "k": 128, "n": 256, "s": 256, "d": 64, "heads": 1, "m_r": 8,
                 "m_c": 128, "precision": "fp32", "seed": 0, "theta_base": 10000.0, "head_dim": None,
                 "x": None, "w": None}


def _load_npy(path: str) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load array {path}: {exc}") from None


def cmd_exec(ns, cfg) -> Run:
    a = _resolve(ns, cfg, EXEC_DEFAULTS)
    spec = _hardware(ns, cfg)
    prec = Precision.parse(a["precision"])
    rng = np.random.default_rng(a["seed"])
    op = a["op"]
    inputs = {}
    result: dict[str, Any] = {"op": op}
    if op in ("gemm", "linear-rope"):
        x = _load_npy(a["x"]) if a["x"] else rng.standard_normal((a["m"], a["k"]), dtype=np.float32)
        w = _load_npy(a["w"]) if a["w"] else rng.standard_normal((a["k"], a["n"]), dtype=np.float32)
        xt, wt = Tensor(x, prec), Tensor(w, prec)
        inputs = {"x": xt.digest(), "w": wt.digest()}
        shape = GemmShape(xt.shape[0], xt.shape[1], wt.shape[1])
        plan = search_tile_plan(shape, prec, spec)
        ref = xt.data.astype(np.float64) @ wt.data.astype(np.float64)
        if op == "gemm":
            y, trace = gemm_tiled(xt, wt, plan, spec)
        else:
            from .memory import TransferTrace
            trace = TransferTrace()
            positions = np.arange(shape.m)
            head_dim = a["head_dim"] or shape.n
            y = linear_rope_fused(xt, wt, positions, a["theta_base"], plan, head_dim, spec, trace)
            ref = rope_reference(ref, positions, a["theta_base"], head_dim)
        expected = dma_bytes(plan, shape, prec, spec).by_tag()
        got = trace.by_tag()
        result["plan"] = plan.to_dict()
        result["trace_matches_analytic"] = got == {t: tc for t, tc in expected.items() if tc.count}
    else:
        shp = (a["heads"], a["s"], a["d"])
        q, k, v = (rng.standard_normal(shp, dtype=np.float32) for _ in range(3))
        inputs = {n: Tensor(t, prec).digest() for n, t in zip("qkv", (q, k, v))}
        fn = mt_attention if op == "mt-attn" else flash_attention_ref
        y, trace = fn(Tensor(q, prec), Tensor(k, prec), Tensor(v, prec), m_r=a["m_r"], m_c=a["m_c"], spec=spec)
        ref = attention_reference(Tensor(q, prec).data, Tensor(k, prec).data, Tensor(v, prec).data)
        method = AttentionMethod.MT if op == "mt-attn" else AttentionMethod.FLASH
        c = io_counts(AttentionShape(a["s"], a["d"], a["heads"], a["m_r"], a["m_c"]), method, spec)
        got = (trace.count("q"), trace.count("o"), trace.count("k"), trace.count("v"))
        result["trace_matches_analytic"] = got == (c.q_dma, c.o_dma, c.k_broadcast, c.v_broadcast)
    err = float(np.max(np.abs(y.data.astype(np.float64) - ref)))
    metric, bound = TOLERANCE[op]
    if metric == "relative":
        err_metric = err / max(float(np.max(np.abs(ref))), np.finfo(np.float64).tiny)
    else:
        err_metric = err
    if prec is Precision.FP16:
        bound = 2.0 ** -10 * 4
    result.update({
        "shape": list(y.shape),
        "max_abs_error": err,
        "error_metric": metric,
        "error": err_metric,
        "tolerance": bound,
        "output_digest": y.digest(),
        "transfers": trace.summary(),
    })
    result["within_tolerance"] = err_metric <= bound
    return Run(result, {"args": a, "hardware": spec.to_dict()}, inputs)


ATTN_DEFAULTS = {"s": [1024, 2048, 4096, 8192], "d": 128, "heads": 1, "m_r": 8, "m_c": 192,
                 "methods": ["mt", "flash"], "precision": "fp32"}


def cmd_attn_io(ns, cfg) -> Run:
    a = _resolve(ns, cfg, ATTN_DEFAULTS)
    spec = _hardware(ns, cfg)
    shapes = [AttentionShape(int(s), a["d"], a["heads"], a["m_r"], a["m_c"]) for s in a["s"]]
    rows = speedup_report(shapes, a["methods"], spec, Precision.parse(a["precision"]))
    return Run({"rows": rows}, {"args": a, "hardware": spec.to_dict()}, rows=rows)


SIM_DEFAULTS = {"requests": 64, "seed": 0, "horizon": None, "mean_interarrival": 0.0}


def _workload(ns, cfg, a) -> list[Request]:
    data = _read_section_file(getattr(ns, "workload", None), cfg, "workload")
    if data is not None:
        return load_workload(data)
    return random_workload(a["requests"], a["seed"], mean_interarrival=a["mean_interarrival"])


def _pool(ns, cfg) -> PoolConfig:
    data = _read_section_file(getattr(ns, "pool_config", None), cfg, "pool")
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError("pool config must be a mapping")
    return PoolConfig.from_mapping(data or {})


def _workload_doc(reqs: list[Request]) -> list[dict]:
    return [{"id": r.id, "prompt_len": r.prompt_len, "gen_len": r.gen_len, "arrival_time": r.arrival_time}
            for r in reqs]


def cmd_simulate(ns, cfg) -> Run:
    a = _resolve(ns, cfg, SIM_DEFAULTS)
    reqs = _workload(ns, cfg, a)
    pool = _pool(ns, cfg)
    res = simulate(reqs, pool, horizon=a["horizon"])
    if ns.timeline:
        Path(ns.timeline).write_text(res.timeline_csv(), encoding="utf-8")
    wl = _workload_doc(reqs)
    result = res.to_dict()
    rows = [{"request": int(k), "latency_s": v} for k, v in result["latencies_s"].items()]
    text = _dict_text({k: v for k, v in result.items() if k != "latencies_s"})
    return Run(result, {"args": a, "pool": pool.to_dict(), "workload": wl},
               {"workload": sha256_of(wl)}, rows=rows, text=text)


PLAN_DEFAULTS = {"overhead": GIB, "clu_total": None, "b_micro_p": 1, "b_micro_d": 4, "comm_budget": None,
                 "max_tp": 8, "max_pp": 64, "enumerate": False, "t_p": None, "t_d": None}


def cmd_plan(ns, cfg) -> Run:
    a = _resolve(ns, cfg, PLAN_DEFAULTS)
    spec = _hardware(ns, cfg)
    mdata = _read_section_file(ns.model, cfg, "model")
    if mdata is None:
        raise UsageError("plan needs a model spec (--model FILE or a 'model' config section)")
    if not isinstance(mdata, Mapping):
        raise ConfigError("model spec must be a mapping")
    model = ModelSpec.from_mapping(mdata)
    tdata = dict(_read_section_file(ns.layer_times, cfg, "layer_times") or {})
    for key in ("t_p", "t_d"):
        if a[key] is not None:
            tdata[key] = a[key]
    times = LayerTimes.from_mapping(tdata)
    opts = dict(overhead=a["overhead"], clu_total=a["clu_total"], b_micro_p=a["b_micro_p"],
                b_micro_d=a["b_micro_d"], comm_budget_bytes=a["comm_budget"])
    res = search_config(model, spec, times, max_tp=a["max_tp"], max_pp=a["max_pp"], **opts)
    result = res.to_dict()
    if a["enumerate"]:
        en = enumerate_configs(model, spec, times, max_tp=min(4, a["max_tp"]), **opts)
        gap = None if en.objective is None else float(res.objective / en.objective - 1)
        result["enumeration"] = {"config": en.config.to_dict() if en.config else None,
                                 "objective": None if en.objective is None else float(en.objective),
                                 "evaluated": en.evaluated, "staged_gap": gap}
    lines = ["config: " + " ".join(f"{k}={v}" for k, v in res.config.to_dict().items()),
             f"pool clusters: {result['pool_clusters']}", f"objective: {result['objective']:.6g}",
             f"relative throughput: {result['relative_throughput']:.6g}"]
    for st in ("prefill", "decode"):
        m = result["feasibility"][st]
        lines.append(f"{st}: {m['used_bytes']:.4g} of {m['limit_bytes']} B (margin {m['margin_bytes']:.4g})")
    lines += ["steps:"] + [f"  {t}" for t in res.trace] + [f"note: {n}" for n in res.notes]
    config = {"args": a, "hardware": spec.to_dict(), "model": model.to_dict(), "layer_times": times.to_dict()}
    return Run(result, config, text="\n".join(lines) + "\n")


REPORT_DEFAULTS = {"ablation": False, "requests": 64, "seed": 0, "mean_interarrival": 0.0}

ABLATION = (
    ("A0 baseline", dict(unified_launch=False, selective_batching=False), dict(decoupled=False, overlap_transfers=False)),
    ("A1 +fusion", dict(unified_launch=True, selective_batching=False), dict(decoupled=False, overlap_transfers=False)),
    ("A2 +batching", dict(unified_launch=True, selective_batching=True), dict(decoupled=False, overlap_transfers=False)),
    ("A3 +P-B-D", dict(unified_launch=True, selective_batching=True), dict(decoupled=True, overlap_transfers=True)),
)


def ablation_rows(reqs: list[Request], pool: PoolConfig) -> list[dict]:
    rows = []
    base = None
    for label, svc_changes, pool_changes in ABLATION:
        cfg = replace(pool, service=replace(pool.service, **svc_changes), **pool_changes)
        res = simulate(reqs, cfg)
        base = res.throughput if base is None else base
        rows.append({"stage": label, "throughput_tokens_per_s": res.throughput,
                     "speedup_vs_baseline": res.throughput / base if base else 0.0,
                     "makespan_s": res.makespan, "backpressure_events": res.backpressure_events})
    return rows


def _summarize_run(path: str) -> dict:
    doc = load_structured(path)
    if not isinstance(doc, Mapping) or "manifest" not in doc or "result" not in doc:
        raise ConfigError(f"{path}: not a JSON report produced by this tool")
    man, res = doc["manifest"], doc["result"]
    row = {"run": Path(path).stem, "subcommand": man.get("subcommand")}
    keys = ("throughput_tokens_per_s", "makespan_s", "mean_latency_s", "max_buffer_occupancy",
            "backpressure_events", "objective", "relative_throughput", "pool_clusters",
            "macs_per_offchip_byte", "error")
    for k in keys:
        if k in res:
            row[k] = res[k]
    row["manifest_digest"] = sha256_of(man)
    return row


def cmd_report(ns, cfg) -> Run:
    a = _resolve(ns, cfg, REPORT_DEFAULTS)
    if a["ablation"]:
        reqs = _workload(ns, cfg, a)
        pool = _pool(ns, cfg)
        wl = _workload_doc(reqs)
        rows = ablation_rows(reqs, pool)
        return Run({"rows": rows}, {"args": a, "pool": pool.to_dict(), "workload": wl},
                   {"workload": sha256_of(wl)}, rows=rows)
    if not ns.runs:
        raise UsageError("report needs run files, or --ablation")
    rows = [_summarize_run(p) for p in ns.runs]
    inputs = {Path(p).name: sha256_of(Path(p).read_bytes()) for p in ns.runs}
    return Run({"rows": rows}, {"args": a}, inputs, rows=rows)


COMMANDS: dict[str, tuple[Callable, str, str]] = {
    "tile": (cmd_tile, "json", "choose a tile plan for a GEMM shape"),
    "kernel-check": (cmd_kernel_check, "text", "check a VLIW schedule for latency hazards"),
    "exec": (cmd_exec, "json", "run an operator on the simulated hierarchy and compare to a reference"),
    "attn-io": (cmd_attn_io, "csv", "modeled attention I/O counts and latency"),
    "simulate-pipeline": (cmd_simulate, "json", "discrete-event prefill/buffer/decode simulation"),
    "plan": (cmd_plan, "json", "search a hybrid-parallel deployment"),
    "report": (cmd_report, "csv", "tabulate runs or an ablation ladder"),
}


def build_parser() -> argparse.ArgumentParser:
    common = Parser(add_help=False)
    common.add_argument("--config", help=f"YAML/JSON config or earlier report (fallback: ${ENV_CONFIG})")
    common.add_argument("--out", help="write the report here instead of stdout")
    common.add_argument("--format", choices=("json", "csv", "text"), help="output format")
    common.add_argument("--hardware", help="hardware spec file (overrides the config's section)")

    root = Parser(prog="hierinfer", description="Analytic and simulated models for hierarchical-memory inference.")
    root.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = root.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True
    p = {name: sub.add_parser(name, parents=[common], help=helptext, description=helptext)
         for name, (_, _, helptext) in COMMANDS.items()}

    for name in ("tile", "exec"):
        p[name].add_argument("--m", type=int)
        p[name].add_argument("--k", type=int)
        p[name].add_argument("--n", type=int)
    for name in ("tile", "exec", "attn-io"):
        p[name].add_argument("--precision", choices=("fp32", "fp16"))
    p["tile"].add_argument("--m-1", dest="m_1", type=int, help="micro-kernel rows")
    p["tile"].add_argument("--n-1", dest="n_1", type=int, help="micro-kernel columns")

    k = p["kernel-check"]
    k.add_argument("--schedule", help="schedule text file")
    k.add_argument("--preset", help="embedded schedule name (default gemm-microkernel)")
    k.add_argument("--latency", action="append", metavar="OP=CYCLES", help="override an instruction latency")
    k.add_argument("--drop-bundle", dest="drop_bundle", type=int, help="delete one bundle before checking")

    e = p["exec"]
    e.add_argument("--op", choices=tuple(TOLERANCE))
    e.add_argument("--seed", type=int)
    e.add_argument("--s", type=int, help="sequence length (attention)")
    e.add_argument("--d", type=int, help="head dimension (attention)")
    e.add_argument("--heads", type=int)
    e.add_argument("--m-r", dest="m_r", type=int)
    e.add_argument("--m-c", dest="m_c", type=int)
    e.add_argument("--theta-base", dest="theta_base", type=float)
    e.add_argument("--head-dim", dest="head_dim", type=int)
    e.add_argument("--x", help=".npy input matrix")
    e.add_argument("--w", help=".npy weight matrix")

    at = p["attn-io"]
    at.add_argument("--s", type=int, nargs="+")
    at.add_argument("--d", type=int)
    at.add_argument("--heads", type=int)
    at.add_argument("--m-r", dest="m_r", type=int)
    at.add_argument("--m-c", dest="m_c", type=int)
    at.add_argument("--methods", nargs="+", choices=("mt", "flash"))

    for name in ("simulate-pipeline", "report"):
        q = p[name]
        q.add_argument("--workload", help="request list file")
        q.add_argument("--pool-config", dest="pool_config", help="pool config file")
        q.add_argument("--requests", type=int, help="random workload size when no file is given")
        q.add_argument("--seed", type=int)
        q.add_argument("--mean-interarrival", dest="mean_interarrival", type=float)
    p["simulate-pipeline"].add_argument("--horizon", type=float)
    p["simulate-pipeline"].add_argument("--timeline", help="write the event timeline CSV here")
    p["report"].add_argument("runs", nargs="*", help="JSON reports to tabulate")
    p["report"].add_argument("--ablation", action="store_const", const=True)

    pl = p["plan"]
    pl.add_argument("--model", help="model spec file")
    pl.add_argument("--layer-times", dest="layer_times", help="layer times file")
    pl.add_argument("--overhead", type=int, help="per-cluster reserved bytes")
    pl.add_argument("--clu-total", dest="clu_total", type=int)
    pl.add_argument("--b-micro-p", dest="b_micro_p", type=int)
    pl.add_argument("--b-micro-d", dest="b_micro_d", type=int)
    pl.add_argument("--comm-budget", dest="comm_budget", type=int, help="max all-reduce bytes per step")
    pl.add_argument("--max-tp", dest="max_tp", type=int)
    pl.add_argument("--max-pp", dest="max_pp", type=int)
    pl.add_argument("--t-p", dest="t_p", type=float, help="prefill stage latency")
    pl.add_argument("--t-d", dest="t_d", type=float, help="decode stage latency at tp=1")
    pl.add_argument("--enumerate", action="store_const", const=True, help="also report the exhaustive optimum")
    return root


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    _ROOT[:] = [parser]
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler, default_fmt, _ = COMMANDS[ns.command]
    try:
        cfg = load_config(ns.config or os.environ.get(ENV_CONFIG))
        run = handler(ns, cfg)
        out = render(ns.command, run, ns.format or default_fmt)
    except UsageError as exc:
        sys.stderr.write(f"hierinfer {ns.command}: error: {exc}\n")
        return 2
    except (ConfigError, InvalidArgument) as exc:
        sys.stderr.write(f"hierinfer {ns.command}: error: {exc}\n")
        return 2
    except (InfeasibleError, CapacityError, ScheduleHazardError, SimulationError) as exc:
        sys.stderr.write(f"hierinfer {ns.command}: infeasible: {exc}\n")
        return 1
    except HierInferError as exc:
        sys.stderr.write(f"hierinfer {ns.command}: error: {exc}\n")
        return 1
    if ns.out:
        Path(ns.out).write_text(out, encoding="utf-8")
    else:
        sys.stdout.write(out)
    if run.status:
        sys.stderr.write(f"hierinfer {ns.command}: check failed\n")
    return run.status


if __name__ == "__main__":
    raise SystemExit(main())
