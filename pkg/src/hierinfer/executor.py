"""Functional tiled GEMM and fused Linear-RoPE over the simulated hierarchy.

Accumulation is FP32 in tiled order whatever the storage precision; results
are rounded to the storage format only when a Y tile is written back.
The loop nests follow the description in :mod:`hierinfer.tiling` so that the
recorded trace equals :func:`hierinfer.tiling.dma_bytes` exactly.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidArgument
from .hw_model import HardwareSpec, Precision
from .memory import SimMemory, Tensor, TransferKind, TransferTrace, as_tensor, quantize
from .tiling import (Dataflow, GemmShape, MemLevel, TilePlan, cdiv, check_buffered_plan,
                     validate_plan_for_shape)

# epilogue(acc_tile, row0, col0) -> tile, applied in registers before write-back
Epilogue = Callable[[np.ndarray, int, int], np.ndarray]

DMA = TransferKind.DMA
BCAST = TransferKind.BROADCAST


def _store_y(y: np.ndarray, acc: np.ndarray, r0: int, c0: int, plan: TilePlan,
             precision: Precision, trace: TransferTrace) -> None:
    rows, cols = acc.shape
    b = precision.bytes_per_element
    for s in range(0, rows, plan.y_tile_rows):
        sub = acc[s:s + plan.y_tile_rows]
        y[r0 + s:r0 + s + sub.shape[0], c0:c0 + cols] = quantize(sub, precision)
        trace.add(DMA, MemLevel.AM, MemLevel.DDR, sub.size * b, "y")


def _alloc_static(mem: SimMemory, plan: TilePlan, n_total: int, b: int, owners: range) -> list:
    handles = []
    for d in owners:
        handles.append(mem.alloc(MemLevel.SM, 2 * b * plan.m_2 * plan.k_2, d, "X_2 double buffer"))
        handles.append(mem.alloc(MemLevel.AM, 2 * b * plan.k_2 * plan.n_2, d, "W_2 double buffer"))
        handles.append(mem.alloc(MemLevel.AM, 3 * b * plan.m_2 * plan.n_2, d, "Y_2 triple buffer"))
        handles.append(mem.alloc(MemLevel.AM, b * n_total, d, "output row buffer"))
    return handles


def gemm_tiled(x, w, plan: TilePlan, spec: HardwareSpec | None = None,
               epilogue: Epilogue | None = None,
               trace: TransferTrace | None = None) -> tuple[Tensor, TransferTrace]:
    """Y = X @ W executed tile by tile, logging every transfer."""
    spec = spec or HardwareSpec()
    x = as_tensor(x)
    precision = x.storage_precision
    w = as_tensor(w, precision)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise InvalidArgument(f"shape mismatch: {x.shape} @ {w.shape}")
    m, k = x.shape
    n = w.shape[1]
    shape = GemmShape(m, k, n)
    validate_plan_for_shape(plan, shape, spec)
    b = precision.bytes_per_element
    trace = trace if trace is not None else TransferTrace()
    mem = SimMemory(spec)
    mem.alloc(MemLevel.DDR, x.nbytes + w.nbytes + m * n * b, step="operands in DDR")
    xd, wd = x.data, w.data
    y = np.zeros((m, n), dtype=np.float32)

    if plan.dataflow is Dataflow.BROADCAST_X:
        _gemm_broadcast_x(xd, wd, y, plan, spec, precision, mem, trace, epilogue)
    else:
        _gemm_broadcast_w(xd, wd, y, plan, spec, precision, mem, trace, epilogue)
    return Tensor(y, precision), trace


def _gemm_broadcast_w(xd, wd, y, plan, spec, precision, mem, trace, epilogue):
    m, k = xd.shape
    n = wd.shape[1]
    b = precision.bytes_per_element
    _alloc_static(mem, plan, n, b, range(spec.dsps_per_cluster))
    resident = plan.k_g >= k
    for rg in range(0, m, plan.m_g):
        mg = min(plan.m_g, m - rg)
        pieces = [(rg + p, min(plan.m_2, rg + mg - (rg + p))) for p in range(0, mg, plan.m_2)]
        xg_handle = None
        if resident:
            xg_handle = mem.alloc(MemLevel.GSM, mg * k * b, step="X_g block")
            trace.add(DMA, MemLevel.DDR, MemLevel.GSM, mg * k * b, "x_ddr")
        for c0 in range(0, n, plan.n_2):
            nb = min(plan.n_2, n - c0)
            accs = [np.zeros((rows, nb), dtype=np.float32) for _, rows in pieces]
            for kg0 in range(0, k, plan.k_g):
                kg = min(plan.k_g, k - kg0)
                if not resident:
                    xg_handle = mem.alloc(MemLevel.GSM, mg * kg * b, step="X_g block")
                    trace.add(DMA, MemLevel.DDR, MemLevel.GSM, mg * kg * b, "x_ddr")
                for k0 in range(kg0, kg0 + kg, plan.k_2):
                    kb = min(plan.k_2, kg0 + kg - k0)
                    trace.add(BCAST, MemLevel.DDR, MemLevel.AM, kb * nb * b, "w")
                    w_tile = wd[k0:k0 + kb, c0:c0 + nb]
                    for acc, (r0, rows) in zip(accs, pieces):
                        trace.add(DMA, MemLevel.GSM, MemLevel.SM, rows * kb * b, "x_piece")
                        acc += xd[r0:r0 + rows, k0:k0 + kb] @ w_tile
                if not resident:
                    mem.free(xg_handle)
            for acc, (r0, rows) in zip(accs, pieces):
                if epilogue is not None:
                    acc = epilogue(acc, r0, c0)
                _store_y(y, acc, r0, c0, plan, precision, trace)
        if resident:
            mem.free(xg_handle)


def _gemm_broadcast_x(xd, wd, y, plan, spec, precision, mem, trace, epilogue):
    m, k = xd.shape
    n = wd.shape[1]
    b = precision.bytes_per_element
    _alloc_static(mem, plan, n, b, range(spec.dsps_per_cluster))
    col_tiles = list(range(0, n, plan.n_2))
    dsps = spec.dsps_per_cluster
    for wave in range(0, len(col_tiles), dsps):
        tiles = [(c0, min(plan.n_2, n - c0)) for c0 in col_tiles[wave:wave + dsps]]
        accs = [np.zeros((m, nb), dtype=np.float32) for _, nb in tiles]
        for k0 in range(0, k, plan.k_2):
            kb = min(plan.k_2, k - k0)
            trace.add(BCAST, MemLevel.DDR, MemLevel.SM, m * kb * b, "x_ddr")
            x_blk = xd[:, k0:k0 + kb]
            for acc, (c0, nb) in zip(accs, tiles):
                trace.add(DMA, MemLevel.DDR, MemLevel.AM, kb * nb * b, "w")
                acc += x_blk @ wd[k0:k0 + kb, c0:c0 + nb]
        for acc, (c0, nb) in zip(accs, tiles):
            if epilogue is not None:
                acc = epilogue(acc, 0, c0)
            _store_y(y, acc, 0, c0, plan, precision, trace)


def rope_inv_freq(head_dim: int, theta_base: float) -> np.ndarray:
    j = np.arange(head_dim // 2, dtype=np.float64)
    return theta_base ** (-2.0 * j / head_dim)


def rope_epilogue(positions: np.ndarray, theta_base: float, head_dim: int) -> Epilogue:
    """Rotate interleaved (even, odd) lane pairs of a finished Y tile.

    Mirrors the register-level recipe: negate, interleave into a mixed
    vector, then res = y*cos + mix*sin with angles = position * theta.
    Angles are formed in double precision and cos/sin rounded to FP32, as a
    host-side rotation table would be; large positions would otherwise
    lose accuracy in the angle itself.
    """
    theta = rope_inv_freq(head_dim, theta_base)
    pos = np.asarray(positions, dtype=np.float64)

    def apply(acc: np.ndarray, r0: int, c0: int) -> np.ndarray:
        rows, cols = acc.shape
        neg = -acc
        mix = np.empty_like(acc)
        mix[:, 0::2] = neg[:, 1::2]
        mix[:, 1::2] = acc[:, 0::2]
        lane = np.arange(c0, c0 + cols)
        th = theta[(lane % head_dim) // 2]
        angle = pos[r0:r0 + rows, None] * th[None, :]
        res = acc * np.cos(angle).astype(np.float32)
        res += mix * np.sin(angle).astype(np.float32)
        return res

    return apply


def linear_rope_fused(x, w, positions, theta_base: float = 10000.0, plan: TilePlan | None = None,
                      head_dim: int | None = None, spec: HardwareSpec | None = None,
                      trace: TransferTrace | None = None) -> Tensor:
    """Linear layer whose Y tiles are rotary-embedded before write-back."""
    from .tiling import search_tile_plan

    spec = spec or HardwareSpec()
    x = as_tensor(x)
    w = as_tensor(w, x.storage_precision)
    n = w.shape[1]
    head_dim = n if head_dim is None else head_dim
    if n % 2 or head_dim % 2 or n % head_dim:
        raise InvalidArgument("output width and head_dim must be even, head_dim dividing N")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[0],) or np.any(positions < 0):
        raise InvalidArgument("positions must be one nonnegative integer per row")
    if plan is None:
        plan = search_tile_plan(GemmShape(x.shape[0], x.shape[1], n), x.storage_precision, spec)
    if plan.n_2 % 2:
        raise InvalidArgument("n_2 must be even so rotation pairs never straddle tiles")
    y, _ = gemm_tiled(x, w, plan, spec, rope_epilogue(positions, theta_base, head_dim), trace)
    return y


def rope_reference(y: np.ndarray, positions, theta_base: float, head_dim: int) -> np.ndarray:
    """Float64 rotation of (even, odd) column pairs, for checking the fused path."""
    y = np.asarray(y, dtype=np.float64)
    theta = rope_inv_freq(head_dim, theta_base)
    cols = np.arange(0, y.shape[1], 2)
    angle = np.asarray(positions, dtype=np.float64)[:, None] * theta[(cols % head_dim) // 2][None, :]
    c, s = np.cos(angle), np.sin(angle)
    out = np.empty_like(y)
    out[:, 0::2] = y[:, 0::2] * c - y[:, 1::2] * s
    out[:, 1::2] = y[:, 1::2] * c + y[:, 0::2] * s
    return out
