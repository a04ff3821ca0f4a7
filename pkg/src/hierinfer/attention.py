"""Staged (Q-stationary) attention, the K/V-stationary block reference, and
the register-level reduction used inside softmax.

Per head, both executors log one trace record per logical I/O operation
with tags ``q``, ``o``, ``k``, ``v``. A K or V broadcast streams the whole
matrix block by block; the number of blocks is kept in ``chunks``.
On-chip moves use ``q_local``, ``o_local`` and ``score_spill``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgument
from .hw_model import HardwareSpec
from .memory import SimMemory, Tensor, TransferKind, TransferTrace, as_tensor
from .tiling import MemLevel, cdiv

DMA = TransferKind.DMA
BCAST = TransferKind.BROADCAST

REDUCE_VECTORS = 16
REDUCE_LANES = 32
REDUCE_PHASES = ("bale_pack", "pairwise_add", "group", "shuffle_via_am", "group_add")


def _reduce_blocks(v: np.ndarray, phases: list | None = None) -> np.ndarray:
    """Lane-wise sum over axis -2 of (..., 16, 32) float32 blocks."""
    lead = v.shape[:-2]
    # 1. bale: deinterleave each register's 64-bit words into [low halves | high halves]
    words = v.reshape(*lead, REDUCE_VECTORS, REDUCE_LANES // 2, 2)
    packed = np.concatenate([words[..., 0], words[..., 1]], axis=-1)
    if phases is not None:
        phases.append(REDUCE_PHASES[0])
    # 2. add registers pairwise: 16 -> 8
    summed = packed[..., 0::2, :] + packed[..., 1::2, :]
    if phases is not None:
        phases.append(REDUCE_PHASES[1])
    # 3. two groups of four registers
    groups = summed.reshape(*lead, 2, 4, REDUCE_LANES)
    if phases is not None:
        phases.append(REDUCE_PHASES[2])
    # 4. store lows/highs through AM into even/odd words and reload: restores lane order
    half = REDUCE_LANES // 2
    staged = np.empty_like(groups)
    staged[..., 0::2] = groups[..., :half]
    staged[..., 1::2] = groups[..., half:]
    if phases is not None:
        phases.append(REDUCE_PHASES[3])
    # 5. add within each group, then across the two groups
    g = (staged[..., 0, :] + staged[..., 1, :]) + (staged[..., 2, :] + staged[..., 3, :])
    out = g[..., 0, :] + g[..., 1, :]
    if phases is not None:
        phases.append(REDUCE_PHASES[4])
    return out


def vector_reduce_hw(vectors, return_phases: bool = False):
    """Per-lane sums of 16 vectors of 32 FP32 lanes via the five-phase recipe."""
    v = np.asarray(vectors, dtype=np.float32)
    if v.shape != (REDUCE_VECTORS, REDUCE_LANES):
        raise InvalidArgument(f"expected a 16x32 input, got shape {v.shape}")
    phases: list[str] = []
    out = _reduce_blocks(v, phases)
    return (out, phases) if return_phases else out


def hw_row_sums(rows: np.ndarray) -> np.ndarray:
    """Row sums computed with the hardware reduction on 512-element chunks."""
    rows = np.asarray(rows, dtype=np.float32)
    r, length = rows.shape
    chunk = REDUCE_VECTORS * REDUCE_LANES
    padded = np.zeros((r, cdiv(length, chunk) * chunk), dtype=np.float32)
    padded[:, :length] = rows
    blocks = padded.reshape(r, -1, REDUCE_VECTORS, REDUCE_LANES)
    partial = _reduce_blocks(blocks).sum(axis=1, dtype=np.float32)
    return partial.sum(axis=-1, dtype=np.float32)


def softmax_scaled(scores, scale: float) -> np.ndarray:
    """Row softmax of ``scale * scores`` in FP32, max-subtracted."""
    s = np.asarray(scores, dtype=np.float32)
    if s.ndim == 1:
        s = s[None, :]
    if s.ndim != 2 or s.shape[1] == 0:
        raise InvalidArgument("softmax needs nonempty rows")
    if not np.all(np.isfinite(s)):
        raise InvalidArgument("scores must be finite")
    z = s * np.float32(scale)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / hw_row_sums(e)[:, None]


def _split_heads(q, k, v, heads: int | None):
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    prec = q.storage_precision
    k, v = as_tensor(k, prec), as_tensor(v, prec)
    arrs = [t.data for t in (q, k, v)]
    if arrs[0].ndim == 2:
        arrs = [a[None] for a in arrs]
    if any(a.ndim != 3 for a in arrs) or not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
        raise InvalidArgument("q, k, v must share shape (heads, S, d) or (S, d)")
    if heads is not None and heads != arrs[0].shape[0]:
        raise InvalidArgument(f"heads={heads} does not match input with {arrs[0].shape[0]} heads")
    return arrs, prec


def _mt_head(qh, kh, vh, m_r, m_c, spec, prec, mem, trace, scale):
    s_len, d = qh.shape
    b = prec.bytes_per_element
    dsps = spec.dsps_per_cluster
    hint = "reduce m_r"
    out = np.zeros((s_len, d), dtype=np.float32)
    q_gsm = mem.alloc(MemLevel.GSM, s_len * d * b, step="Q in GSM", hint=hint)
    trace.add(DMA, MemLevel.DDR, MemLevel.GSM, s_len * d * b, "q")
    o_gsm = mem.alloc(MemLevel.GSM, s_len * d * b, step="O in GSM", hint=hint)
    kv_chunks = cdiv(s_len, m_c)
    per_dsp = []
    for dsp in range(dsps):
        hs = [mem.alloc(MemLevel.SM, m_r * d * b, dsp, "Q block", hint),
              mem.alloc(MemLevel.AM, 2 * min(m_c, s_len) * d * b, dsp, "K block double buffer", hint),
              mem.alloc(MemLevel.AM, 2 * min(m_c, s_len) * d * b, dsp, "V block double buffer", hint),
              mem.alloc(MemLevel.AM, m_r * d * 4, dsp, "O block accumulator", hint)]
        per_dsp.append(hs)
    # score rows greedily fill the remaining AM; the tail spills to GSM
    score_bytes = m_r * s_len * 4
    am_free = spec.am_bytes - mem.occupancy(MemLevel.AM, 0)
    in_am = min(score_bytes, max(0, am_free) // (m_r * 4) * (m_r * 4))
    spill = score_bytes - in_am
    for dsp in range(dsps):
        if in_am:
            per_dsp[dsp].append(mem.alloc(MemLevel.AM, in_am, dsp, "scores (AM part)", hint))
    spill_h = None
    if spill:
        spill_h = mem.alloc(MemLevel.GSM, spill * dsps, step="scores spilled to GSM", hint=hint)
        trace.stats["score_spill_bytes"] = trace.stats.get("score_spill_bytes", 0) + spill * dsps

    rows_per_round = m_r * dsps
    for r0 in range(0, s_len, rows_per_round):
        blocks = [(q0, min(m_r, s_len - q0)) for q0 in range(r0, min(r0 + rows_per_round, s_len), m_r)]
        for q0, rows in blocks:
            trace.add(DMA, MemLevel.GSM, MemLevel.SM, rows * d * b, "q_local")
        # stage 1: stream K^T column blocks against the stationary Q blocks
        trace.add(BCAST, MemLevel.DDR, MemLevel.AM, s_len * d * b, "k", chunks=kv_chunks)
        scores = [np.empty((rows, s_len), dtype=np.float32) for _, rows in blocks]
        for c0 in range(0, s_len, m_c):
            k_blk = kh[c0:c0 + m_c]
            for sc, (q0, rows) in zip(scores, blocks):
                sc[:, c0:c0 + m_c] = qh[q0:q0 + rows] @ k_blk.T
        if spill:
            for _ in blocks:
                trace.add(DMA, MemLevel.AM, MemLevel.GSM, spill, "score_spill")
        # stage 2: scaled softmax
        weights = [softmax_scaled(sc, scale) for sc in scores]
        # stage 3: weights x V, streamed in the same blocks
        trace.add(BCAST, MemLevel.DDR, MemLevel.AM, s_len * d * b, "v", chunks=kv_chunks)
        for wt, (q0, rows) in zip(weights, blocks):
            acc = np.zeros((rows, d), dtype=np.float32)
            for c0 in range(0, s_len, m_c):
                acc += wt[:, c0:c0 + m_c] @ vh[c0:c0 + m_c]
            out[q0:q0 + rows] = acc
            trace.add(DMA, MemLevel.AM, MemLevel.GSM, rows * d * b, "o_local")
    trace.add(DMA, MemLevel.GSM, MemLevel.DDR, s_len * d * b, "o")
    for hs in per_dsp:
        for h in hs:
            mem.free(h)
    if spill_h:
        mem.free(spill_h)
    mem.free(q_gsm)
    mem.free(o_gsm)
    return out


def mt_attention(q, k, v, heads: int | None = None, m_r: int = 8, m_c: int = 128,
                 spec: HardwareSpec | None = None) -> tuple[Tensor, TransferTrace]:
    """softmax(Q K^T / sqrt(d)) V with Q/O blocks stationary and K/V broadcast.

    Each round, every DSP holds one m_r-row Q block; K and V are broadcast
    once per round, so per head there are ceil(S / (m_r * DSPs)) broadcasts
    of each and a single Q load and O store.
    """
    spec = spec or HardwareSpec()
    if m_r < 1 or m_c < 1:
        raise InvalidArgument("m_r and m_c must be >= 1")
    (qd, kd, vd), prec = _split_heads(q, k, v, heads)
    h, s_len, d = qd.shape
    trace = TransferTrace()
    mem = SimMemory(spec)
    mem.alloc(MemLevel.DDR, 4 * h * s_len * d * prec.bytes_per_element, step="Q,K,V,O in DDR")
    scale = 1.0 / math.sqrt(d)
    out = np.stack([_mt_head(qd[i], kd[i], vd[i], m_r, m_c, spec, prec, mem, trace, scale)
                    for i in range(h)])
    squeeze = np.ndim(as_tensor(q).data) == 2
    return Tensor(out[0] if squeeze else out, prec), trace


def flash_attention_ref(q, k, v, m_c: int = 128, m_r: int = 8, heads: int | None = None,
                        spec: HardwareSpec | None = None) -> tuple[Tensor, TransferTrace]:
    """K/V-stationary block attention with online softmax.

    K and V are broadcast once and stay resident (sharded over the DSPs'
    AM). Q is loaded in m_c-row blocks; each block's running output is
    read and written back, giving ceil(S/m_c) Q and 2*ceil(S/m_c) O DMAs.
    """
    spec = spec or HardwareSpec()
    if m_r < 1 or m_c < 1:
        raise InvalidArgument("m_r and m_c must be >= 1")
    (qd, kd, vd), prec = _split_heads(q, k, v, heads)
    h, s_len, d = qd.shape
    b = prec.bytes_per_element
    dsps = spec.dsps_per_cluster
    trace = TransferTrace()
    mem = SimMemory(spec)
    mem.alloc(MemLevel.DDR, 4 * h * s_len * d * b, step="Q,K,V,O in DDR")
    scale = np.float32(1.0 / math.sqrt(d))
    hint = "reduce m_c"
    out = np.zeros((h, s_len, d), dtype=np.float32)
    for i in range(h):
        qh, kh, vh = qd[i], kd[i], vd[i]
        shard_rows = cdiv(s_len, dsps)
        resident = [mem.alloc(MemLevel.AM, 2 * shard_rows * d * b, dsp, "resident K/V shard", hint)
                    for dsp in range(dsps)]
        trace.add(BCAST, MemLevel.DDR, MemLevel.AM, s_len * d * b, "k", chunks=cdiv(s_len, m_r))
        trace.add(BCAST, MemLevel.DDR, MemLevel.AM, s_len * d * b, "v", chunks=cdiv(s_len, m_r))
        work = mem.alloc(MemLevel.AM, m_c * d * b + m_c * d * 4 + m_c * m_r * 4, 0,
                         "Q block, O accumulator, score tile", hint)
        for q0 in range(0, s_len, m_c):
            rows = min(m_c, s_len - q0)
            trace.add(DMA, MemLevel.DDR, MemLevel.AM, rows * d * b, "q")
            trace.add(DMA, MemLevel.DDR, MemLevel.AM, rows * d * b, "o")
            qb = qh[q0:q0 + rows]
            acc = np.zeros((rows, d), dtype=np.float32)
            row_max = np.full(rows, -np.inf, dtype=np.float32)
            row_sum = np.zeros(rows, dtype=np.float32)
            for c0 in range(0, s_len, m_r):
                sc = (qb @ kh[c0:c0 + m_r].T) * scale
                new_max = np.maximum(row_max, sc.max(axis=1))
                corr = np.exp(row_max - new_max)
                p = np.exp(sc - new_max[:, None])
                row_sum = row_sum * corr + p.sum(axis=1)
                acc = acc * corr[:, None] + p @ vh[c0:c0 + m_r]
                row_max = new_max
            out[i, q0:q0 + rows] = acc / row_sum[:, None]
            trace.add(DMA, MemLevel.AM, MemLevel.DDR, rows * d * b, "o")
        mem.free(work)
        for hnd in resident:
            mem.free(hnd)
    squeeze = np.ndim(as_tensor(q).data) == 2
    return Tensor(out[0] if squeeze else out, prec), trace


def attention_reference(q, k, v) -> np.ndarray:
    """Plain float64 softmax(QK^T/sqrt(d))V over (heads, S, d) or (S, d)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = q.shape[-1]
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(d)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ v
