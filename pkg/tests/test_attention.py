import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import attention64, attention_rows, column_sums
from hierinfer.attention import (flash_attention_ref, hw_row_sums, mt_attention, softmax_scaled,
                                 vector_reduce_hw)
from hierinfer.attention_io import AttentionShape, io_counts
from hierinfer.errors import CapacityError, InvalidArgument
from hierinfer.hw_model import HardwareSpec, Precision
from hierinfer.memory import Tensor, TransferKind


def qkv(seed, *shape):
    rng = np.random.default_rng(seed)
    return tuple(rng.standard_normal(shape, dtype=np.float32) for _ in range(3))


def test_oracles_agree():
    q, k, v = qkv(0, 9, 5)
    assert np.allclose(attention_rows(q, k, v), attention64(q, k, v), atol=1e-12)


def test_single_token():
    x = np.array([[0.7]], dtype=np.float32)
    v = np.array([[-2.5]], dtype=np.float32)
    for fn in (mt_attention, flash_attention_ref):
        o, _ = fn(x, x, v)
        assert o.data.tolist() == [[-2.5]]


def test_four_heads_against_reference():
    q, k, v = qkv(1, 4, 128, 128)
    o, trace = mt_attention(q, k, v, heads=4)
    assert np.max(np.abs(o.data - attention64(q, k, v))) <= 1e-4
    assert trace.count("q") == trace.count("o") == 4


def test_mt_counts_s1920():
    q, k, v = qkv(2, 1920, 16)
    o, trace = mt_attention(q, k, v, m_r=8, m_c=128)
    assert (trace.count("q"), trace.count("o"), trace.count("k"), trace.count("v")) == (1, 1, 10, 10)
    assert trace.count("k", TransferKind.BROADCAST) == 10
    assert np.max(np.abs(o.data - attention64(q, k, v))) <= 1e-4


def test_flash_counts():
    q, k, v = qkv(3, 1024, 16)
    _, trace = flash_attention_ref(q, k, v, m_c=128)
    assert (trace.count("q"), trace.count("o"), trace.count("k"), trace.count("v")) == (8, 16, 1, 1)
    q, k, v = qkv(4, 128, 16)
    _, trace = flash_attention_ref(q, k, v, m_c=128)
    assert (trace.count("q"), trace.count("o")) == (1, 2)


@given(st.integers(1, 300), st.sampled_from([1, 4, 16, 64]), st.integers(1, 3), st.integers(1, 16),
       st.integers(1, 200), st.integers(0, 10**6))
def test_mt_and_flash_against_reference(s, d, heads, m_r, m_c, seed):
    q, k, v = qkv(seed, heads, s, d)
    ref = attention64(q, k, v)
    mt, mt_trace = mt_attention(q, k, v, m_r=m_r, m_c=m_c)
    fl, fl_trace = flash_attention_ref(q, k, v, m_c=m_c, m_r=m_r)
    assert np.max(np.abs(mt.data - ref)) <= 1e-4
    assert np.max(np.abs(fl.data - ref)) <= 1e-4
    assert np.max(np.abs(mt.data - fl.data)) <= 1e-4
    shape = AttentionShape(s, d, heads, m_r, m_c)
    for trace, method in ((mt_trace, "mt"), (fl_trace, "flash")):
        c = io_counts(shape, method)
        got = (trace.count("q"), trace.count("o"), trace.count("k"), trace.count("v"))
        assert got == (c.q_dma, c.o_dma, c.k_broadcast, c.v_broadcast)


def test_mt_fp16_storage():
    q, k, v = qkv(5, 64, 32)
    o, _ = mt_attention(Tensor(q, Precision.FP16), Tensor(k, Precision.FP16), Tensor(v, Precision.FP16))
    assert o.storage_precision is Precision.FP16
    ref = attention64(*(Tensor(t, Precision.FP16).data for t in (q, k, v)))
    # one FP16 rounding of the stored output on top of the FP32 tolerance
    assert np.all(np.abs(o.data - ref) <= 2.0 ** -11 * np.abs(ref) + 1e-4)


def test_score_capacity_hint():
    q = np.ones((4096, 128), np.float32)
    with pytest.raises(CapacityError, match="m_r"):
        mt_attention(q, q, q, m_r=2048)


def test_score_spill_goes_to_gsm():
    q, k, v = qkv(6, 2048, 128)
    spec = HardwareSpec()
    o, trace = mt_attention(q, k, v, m_r=64, m_c=128, spec=spec)
    assert trace.count("score_spill") > 0
    assert np.max(np.abs(o.data - attention64(q, k, v))) <= 1e-4


def test_shape_errors():
    q, k, v = qkv(7, 8, 4)
    with pytest.raises(InvalidArgument):
        mt_attention(q, k[:4], v)
    with pytest.raises(InvalidArgument):
        mt_attention(q, k, v, heads=2)
    with pytest.raises(InvalidArgument):
        flash_attention_ref(q, k, v, m_c=0)


def test_reduce_trivial():
    assert np.array_equal(vector_reduce_hw(np.zeros((16, 32))), np.zeros(32))
    assert np.array_equal(vector_reduce_hw(np.ones((16, 32))), np.full(32, 16.0))
    out, phases = vector_reduce_hw(np.ones((16, 32)), return_phases=True)
    assert len(phases) == 5


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_reduce_matches_column_sums(seed, scale):
    v = (np.random.default_rng(seed).standard_normal((16, 32)) * scale).astype(np.float32)
    got = vector_reduce_hw(v).astype(np.float64)
    ref = column_sums(v)
    mag = np.abs(v.astype(np.float64)).sum(axis=0)
    assert np.all(np.abs(got - ref) <= 1e-6 * mag)


@pytest.mark.parametrize("shape", [(32,), (16, 31), (17, 32)])
def test_reduce_arity(shape):
    with pytest.raises(InvalidArgument):
        vector_reduce_hw(np.zeros(shape))


@given(st.integers(1, 5), st.integers(1, 1500), st.integers(0, 10**6))
def test_hw_row_sums(rows, length, seed):
    x = np.random.default_rng(seed).random((rows, length), dtype=np.float32)
    assert np.allclose(hw_row_sums(x), x.astype(np.float64).sum(axis=1), rtol=1e-6)


def test_softmax_examples():
    assert softmax_scaled([[3.0]], 1.0).tolist() == [[1.0]]
    assert softmax_scaled([[2.0, 2.0]], 0.5).tolist() == [[0.5, 0.5]]
    x = np.random.default_rng(0).standard_normal((4, 64)) * 10
    assert np.all(np.abs(softmax_scaled(x, 0.125).astype(np.float64).sum(axis=1) - 1) <= 1e-6)
    with pytest.raises(InvalidArgument):
        softmax_scaled(np.zeros((2, 0)), 1.0)
    with pytest.raises(InvalidArgument):
        softmax_scaled([[np.inf, 0.0]], 1.0)


@given(st.integers(1, 8), st.integers(1, 700), st.floats(1e-3, 10), st.integers(0, 10**6))
def test_softmax_rows_normalized(r, c, scale, seed):
    x = np.random.default_rng(seed).standard_normal((r, c)) * 20
    p = softmax_scaled(x, scale)
    assert p.dtype == np.float32
    assert np.all(np.abs(p.astype(np.float64).sum(axis=1) - 1) <= 1e-6)
    assert np.all(p >= 0)
