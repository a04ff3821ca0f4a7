import itertools
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from hierinfer.errors import InfeasibleError, InvalidArgument
from hierinfer.hw_model import HardwareSpec, Precision
from hierinfer.tiling import (Dataflow, GemmShape, MemLevel, TilePlan, check_buffered_plan,
                              check_outer_product, dma_bytes, minimal_candidate, plan_score,
                              search_tile_plan)

FP32 = Precision.FP32
REFERENCE_PLAN = TilePlan(m_g=720, k_g=2048, m_2=30, k_2=256, n_2=256)


def by_level(checks):
    return {c.level: c for c in checks}


def test_outer_product_boundary():
    c = by_level(check_outer_product(128, 128, 768, FP32))
    assert (c[MemLevel.SM].used_bytes, c[MemLevel.SM].limit_bytes) == (65536, 65536)
    assert (c[MemLevel.AM].used_bytes, c[MemLevel.AM].limit_bytes) == (786432, 786432)
    assert all(x.satisfied for x in c.values())
    assert all(x.satisfied for x in check_outer_product(1, 1, 1))
    over = by_level(check_outer_product(129, 128, 768, FP32))
    assert over[MemLevel.SM].used_bytes == 66048 and not over[MemLevel.SM].satisfied


def test_reference_plan_budget():
    c = by_level(check_buffered_plan(REFERENCE_PLAN, 4096, FP32))
    assert c[MemLevel.SM].used_bytes == 61440
    assert c[MemLevel.AM].used_bytes == 632832
    assert c[MemLevel.GSM].used_bytes == 5898240
    assert all(x.satisfied for x in c.values())


def test_reference_plan_am_edge():
    assert by_level(check_buffered_plan(REFERENCE_PLAN, 42496))[MemLevel.AM].satisfied
    am = by_level(check_buffered_plan(REFERENCE_PLAN, 42497))[MemLevel.AM]
    assert am.used_bytes == 786436 and not am.satisfied


def test_all_ones_plan():
    plan = TilePlan(1, 1, 1, 1, 1, m_1=1, n_1=1)
    assert all(c.satisfied for c in check_buffered_plan(plan, 1))


def test_plan_invariants():
    with pytest.raises(InvalidArgument):
        TilePlan(24, 64, 6, 64, 64, n_1=128)
    with pytest.raises(InvalidArgument):
        TilePlan(24, 64, 6, 64, 128, k_1=128)
    with pytest.raises(InvalidArgument):
        TilePlan(24, 64, 6, 64, 128, y_tile_rows=7)
    with pytest.raises(InvalidArgument):
        TilePlan(0, 64, 6, 64, 128)
    assert REFERENCE_PLAN.p_pieces == 24
    assert TilePlan.from_dict(REFERENCE_PLAN.to_dict()) == REFERENCE_PLAN


def offchip_oracle(plan, shape, b):
    """Off-chip bytes of the broadcast-W nest, written from the loop description."""
    m, k, n = shape.m, shape.k, shape.n
    row_blocks = -(-m // plan.m_g)
    col_blocks = -(-n // plan.n_2)
    x = m * k * b if plan.k_g >= k else col_blocks * m * k * b
    return x + row_blocks * k * n * b + m * n * b


def test_search_beats_coarse_grid():
    shape = GemmShape(4096, 2048, 4096)
    spec = HardwareSpec()
    best = search_tile_plan(shape, FP32, spec)
    assert best.dataflow is Dataflow.BROADCAST_W
    assert all(c.satisfied for c in check_buffered_plan(best, shape.n, FP32, spec))
    best_score = plan_score(best, shape, FP32, spec)
    assert best_score == Fraction(shape.m * shape.k * shape.n, offchip_oracle(best, shape, 4))
    grid = itertools.product((6, 12, 24, 30, 48), (64, 128, 256, 512), (128, 256, 512, 768, 1024))
    seen = 0
    for m_2, k_2, n_2 in grid:
        for k_g in (k_2, 2048):
            plan = TilePlan(m_g=24 * m_2, k_g=k_g, m_2=m_2, k_2=k_2, n_2=n_2)
            if not all(c.satisfied for c in check_buffered_plan(plan, shape.n, FP32, spec)):
                continue
            seen += 1
            score = Fraction(shape.m * shape.k * shape.n, offchip_oracle(plan, shape, 4))
            assert score <= best_score
    assert seen > 10
    # the reference plan is one of the optimal points under this score
    assert plan_score(REFERENCE_PLAN, shape, FP32, spec) == best_score


def test_small_m_uses_broadcast_x():
    plan = search_tile_plan(GemmShape(1, 4096, 4096))
    assert plan.dataflow is Dataflow.BROADCAST_X


def test_minimal_candidate_forced():
    spec = HardwareSpec(sm_bytes=3072, am_bytes=75264, gsm_bytes=36864)
    shape = GemmShape(6, 128, 128)
    assert search_tile_plan(shape, FP32, spec) == minimal_candidate(shape, spec)


def test_infeasible_names_binding_level():
    spec = HardwareSpec(sm_bytes=1024, am_bytes=75264)
    with pytest.raises(InfeasibleError) as err:
        search_tile_plan(GemmShape(512, 512, 512), FP32, spec)
    assert err.value.binding == "SM"


def test_single_tile_counts():
    plan = TilePlan(m_g=30, k_g=256, m_2=30, k_2=256, n_2=256)
    d = dma_bytes(plan, GemmShape(30, 256, 256), FP32)
    assert (d.w.count, d.w.bytes) == (1, 256 * 256 * 4)
    assert d.y.bytes == 30 * 256 * 4
    assert (d.x_ddr.count, d.x_ddr.bytes) == (1, 30 * 256 * 4)


def test_reference_plan_w_broadcasts():
    assert dma_bytes(REFERENCE_PLAN, GemmShape(720, 2048, 4096), FP32).w.count == 128


def test_y_tile_rows_halving():
    shape = GemmShape(720, 512, 1024)
    a = dma_bytes(REFERENCE_PLAN.replace(y_tile_rows=5), shape)
    b = dma_bytes(REFERENCE_PLAN.replace(y_tile_rows=10), shape)
    assert b.y.count * 2 == a.y.count
    assert a.y.bytes == b.y.bytes == 720 * 1024 * 4


def test_plan_rejects_too_many_pieces():
    with pytest.raises(InvalidArgument):
        dma_bytes(TilePlan(m_g=750, k_g=256, m_2=30, k_2=256, n_2=256), GemmShape(750, 256, 256))


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 60), st.integers(1, 60), st.integers(1, 60),
       st.sampled_from([Precision.FP32, Precision.FP16]), st.integers(1, 4096))
def test_y_bytes_conserved(m_2, ytr_seed, k_2, n_2, m, prec, n):
    plan = TilePlan(m_g=m_2 * 24, k_g=k_2, m_2=m_2, k_2=k_2, n_2=n_2, m_1=1, n_1=1,
                    y_tile_rows=1 + ytr_seed % m_2)
    shape = GemmShape(m * 7, 3 * k_2 + 1, n)
    d = dma_bytes(plan, shape, prec)
    assert d.y.bytes == shape.m * shape.n * prec.bytes_per_element


@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 1000), st.integers(0, 2),
       st.integers(1, 64))
def test_outer_product_monotone(m, k, n, which, grow):
    before = check_outer_product(m, k, n)
    dims = [m, k, n]
    dims[which] += grow
    after = check_outer_product(*dims)
    for b, a in zip(before, after):
        assert not (not b.satisfied and a.satisfied)


@given(st.integers(1, 64), st.integers(1, 512), st.integers(1, 512), st.integers(1, 512),
       st.integers(1, 4096), st.sampled_from(["m_2", "k_2", "n_2", "m_g", "k_g"]), st.integers(1, 64))
def test_buffered_monotone(m_2, k_2, n_2, k_g, n_total, field, grow):
    plan = TilePlan(m_g=m_2, k_g=k_g, m_2=m_2, k_2=k_2, n_2=n_2, m_1=1, n_1=1)
    bigger = {f: getattr(plan, f) for f in ("m_g", "k_g", "m_2", "k_2", "n_2")}
    bigger[field] += grow
    plan2 = TilePlan(**bigger, m_1=1, n_1=1)
    for b, a in zip(check_buffered_plan(plan, n_total), check_buffered_plan(plan2, n_total)):
        assert not (not b.satisfied and a.satisfied)


@given(st.integers(1, 2000), st.integers(1, 3000), st.integers(1, 3000),
       st.sampled_from([Precision.FP32, Precision.FP16]))
def test_search_result_is_feasible(m, k, n, prec):
    shape = GemmShape(m, k, n)
    plan = search_tile_plan(shape, prec)
    assert all(c.satisfied for c in check_buffered_plan(plan, n, prec))
    dma_bytes(plan, shape, prec)
