import random

import pytest
from hypothesis import given, strategies as st

from hierinfer.errors import ConfigError, InvalidArgument, SimulationError
from hierinfer.pbd_pipeline import (MicroBatch, PoolConfig, Request, ServiceModel, analytic_throughput,
                                    form_batches, load_workload, random_workload, simulate,
                                    steady_state_batch_rate)


def unit_service(t_p, t_d, **kw):
    """Prefill costs t_p per prompt token, a decode step costs t_d, nothing else."""
    return ServiceModel(prefill_linear_per_token=t_p, prefill_attn_per_token=0.0,
                        decode_linear_per_step=t_d, decode_attn_per_step=0.0, **kw)


def test_form_batches():
    (one,) = form_batches([Request(0, 5, 5)])
    assert one.request_ids == (0,) and "attention" in one.per_request_ops
    reqs = [Request(i, 16, 4) for i in range(8)]
    batches = form_batches(reqs, max_batch=4)
    assert [b.request_ids for b in batches] == [(0, 1, 2, 3), (4, 5, 6, 7)]
    assert all(b.batched_ops == ("linear", "layernorm") and b.per_request_ops == ("attention",) for b in batches)
    assert len(form_batches(reqs, policy="none")) == 8
    late_first = [Request(0, 1, 1, 5.0), Request(1, 1, 1, 0.0)]
    assert form_batches(late_first, 1)[0].request_ids == (1,)
    with pytest.raises(InvalidArgument):
        form_batches([])
    with pytest.raises(InvalidArgument):
        MicroBatch(0, ())


def test_request_validation():
    with pytest.raises(InvalidArgument):
        Request(0, 0, 1)
    with pytest.raises(InvalidArgument):
        Request(0, 1, 1, -1.0)
    with pytest.raises(InvalidArgument):
        PoolConfig(buffer_slots=0)


def test_accounting_identity():
    svc = ServiceModel(prefill_linear_per_token=1.0, prefill_attn_per_token=0.5,
                       decode_linear_per_step=2.0, decode_attn_per_step=0.25)
    reqs = [Request(i, 10, 3) for i in range(8)]
    res = simulate(reqs, PoolConfig(micro_batch_size=4, service=svc, buffer_slots=4))
    # linear: once per micro-batch (2 x 10 tokens prefill, 2 x 3 decode steps)
    assert res.busy["linear"] == pytest.approx(2 * 10 * 1.0 + 2 * 3 * 2.0)
    # attention: per request (8 x 10 x 0.5 prefill, 8 x 3 x 0.25 decode)
    assert res.busy["attention"] == pytest.approx(8 * 10 * 0.5 + 8 * 3 * 0.25)
    unbatched = simulate(reqs, PoolConfig(micro_batch_size=4, buffer_slots=4,
                                          service=ServiceModel(**{**svc.__dict__, "selective_batching": False})))
    assert unbatched.busy["linear"] == pytest.approx(4 * res.busy["linear"])
    assert unbatched.busy["attention"] == pytest.approx(res.busy["attention"])


def test_hand_traced_backpressure():
    # prefill 1 s per micro-batch, decode 2.5 s: the buffer fills by t=3
    cfg = PoolConfig(buffer_slots=2, micro_batch_size=1, service=unit_service(1.0, 2.5))
    res = simulate([Request(i, 1, 1) for i in range(4)], cfg)
    events = [(e.time, e.stage, e.kind, e.ref, e.buffer_occupancy) for e in res.timeline
              if e.kind not in ("arrival", "request_done")]
    assert events == [
        (0.0, "P", "prefill_start", 0, 0),
        (1.0, "B", "buffer_put", 0, 1),
        (1.0, "B", "buffer_pull", 0, 0),
        (1.0, "D", "decode_start", 0, 0),
        (1.0, "P", "prefill_start", 1, 0),
        (2.0, "B", "buffer_put", 1, 1),
        (2.0, "P", "prefill_start", 2, 1),
        (3.0, "B", "buffer_put", 2, 2),
        (3.0, "P", "backpressure", -1, 2),
        (3.5, "D", "decode_done", 0, 2),
        (3.5, "B", "buffer_pull", 1, 1),
        (3.5, "D", "decode_start", 1, 1),
        (3.5, "P", "prefill_start", 3, 1),
        (4.5, "B", "buffer_put", 3, 2),
        (6.0, "D", "decode_done", 1, 2),
        (6.0, "B", "buffer_pull", 2, 1),
        (6.0, "D", "decode_start", 2, 1),
        (8.5, "D", "decode_done", 2, 1),
        (8.5, "B", "buffer_pull", 3, 0),
        (8.5, "D", "decode_start", 3, 0),
        (11.0, "D", "decode_done", 3, 0),
    ]
    assert res.max_buffer_occupancy == 2 and res.backpressure_events == 1
    assert res.latencies == {0: 3.5, 1: 6.0, 2: 8.5, 3: 11.0}


def test_decode_faster_than_prefill():
    n = 10
    res = simulate([Request(i, 1, 2) for i in range(n)],
                   PoolConfig(micro_batch_size=1, service=unit_service(1.0, 0.25)))
    assert res.backpressure_events == 0
    assert res.makespan == pytest.approx(n * 1.0 + 2 * 0.25)
    assert res.throughput == pytest.approx(2 * n / (n + 0.5))


@pytest.mark.parametrize("overlap", [True, False])
def test_single_request_latency(overlap):
    svc = ServiceModel(kv_bytes_per_token=1000, kv_link_bandwidth=1e6)
    req = Request(0, 100, 7, arrival_time=2.0)
    res = simulate([req], PoolConfig(service=svc, overlap_transfers=overlap))
    expected = svc.t_prefill(1, 100) + 7 * svc.t_decode_step(1)
    if not overlap:
        expected += svc.kv_transfer_time(100 * 1000)
    assert res.latencies[0] == pytest.approx(expected)


def test_analytic_examples():
    assert analytic_throughput(2, 1.5, 2, 6, 12) == pytest.approx(4 / 3)
    assert analytic_throughput(2, 1.5, 10**9, 6, 12) == pytest.approx(2 / 1.5)
    with pytest.raises(InvalidArgument):
        analytic_throughput(0, 1, 1, 1, 1)


@pytest.mark.parametrize("t_p,t_d,dp", [(2.0, 1.5, 1), (2.0, 1.5, 2), (3.0, 1.0, 2), (1.0, 3.0, 2), (5.0, 1.0, 4)])
def test_steady_state_matches_formula(t_p, t_d, dp):
    cfg = PoolConfig(prefill_clusters=dp, decode_clusters=1, buffer_slots=dp + 2, micro_batch_size=1,
                     service=unit_service(t_p, t_d))
    res = simulate([Request(i, 1, 1) for i in range(300)], cfg)
    rate = steady_state_batch_rate(res, 1)
    assert rate == pytest.approx(analytic_throughput(t_p, t_d, dp, 1, 1), rel=0.05)


def _inflight_ok(res, slots):
    inflight = 0
    occupancy = 0
    for e in res.timeline:
        if e.kind == "prefill_start":
            inflight += 1
            if occupancy + inflight > slots:
                return False
        elif e.kind == "buffer_put":
            inflight -= 1
        occupancy = e.buffer_occupancy
        if occupancy > slots:
            return False
    return True


workloads = st.builds(
    lambda n, seed, arr, pc, dc, bs, mb: (random_workload(n, seed, (1, 64), (1, 16), arr),
                                          PoolConfig(pc, bs, dc, mb, overlap_transfers=bool(seed % 2))),
    st.integers(1, 40), st.integers(0, 10**6), st.sampled_from([0.0, 0.01, 0.2]),
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))


@given(workloads)
def test_pipeline_invariants(case):
    reqs, cfg = case
    res = simulate(reqs, cfg)
    assert res.max_buffer_occupancy <= cfg.buffer_slots
    assert _inflight_ok(res, cfg.buffer_slots)
    assert sorted(res.latencies) == [r.id for r in reqs]
    assert res.tokens == sum(r.gen_len for r in reqs)
    done = [e.ref for e in res.timeline if e.kind == "request_done"]
    assert sorted(done) == sorted(set(done)) == [r.id for r in reqs]
    again = simulate(reqs, cfg)
    assert again.timeline == res.timeline


@given(st.integers(1, 30), st.integers(0, 10**6), st.booleans(), st.integers(1, 3), st.integers(1, 4))
def test_more_slots_never_hurt(n, seed, single_prefill, clusters, mb):
    # holds when one of the stages has a single cluster under saturated load
    reqs = random_workload(n, seed, (1, 64), (1, 16))
    pc, dc = (1, clusters) if single_prefill else (clusters, 1)
    ts = [simulate(reqs, PoolConfig(pc, b, dc, mb)).throughput for b in range(1, 6)]
    assert all(b >= a * (1 - 1e-12) for a, b in zip(ts, ts[1:]))


def test_slot_anomaly_with_parallel_stages():
    # with several clusters on both sides a bigger buffer can reorder decode work
    reqs = [Request(0, 4, 4), Request(1, 3, 2), Request(2, 3, 2)]
    svc = unit_service(1.0, 1.0)
    small = simulate(reqs, PoolConfig(3, 2, 2, 1, svc)).throughput
    large = simulate(reqs, PoolConfig(3, 3, 2, 1, svc)).throughput
    assert large < small


@given(st.integers(1, 30), st.integers(0, 10**6), st.integers(1, 4))
def test_batching_never_hurts_single_cluster(n, seed, mb):
    reqs = random_workload(n, seed, (1, 64), (1, 16))
    on = simulate(reqs, PoolConfig(micro_batch_size=mb)).throughput
    off = simulate(reqs, PoolConfig(micro_batch_size=mb, service=ServiceModel(selective_batching=False))).throughput
    assert on >= off * (1 - 1e-12)


def test_event_budget():
    with pytest.raises(SimulationError):
        simulate([Request(i, 1, 1) for i in range(10)], PoolConfig(), max_events=5)


def test_horizon_leaves_unfinished():
    reqs = [Request(i, 1, 1) for i in range(10)]
    res = simulate(reqs, PoolConfig(micro_batch_size=1, service=unit_service(1.0, 1.0)), horizon=4.5)
    assert 0 < res.completed < 10 and res.unfinished == 10 - res.completed


def test_coupled_pool_serializes():
    reqs = [Request(i, 1, 1) for i in range(4)]
    cfg = PoolConfig(micro_batch_size=1, service=unit_service(1.0, 1.0), decoupled=False)
    res = simulate(reqs, cfg)
    assert res.makespan == pytest.approx(8.0)


def test_pool_config_mapping():
    cfg = PoolConfig.from_mapping({"buffer_slots": 3, "service": {"decode_attn_per_step": 0.1}})
    assert cfg.buffer_slots == 3 and cfg.service.decode_attn_per_step == 0.1
    assert PoolConfig.from_mapping(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="buffer_slot"):
        PoolConfig.from_mapping({"buffer_slot": 3})
    with pytest.raises(ConfigError):
        PoolConfig.from_mapping({"buffer_slots": 0})


def test_load_workload():
    reqs = load_workload({"requests": [{"prompt_len": 4, "gen_len": 2}, {"id": 9, "prompt_len": 1, "gen_len": 1,
                                                                         "arrival_time": 0.5}]})
    assert reqs == [Request(0, 4, 2), Request(9, 1, 1, 0.5)]
    with pytest.raises(ConfigError):
        load_workload([{"prompt_len": 4}])
    with pytest.raises(ConfigError):
        load_workload([{"prompt_len": 4, "gen_len": 1, "color": 2}])


def test_random_workload_seeded():
    assert random_workload(20, 3) == random_workload(20, 3)
    assert random_workload(20, 3) != random_workload(20, 4)
    arr = random_workload(50, 1, mean_interarrival=0.1)
    assert all(a.arrival_time <= b.arrival_time for a, b in zip(arr, arr[1:]))
