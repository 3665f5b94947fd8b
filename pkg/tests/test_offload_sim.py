"""Offload replay: swap accounting, latency model, metrics, trace files."""

import numpy as np
import pytest

from moelab.errors import DataError
from moelab.losses import hard_replacements
from moelab.model import RoutingTrace
from moelab.offload_sim import (
    OffloadCostModel,
    calibrate_cost_model,
    delta_uniform,
    exrep,
    peak_memory,
    read_trace,
    replay_offload,
    resident_set_sizes,
    synthetic_trace,
    write_trace,
)

COST = OffloadCostModel(
    expert_bytes=1e6, bandwidth=1e9, compute_per_token=0.01, shared_bytes=1e7
)


def random_trace(rng, layers, tokens, e, k):
    sel = np.empty((layers, tokens, k), dtype=np.int64)
    for l in range(layers):
        for t in range(tokens):
            sel[l, t] = rng.choice(e, size=k, replace=False)
    return RoutingTrace(selections=sel, num_experts=e)


def test_constant_trace_no_swaps_pure_compute_rate():
    sel = np.tile(np.array([1, 3]), (2, 10, 1))
    trace = RoutingTrace(selections=sel, num_experts=4)
    report = replay_offload(trace, COST)
    assert report.swap_events == 0
    assert report.tokens_per_sec == pytest.approx(1.0 / COST.compute_per_token)
    assert report.prefill_seconds == pytest.approx(2 * 2 * 1e6 / 1e9)


def test_alternating_k1_trace_two_swaps():
    trace = RoutingTrace(selections=np.array([[[0], [1], [0]]]), num_experts=2)
    report = replay_offload(trace, COST)
    assert report.swap_events == 2
    want = 3 * COST.compute_per_token + 2 * COST.expert_bytes / COST.bandwidth
    assert report.decode_seconds == pytest.approx(want)


def test_swap_events_equal_hard_replacements_on_random_traces():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        layers = int(rng.integers(1, 4))
        tokens = int(rng.integers(2, 65))
        e = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(e, 4) + 1))
        trace = random_trace(rng, layers, tokens, e, k)
        report = replay_offload(trace, COST)
        want = 0
        for l in range(layers):
            h, _ = hard_replacements(trace.selections[l][None], e)
            want += h // 2
        assert report.swap_events == want


def test_exrep_extremes_and_warning():
    full_churn = RoutingTrace(
        selections=np.array([[[i % 2] for i in range(12)]]), num_experts=2
    )
    assert exrep(full_churn) == 100.0
    constant = RoutingTrace(selections=np.zeros((1, 9, 1), dtype=int), num_experts=2)
    assert exrep(constant) == 0.0
    single = RoutingTrace(selections=np.zeros((1, 1, 1), dtype=int), num_experts=2)
    with pytest.warns(UserWarning):
        assert exrep(single) == 0.0


def test_exrep_shares_integer_numerator_with_hard_replacements():
    rng = np.random.default_rng(1)
    for _ in range(100):
        trace = random_trace(rng, 1, int(rng.integers(2, 30)), 6, 2)
        h, h_norm = hard_replacements(trace.selections[0][None], 6)
        assert exrep(trace) == 100.0 * h_norm


def test_delta_uniform_closed_forms():
    uniform = RoutingTrace(
        selections=np.arange(4).reshape(1, 4, 1).repeat(2, axis=0), num_experts=4
    )
    overall, per_layer = delta_uniform(uniform)
    assert overall == 0.0

    collapse = RoutingTrace(selections=np.zeros((1, 8, 1), dtype=int), num_experts=4)
    overall, per_layer = delta_uniform(collapse)
    assert overall == pytest.approx(37.5)
    assert per_layer[0] == pytest.approx(37.5)


def test_delta_uniform_against_counting_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        e = int(rng.integers(2, 7))
        k = int(rng.integers(1, e + 1))
        trace = random_trace(rng, int(rng.integers(1, 4)), int(rng.integers(1, 20)), e, k)
        overall, per_layer = delta_uniform(trace)
        for l in range(trace.layers):
            counts = np.zeros(e)
            for t in range(trace.tokens):
                for ki in range(k):
                    counts[trace.selections[l, t, ki]] += 1
            f = counts / counts.sum()
            want = 100.0 * np.abs(f - 1.0 / e).mean()
            assert per_layer[l] == pytest.approx(want, abs=1e-12)
        assert overall == pytest.approx(np.mean(per_layer), abs=1e-12)


def test_resident_set_bound_after_every_step():
    rng = np.random.default_rng(3)
    for _ in range(100):
        e = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(e, 4) + 1))
        trace = random_trace(rng, 2, int(rng.integers(1, 20)), e, k)
        sizes = resident_set_sizes(trace)
        assert np.all(sizes <= k)


def test_tokens_per_sec_strictly_decreasing_in_swaps():
    rates = []
    for pct in (0.0, 10.0, 30.0, 60.0, 90.0):
        trace = synthetic_trace(pct, tokens=64, layers=2, num_experts=8, k=2, seed=4)
        rates.append(replay_offload(trace, COST).tokens_per_sec)
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_peak_memory_closed_forms():
    from moelab.config import ModelConfig
    from moelab.experts import expert_param_count, per_expert_param_count

    cfg = ModelConfig(layers=3, heads=2, hidden=32, experts=8, active=2)
    bpp = 4.0
    resident = peak_memory(cfg, offloaded=False, bytes_per_param=bpp)
    offloaded = peak_memory(cfg, offloaded=True, bytes_per_param=bpp)
    per_expert = per_expert_param_count(cfg) * bpp
    assert resident - offloaded == cfg.layers * 6 * per_expert
    active, total = expert_param_count(cfg)
    assert resident == int(round(total * bpp))
    assert offloaded == int(round(active * bpp))

    dense_like = ModelConfig(layers=3, heads=2, hidden=32, experts=4, active=4)
    assert peak_memory(dense_like, True, bpp) == peak_memory(dense_like, False, bpp)


def test_cost_model_validation():
    with pytest.raises(ValueError):
        OffloadCostModel(0, 1, 1, 1)
    with pytest.raises(ValueError):
        OffloadCostModel(1, 1, -2, 1)


def test_synthetic_trace_hits_target_event_count():
    for pct in (6.55, 43.82):
        trace = synthetic_trace(pct, tokens=129, layers=2, num_experts=8, k=2, seed=5)
        events = int(round(pct / 100.0 * 2 * 128))
        total = 0
        for l in range(2):
            h, _ = hard_replacements(trace.selections[l][None], 8)
            total += h // 2
        assert total == 2 * events
        assert exrep(trace) == pytest.approx(100.0 * events / (2 * 128), abs=1e-9)


def test_synthetic_trace_validation():
    with pytest.raises(ValueError):
        synthetic_trace(120.0, 10, 1, 4, 2)
    with pytest.raises(ValueError):
        synthetic_trace(10.0, 1, 1, 4, 2)
    with pytest.raises(ValueError):
        synthetic_trace(10.0, 10, 1, 2, 2)  # churn impossible with all experts active
    # zero churn with k == E is fine
    trace = synthetic_trace(0.0, 10, 1, 2, 2)
    assert exrep(trace) == 0.0


def test_calibration_reproduces_observations():
    cost = calibrate_cost_model(15.02, 43.82, 23.10, 6.55, tokens=129, layers=1, k=2,
                                expert_bytes=3.3e7, shared_bytes=1e9)
    high = replay_offload(synthetic_trace(43.82, 129, 1, 8, 2, seed=1), cost)
    low = replay_offload(synthetic_trace(6.55, 129, 1, 8, 2, seed=2), cost)
    assert high.tokens_per_sec == pytest.approx(15.02, rel=0.02)
    assert low.tokens_per_sec == pytest.approx(23.10, rel=0.03)
    ratio = low.tokens_per_sec / high.tokens_per_sec
    assert 1.3 <= ratio <= 1.8


def test_calibration_rejects_degenerate_inputs():
    with pytest.raises(ValueError):
        calibrate_cost_model(15.0, 40.0, 20.0, 40.0, 129, 1, 2, 1e6, 1e7)
    with pytest.raises(ValueError):
        # faster rate at higher churn implies negative swap cost
        calibrate_cost_model(23.0, 43.82, 15.0, 6.55, 129, 1, 2, 1e6, 1e7)


def test_trace_file_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    trace = random_trace(rng, 3, 17, 6, 2)
    path = tmp_path / "trace.jsonl"
    write_trace(trace, path)
    back = read_trace(path)
    assert np.array_equal(back.selections, trace.selections)
    assert back.num_experts == trace.num_experts


def test_trace_file_errors_name_the_line(tmp_path):
    path = tmp_path / "t.jsonl"

    path.write_text("")
    with pytest.raises(DataError, match="empty"):
        read_trace(path)

    path.write_text('{"layers": 1}\n')
    with pytest.raises(DataError, match="line 1"):
        read_trace(path)

    header = '{"format": "moelab-trace-v1", "layers": 1, "tokens": 2, "active": 2, "experts": 4}\n'
    path.write_text(header + '{"token": 0, "layer": 0, "experts": [0, 1]}\n')
    with pytest.raises(DataError, match="expected 2 records"):
        read_trace(path)

    path.write_text(
        header
        + '{"token": 0, "layer": 0, "experts": [0, 1]}\n'
        + '{"token": 1, "layer": 0, "experts": [0]}\n'
    )
    with pytest.raises(DataError, match="line 3.*expected 2 expert ids"):
        read_trace(path)

    path.write_text(
        header
        + '{"token": 0, "layer": 0, "experts": [0, 1]}\n'
        + '{"token": 1, "layer": 0, "experts": [0, 9]}\n'
    )
    with pytest.raises(DataError, match=r"line 3.*outside \[0, 4\)"):
        read_trace(path)

    path.write_text(header + "not json\n" + '{"token": 1, "layer": 0, "experts": [0, 1]}\n')
    with pytest.raises(DataError, match="line 2.*invalid JSON"):
        read_trace(path)


def test_malformed_selection_tensor_rejected():
    with pytest.raises(DataError):
        RoutingTrace(selections=np.array([[[0, 4]]]), num_experts=4)
    with pytest.raises(DataError):
        RoutingTrace(selections=np.array([[0, 1]]), num_experts=4)
