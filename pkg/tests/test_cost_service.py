import math

import pytest

from conftest import make_checkpoint, make_config
from models.decoder import prefill
from services.convert_service import ConversionMethod, convert_checkpoint
from services.cost_service import (
    BenchError, BenchHarness, HardwareSpec, costs_to_dataframe, kv_cache_bytes,
    predict_step_time, replication_waste, sharded_kv_heads_per_partition, sweep_groups
)
from config import Config


def test_kv_cache_bytes_examples():
    config = make_config(H=4, G=1, hd=4, layers=2)
    assert kv_cache_bytes(config, seq_len=8, batch=1, precision='f32') == 512
    assert kv_cache_bytes(config, seq_len=0) == 0
    assert kv_cache_bytes(config, seq_len=8, precision='f64') == 1024
    mha, mqa = make_config(H=8, G=8, hd=4), make_config(H=8, G=1, hd=4)
    assert kv_cache_bytes(mha, 100) == 8 * kv_cache_bytes(mqa, 100)


CACHE_SWEEP = [(H, G, layers) for H in (1, 2, 4, 8) for G in range(1, H + 1) if H % G == 0
               for layers in (1, 2, 4)]


@pytest.mark.parametrize("H,G,layers", CACHE_SWEEP)
def test_analytic_bytes_equal_runtime_cache(H, G, layers):
    ckpt = make_checkpoint(seed=0, H=H, G=G, hd=2, layers=layers, vocab=8)
    for n in (1, 3, 7):
        cache, _ = prefill(ckpt, list(range(n)))
        assert cache.bytes() == kv_cache_bytes(ckpt.config, n)


@pytest.mark.parametrize("H", [1, 2, 4, 8])
@pytest.mark.parametrize("layers", [1, 2, 4])
def test_mha_mqa_cache_ratio_is_h(H, layers):
    mha = make_config(H=H, G=H, hd=2, layers=layers)
    mqa = make_config(H=H, G=1, hd=2, layers=layers)
    assert kv_cache_bytes(mha, 33) == H * kv_cache_bytes(mqa, 33)


HARDWARE = [
    HardwareSpec(),
    HardwareSpec(partitions=4),
    HardwareSpec(memory_bandwidth=1e15, peak_flops=1e9),
]


@pytest.mark.parametrize("hw", HARDWARE)
def test_predicted_time_monotone_in_groups(hw):
    for T in (0, 64, 4096):
        times = [predict_step_time(make_config(H=16, G=G, hd=8, layers=2), hw, T).predicted_time_s
                 for G in (1, 2, 4, 8, 16)]
        assert times == sorted(times)


@pytest.mark.parametrize("hw", HARDWARE)
def test_predicted_time_monotone_in_seq_len(hw):
    for G in (1, 4, 16):
        config = make_config(H=16, G=G, hd=8, layers=2)
        times = [predict_step_time(config, hw, T, batch=2).predicted_time_s for T in (0, 1, 16, 512, 8192)]
        assert times == sorted(times)


@pytest.mark.parametrize("hw", HARDWARE)
def test_predicted_time_monotone_in_model_dim(hw):
    for G in (1, 2, 8):
        by_head_dim = [predict_step_time(make_config(H=8, G=G, hd=hd, layers=2), hw, 256).predicted_time_s
                       for hd in (1, 4, 16, 64)]
        assert by_head_dim == sorted(by_head_dim)
    by_heads = [predict_step_time(make_config(H=H, G=1, hd=16, layers=2), hw, 256).predicted_time_s
                for H in (1, 2, 8, 32)]
    assert by_heads == sorted(by_heads)


@pytest.mark.parametrize("G,P,per_partition,waste", [(1, 8, 1, 8.0), (8, 8, 1, 1.0), (4, 8, 1, 2.0), (8, 2, 4, 1.0), (2, 1, 2, 1.0)])
def test_sharding(G, P, per_partition, waste):
    assert sharded_kv_heads_per_partition(G, P) == per_partition
    assert replication_waste(G, P) == waste


def test_hardware_must_be_positive():
    with pytest.raises(ValueError):
        HardwareSpec(memory_bandwidth=0.0)
    with pytest.raises(ValueError):
        HardwareSpec(partitions=0)


def test_prediction_is_max_of_terms():
    report = predict_step_time(make_config(H=8, G=2, hd=8, layers=2), HardwareSpec(), seq_len=512, batch=4)
    assert report.predicted_time_s >= report.bandwidth_time_s
    assert report.predicted_time_s >= report.compute_time_s
    assert report.predicted_time_s == max(report.bandwidth_time_s, report.compute_time_s)


def test_mha_vs_mqa_term_by_term():
    H, hd, L, T = 8, 16, 2, 1024
    d = H * hd
    hw = HardwareSpec()
    mha = predict_step_time(make_config(H=H, G=H, hd=hd, layers=L), hw, T)
    mqa = predict_step_time(make_config(H=H, G=1, hd=hd, layers=L), hw, T)
    # only the K/V projections differ in compute
    assert mha.flops_per_step - mqa.flops_per_step == 2 * L * 2 * d * (H - 1) * hd
    kv_mha = kv_cache_bytes(make_config(H=H, G=H, hd=hd, layers=L), T)
    kv_mqa = kv_cache_bytes(make_config(H=H, G=1, hd=hd, layers=L), T)
    assert mha.kv_bytes_per_step == kv_mha == H * kv_mqa == H * mqa.kv_bytes_per_step
    kv_proj_mha = L * 2 * d * H * hd * 4
    assert mha.weight_bytes_per_step - mqa.weight_bytes_per_step == kv_proj_mha - kv_proj_mha // H


def test_infinite_bandwidth_leaves_compute():
    report = predict_step_time(make_config(H=8, G=2, hd=8), HardwareSpec(memory_bandwidth=math.inf), 256)
    assert report.bandwidth_time_s == 0.0
    assert report.predicted_time_s == report.compute_time_s


def test_doubling_model_dim_raises_projection_intensity():
    hw = HardwareSpec()
    small = make_config(H=8, G=1, hd=64)
    large = make_config(H=8, G=1, hd=128)
    T = 8192
    assert kv_cache_bytes(large, T) == 2 * kv_cache_bytes(small, T)
    proj_small = predict_step_time(small, hw, 0).flops_per_step
    proj_large = predict_step_time(large, hw, 0).flops_per_step
    assert proj_large == 4 * proj_small
    assert proj_large / kv_cache_bytes(large, T) > proj_small / kv_cache_bytes(small, T)


def test_replication_waste_multiplies_kv_bytes():
    config = make_config(H=8, G=1, hd=4)
    single = predict_step_time(config, HardwareSpec(partitions=1), 64)
    sharded = predict_step_time(config, HardwareSpec(partitions=8), 64)
    assert sharded.kv_bytes_per_step == 8 * single.kv_bytes_per_step
    assert sharded.replication_waste == 8.0


def test_analytic_curve_is_flat_near_mqa():
    # H=64-shaped, bandwidth-bound decode with a long cache
    config = make_config(H=64, G=64, hd=128, layers=1)
    costs = {c.groups: c for c in sweep_groups(config, HardwareSpec(), seq_len=2048, batch=8, groups=[1, 8, 64])}
    assert all(c.bandwidth_bound for c in costs.values())
    t = {g: c.predicted_time_s for g, c in costs.items()}
    assert t[8] - t[1] < t[64] - t[8]


def test_sweep_defaults_to_divisors_and_schema():
    costs = sweep_groups(make_config(H=8, G=8, hd=2), HardwareSpec(), 128)
    assert [c.groups for c in costs] == [1, 2, 4, 8]
    frame = costs_to_dataframe(costs)
    assert list(frame.columns) == Config.REPORT_COLUMNS
    assert frame['kv_bytes'].is_monotonic_increasing


def _family(H=4, hd=2, layers=1, vocab=8, groups=(1, 2, 4)):
    base = make_checkpoint(seed=0, H=H, G=H, hd=hd, layers=layers, vocab=vocab)
    return [convert_checkpoint(base, g, ConversionMethod.mean_pool()) for g in groups]


def test_bench_rejects_bad_requests():
    family = _family()
    harness = BenchHarness()
    with pytest.raises(BenchError):
        harness.bench_generate(family, 4, 4, trials=1)
    with pytest.raises(BenchError):
        harness.bench_generate([], 4, 4, trials=5)
    other = make_checkpoint(seed=0, H=4, G=2, hd=2, layers=2, vocab=8)
    with pytest.raises(BenchError):
        harness.bench_generate([family[0], other], 4, 4, trials=5)
    with pytest.raises(BenchError):
        harness.bench_generate([family[0], family[0]], 4, 4, trials=5)


def test_bench_report_schema_and_determinism():
    report = BenchHarness().bench_generate(_family()[::-1], seq_in=6, seq_out=4, trials=5, seed=1)
    assert report.groups == [1, 2, 4]
    assert all(report.deterministic.values())
    assert all(len(report.tokens[g]) == 4 for g in report.groups)
    frame = report.to_dataframe()
    assert list(frame.columns) == Config.REPORT_COLUMNS
    assert len(frame) == 3
    assert frame['kv_bytes'].tolist() == sorted(set(frame['kv_bytes']))
    assert (frame['trials'] == 5).all()
    again = BenchHarness().bench_generate(_family(), seq_in=6, seq_out=4, trials=5, seed=1).to_dataframe()
    fixed = [c for c in Config.REPORT_COLUMNS if c != 'wall_time_s_median']
    assert frame[fixed].equals(again[fixed])


@pytest.mark.slow
def test_measured_time_non_decreasing_in_groups():
    family = _family(H=8, hd=16, layers=2, vocab=64, groups=(1, 2, 4, 8))
    report = BenchHarness().bench_generate(family, seq_in=256, seq_out=64, trials=5, seed=0)
    assert report.is_monotone_within_noise()
