import numpy as np
import pytest

from conftest import make_checkpoint
from metrics import MetricsCollector
from models.attention import model_forward
from models.decoder import CapacityError, KVCache, decode_step, generate, prefill
from models.tensor import Rng


def recompute_generate(ckpt, prompt, n_steps):
    """Quadratic oracle: rerun the full forward pass for every new token."""
    tokens = list(prompt)
    for _ in range(n_steps):
        tokens.append(int(np.argmax(model_forward(ckpt, tokens)[-1])))
    return tokens[len(prompt):]


def test_prefill_single_token():
    ckpt = make_checkpoint(seed=0, layers=2)
    cache, logits = prefill(ckpt, [3])
    assert cache.length == 1
    np.testing.assert_allclose(logits, model_forward(ckpt, [3])[0], atol=1e-6)


def test_prefill_matches_full_forward():
    ckpt = make_checkpoint(seed=0, H=4, G=2, hd=4, layers=2, vocab=16)
    prompt = Rng(1).integers(16, (8,)).tolist()
    cache, logits = prefill(ckpt, prompt)
    assert cache.length == 8
    np.testing.assert_allclose(logits, model_forward(ckpt, prompt)[7], atol=1e-5)


def test_prefill_over_capacity():
    ckpt = make_checkpoint(seed=0)
    with pytest.raises(CapacityError):
        prefill(ckpt, [1, 2, 3, 4], capacity=3)


def test_decode_step_grows_cache_by_one_row():
    ckpt = make_checkpoint(seed=0, H=4, G=2, hd=2, layers=3)
    c = ckpt.config
    cache, logits = prefill(ckpt, [1, 2])
    before = cache.bytes()
    _, cache = decode_step(ckpt, cache, int(np.argmax(logits)))
    assert cache.bytes() - before == 2 * c.n_layers * c.n_kv_groups * c.head_dim * c.bytes_per_element


def test_decode_step_full_cache_is_rejected_unchanged():
    ckpt = make_checkpoint(seed=0)
    cache, _ = prefill(ckpt, [1, 2], capacity=2)
    snapshot = [k.copy() for k in cache.keys]
    with pytest.raises(CapacityError):
        decode_step(ckpt, cache, 0)
    assert cache.length == 2
    assert all(np.array_equal(a, b) for a, b in zip(snapshot, cache.keys))


def test_cache_growth_ratio_between_mha_and_mqa():
    mha = make_checkpoint(seed=3, H=8, G=8, hd=2, layers=2, vocab=8)
    mqa = make_checkpoint(seed=3, H=8, G=1, hd=2, layers=2, vocab=8)
    growth = []
    for ckpt in (mha, mqa):
        cache, logits = prefill(ckpt, [1, 2, 3])
        before = cache.bytes()
        step_logits, cache = decode_step(ckpt, cache, 4)
        assert step_logits.shape == (8,)
        growth.append(cache.bytes() - before)
    assert growth[0] == 8 * growth[1]


def test_cache_width_and_bytes_formula():
    ckpt = make_checkpoint(seed=0, H=8, G=2, hd=4, layers=2, vocab=8)
    cache = KVCache(ckpt.config, capacity=10)
    assert cache.keys[0].shape == (10, 8)
    assert cache.bytes() == 0
    cache, _ = prefill(ckpt, [1, 2, 3], capacity=10)
    assert cache.bytes() == 2 * 2 * 3 * 2 * 4 * 4
    assert cache.capacity_bytes() == 2 * 2 * 10 * 8 * 4


@pytest.mark.parametrize("seed", range(50))
def test_incremental_decode_equals_recompute(seed):
    rng = Rng(seed)
    G = [1, 2, 4][seed % 3]
    ckpt = make_checkpoint(seed=seed, H=4, G=G, hd=4, layers=2, vocab=16)
    prompt = rng.integers(16, (1 + seed % 5,)).tolist()
    n_steps = 8 + seed % 9
    if seed == 0:
        n_steps = 64
    cache, logits = prefill(ckpt, prompt)
    tokens = list(prompt)
    for _ in range(n_steps):
        np.testing.assert_allclose(logits, model_forward(ckpt, tokens)[-1], atol=1e-5)
        token = int(np.argmax(logits))
        tokens.append(token)
        logits, cache = decode_step(ckpt, cache, token)
    np.testing.assert_allclose(logits, model_forward(ckpt, tokens)[-1], atol=1e-5)


def test_greedy_generation_matches_recompute_oracle():
    ckpt = make_checkpoint(seed=0, H=4, G=2, hd=4, layers=2, vocab=16)
    prompt = [1, 2, 3]
    assert generate(ckpt, prompt, 16).tokens == recompute_generate(ckpt, prompt, 16)
    assert generate(ckpt, prompt, 32).tokens == recompute_generate(ckpt, prompt, 32)


def test_generate_zero_steps():
    ckpt = make_checkpoint(seed=0)
    trace = generate(ckpt, [1, 2, 3], 0)
    assert trace.tokens == []
    assert trace.step_cache_bytes == []
    assert trace.prefill_cache_bytes > 0
    assert trace.time_per_token is None


def test_generate_is_deterministic_and_bytes_increase():
    ckpt = make_checkpoint(seed=1, layers=2)
    metrics = MetricsCollector(run_id="test")
    first = generate(ckpt, [0, 1], 10, metrics=metrics)
    second = generate(ckpt, [0, 1], 10, metrics=metrics)
    assert first.to_dict(include_timing=False) == second.to_dict(include_timing=False)
    sizes = [first.prefill_cache_bytes] + first.step_cache_bytes
    assert all(b > a for a, b in zip(sizes, sizes[1:]))
    assert len(first.step_times) == 10
    assert metrics.get_statistics()['runs'] == 2


def test_generate_rejects_sampling_and_overflow():
    ckpt = make_checkpoint(seed=0)
    with pytest.raises(ValueError):
        generate(ckpt, [1], 2, greedy=False)
    with pytest.raises(CapacityError):
        generate(ckpt, [1, 2], 5, capacity=6)
