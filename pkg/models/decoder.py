"""
Autoregressive decoding with an explicit per-layer, per-group KV cache.
"""

import logging
import numpy as np
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from config import Config
from metrics import MetricsCollector
from models.attention import (
    AttentionConfig, Checkpoint, attend, check_tokens, merge_heads, split_heads
)
from models.tensor import Tensor, ensure_finite, matmul


class CapacityError(RuntimeError):
    """Raised when a write would pass the cache capacity."""


class KVCache:
    """
    Pre-allocated post-projection key/value store with a fill pointer.

    Each layer holds K and V buffers of width G*head_dim; positions [0, length)
    are valid.
    """

    def __init__(self, config: AttentionConfig, capacity: int = None):
        """
        Initialize an empty cache.

        Args:
            config (AttentionConfig): Model shape (G, head_dim, layers, precision)
            capacity (int): Maximum positions, defaults to Config.DEFAULT_CAPACITY
        """
        self.config = config
        self.capacity = Config.DEFAULT_CAPACITY if capacity is None else capacity
        if self.capacity < 1:
            raise CapacityError(f"capacity must be positive, got {self.capacity}")
        shape = (self.capacity, config.kv_width)
        self.keys = [np.zeros(shape, dtype=config.dtype) for _ in range(config.n_layers)]
        self.values = [np.zeros(shape, dtype=config.dtype) for _ in range(config.n_layers)]
        self.length = 0

    @property
    def precision(self) -> str:
        return self.config.precision

    def bytes(self) -> int:
        """Bytes held by filled positions: 2 * layers * T_cur * G * head_dim * element size."""
        c = self.config
        return 2 * c.n_layers * self.length * c.n_kv_groups * c.head_dim * c.bytes_per_element

    def capacity_bytes(self) -> int:
        """Bytes reserved by the pre-allocated buffers."""
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values))

    def write(self, layer: int, k_rows: Tensor, v_rows: Tensor):
        """Write rows for `layer` starting at the fill pointer (pointer not advanced)."""
        n = k_rows.shape[0]
        if self.length + n > self.capacity:
            raise CapacityError(f"cache capacity {self.capacity} exceeded ({self.length} + {n})")
        self.keys[layer][self.length:self.length + n] = k_rows
        self.values[layer][self.length:self.length + n] = v_rows

    def advance(self, n: int):
        if self.length + n > self.capacity:
            raise CapacityError(f"cache capacity {self.capacity} exceeded ({self.length} + {n})")
        self.length += n

    def view(self, layer: int, n: int) -> Tuple[Tensor, Tensor]:
        """First `n` cached rows of `layer`."""
        return self.keys[layer][:n], self.values[layer][:n]


@dataclass
class DecodeTrace:
    """Tokens, per-step cache bytes and timings of one generation."""
    prompt: List[int]
    tokens: List[int] = field(default_factory=list)
    step_cache_bytes: List[int] = field(default_factory=list)
    step_times: List[float] = field(default_factory=list)
    prefill_time: float = 0.0
    total_time: float = 0.0
    prefill_cache_bytes: int = 0

    @property
    def time_per_token(self) -> Optional[float]:
        if not self.tokens:
            return None
        return sum(self.step_times) / len(self.tokens)

    def to_dict(self, include_timing: bool = True) -> dict:
        data = {
            'prompt': list(self.prompt),
            'tokens': list(self.tokens),
            'prefill_cache_bytes': self.prefill_cache_bytes,
            'step_cache_bytes': list(self.step_cache_bytes)
        }
        if include_timing:
            data.update({
                'step_times': list(self.step_times),
                'prefill_time': self.prefill_time,
                'total_time': self.total_time,
                'time_per_token': self.time_per_token
            })
        return data


def _run_layers(ckpt: Checkpoint, cache: KVCache, ids: np.ndarray) -> Tensor:
    """Push `ids` (positions cache.length ..) through every layer, filling the cache."""
    config = ckpt.config
    start = cache.length
    n = len(ids)
    h = ckpt.embedding[ids]
    for i, layer in enumerate(ckpt.layers):
        q = split_heads(matmul(h, layer.wq), config.n_heads, config.head_dim)
        cache.write(i, matmul(h, layer.wk), matmul(h, layer.wv))
        k_all, v_all = cache.view(i, start + n)
        k = split_heads(k_all, config.n_kv_groups, config.head_dim)
        v = split_heads(v_all, config.n_kv_groups, config.head_dim)
        out, _ = attend(config, q, k, v, offset=start)
        h = h + matmul(merge_heads(out), layer.wo)
    cache.advance(n)
    return ensure_finite(matmul(h[-1:], ckpt.unembedding)[0], "logits")


def prefill(ckpt: Checkpoint, prompt: Sequence[int], capacity: int = None) -> Tuple[KVCache, Tensor]:
    """
    Fill a fresh cache with the whole prompt.

    Args:
        ckpt (Checkpoint): Model weights
        prompt (list): Non-empty prompt token ids
        capacity (int): Cache capacity

    Returns:
        tuple: (KVCache, logits at the last prompt position)

    Raises:
        CapacityError: If the prompt is longer than the capacity
    """
    ids = check_tokens(prompt, ckpt.config.vocab)
    capacity = Config.DEFAULT_CAPACITY if capacity is None else capacity
    if len(ids) > capacity:
        raise CapacityError(f"prompt of {len(ids)} tokens exceeds cache capacity {capacity}")
    cache = KVCache(ckpt.config, capacity)
    logits = _run_layers(ckpt, cache, ids)
    logging.debug(f"Prefilled {len(ids)} positions, cache bytes={cache.bytes()}")
    return cache, logits


def decode_step(ckpt: Checkpoint, cache: KVCache, token: int) -> Tuple[Tensor, KVCache]:
    """
    Append one token: one K/V row per layer, logits at the new position.

    Args:
        ckpt (Checkpoint): Model weights
        cache (KVCache): Cache to extend in place
        token (int): Token id at position cache.length

    Returns:
        tuple: (logits [vocab], the updated cache)

    Raises:
        CapacityError: If the cache is full (cache left unchanged)
    """
    if cache.length >= cache.capacity:
        raise CapacityError(f"cache full at capacity {cache.capacity}")
    ids = check_tokens([token], ckpt.config.vocab)
    logits = _run_layers(ckpt, cache, ids)
    return logits, cache


def generate(ckpt: Checkpoint, prompt: Sequence[int], n_steps: int, greedy: bool = True,
             capacity: int = None, metrics: MetricsCollector = None) -> DecodeTrace:
    """
    Greedy generation with per-step cache bytes and wall time.

    Every generated token is fed back through decode_step, so the cache ends at
    len(prompt) + n_steps positions.

    Args:
        ckpt (Checkpoint): Model weights
        prompt (list): Prompt token ids
        n_steps (int): Tokens to generate
        greedy (bool): Must be True; sampling is not supported
        capacity (int): Cache capacity
        metrics (MetricsCollector): Optional collector; a private one is used otherwise

    Returns:
        DecodeTrace: Generated tokens with accounting
    """
    if not greedy:
        raise ValueError("only greedy decoding is supported")
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    capacity = Config.DEFAULT_CAPACITY if capacity is None else capacity
    if len(prompt) + n_steps > capacity:
        raise CapacityError(f"prompt ({len(prompt)}) + steps ({n_steps}) exceeds capacity {capacity}")

    metrics = metrics or MetricsCollector()
    metrics.start_run("generate")
    trace = DecodeTrace(prompt=[int(t) for t in prompt])

    cache, logits = prefill(ckpt, prompt, capacity)
    metrics.mark_setup_done()
    trace.prefill_cache_bytes = cache.bytes()

    for _ in range(n_steps):
        metrics.start_step()
        token = int(np.argmax(logits))
        logits, cache = decode_step(ckpt, cache, token)
        metrics.end_step(cache_bytes=cache.bytes())
        trace.tokens.append(token)

    run = metrics.end_run()
    trace.step_cache_bytes = [s.cache_bytes for s in run.step_timings]
    trace.step_times = run.step_times
    trace.prefill_time = run.setup_time
    trace.total_time = run.total_time
    return trace
