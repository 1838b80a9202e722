"""
Grouped-query attention for a minimal decoder-only stack.
One group-count parameter G covers multi-head (G = H) and multi-query (G = 1) attention.
"""

import logging
import math
import numpy as np
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional, Sequence, Tuple

from config import Config
from models.tensor import (
    Rng, Tensor, DimensionError, dtype_for, ensure_finite, matmul, softmax_rows, zeros
)


class ConfigError(ValueError):
    """Raised when a model shape violates the attention invariants."""


class HeadIndexError(IndexError):
    """Raised for a query-head index outside [0, H)."""


@dataclass(frozen=True)
class AttentionConfig:
    """Model shape: d_model, query heads H, key/value groups G, head dim, layers, vocab."""
    d_model: int
    n_heads: int
    n_kv_groups: int
    head_dim: int
    n_layers: int
    vocab: int
    causal: bool = True
    precision: str = field(default_factory=lambda: Config.PRECISION)

    def __post_init__(self):
        for name in ('d_model', 'n_heads', 'n_kv_groups', 'head_dim', 'n_layers', 'vocab'):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.n_kv_groups > self.n_heads:
            raise ConfigError(f"G={self.n_kv_groups} exceeds H={self.n_heads}")
        if self.n_heads % self.n_kv_groups != 0:
            raise ConfigError(f"H mod G != 0 (H={self.n_heads}, G={self.n_kv_groups})")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model must equal H*head_dim ({self.d_model} != {self.n_heads}*{self.head_dim})"
            )
        dtype_for(self.precision)

    @property
    def group_size(self) -> int:
        """Query heads per key/value group."""
        return self.n_heads // self.n_kv_groups

    @property
    def q_width(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.n_kv_groups * self.head_dim

    @property
    def dtype(self):
        return dtype_for(self.precision)

    @property
    def bytes_per_element(self) -> int:
        return Config.bytes_per_element(self.precision)

    def with_groups(self, n_kv_groups: int) -> "AttentionConfig":
        return replace(self, n_kv_groups=n_kv_groups)

    def to_dict(self) -> dict:
        return {
            'd_model': self.d_model,
            'n_heads': self.n_heads,
            'n_kv_groups': self.n_kv_groups,
            'head_dim': self.head_dim,
            'n_layers': self.n_layers,
            'vocab': self.vocab,
            'causal': self.causal,
            'precision': self.precision
        }


@dataclass
class LayerWeights:
    """Projection matrices of one attention layer; K/V are G*head_dim wide."""
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    NAMES = ('wq', 'wk', 'wv', 'wo')

    def expected_shapes(self, config: AttentionConfig) -> dict:
        return {
            'wq': (config.d_model, config.q_width),
            'wk': (config.d_model, config.kv_width),
            'wv': (config.d_model, config.kv_width),
            'wo': (config.q_width, config.d_model)
        }

    def validate(self, config: AttentionConfig, layer: int = 0):
        for name, shape in self.expected_shapes(config).items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise DimensionError(f"layer {layer} {name} has shape {actual}, expected {shape}")


@dataclass
class Checkpoint:
    """Every weight of the decoder stack plus its config."""
    config: AttentionConfig
    embedding: Tensor
    layers: List[LayerWeights]
    unembedding: Tensor

    def validate(self) -> "Checkpoint":
        """Check every shape and dtype against the config."""
        c = self.config
        if self.embedding.shape != (c.vocab, c.d_model):
            raise DimensionError(f"embedding has shape {self.embedding.shape}, expected {(c.vocab, c.d_model)}")
        if self.unembedding.shape != (c.d_model, c.vocab):
            raise DimensionError(f"unembedding has shape {self.unembedding.shape}, expected {(c.d_model, c.vocab)}")
        if len(self.layers) != c.n_layers:
            raise DimensionError(f"checkpoint has {len(self.layers)} layers, config says {c.n_layers}")
        for i, layer in enumerate(self.layers):
            layer.validate(c, i)
        for name, array in self.named_arrays():
            if array.dtype != c.dtype:
                raise DimensionError(f"{name} has dtype {array.dtype}, config precision is {c.precision}")
        return self

    def named_arrays(self) -> Iterator[Tuple[str, Tensor]]:
        """All arrays in container order: embedding; per layer Wq, Wk, Wv, Wo; unembedding."""
        yield 'embedding', self.embedding
        for i, layer in enumerate(self.layers):
            for name in LayerWeights.NAMES:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield 'unembedding', self.unembedding

    def map_arrays(self, fn, config: Optional[AttentionConfig] = None) -> "Checkpoint":
        """New checkpoint with `fn` applied to every array."""
        return Checkpoint(
            config=config or self.config,
            embedding=fn(self.embedding),
            layers=[LayerWeights(*(fn(getattr(layer, n)) for n in LayerWeights.NAMES)) for layer in self.layers],
            unembedding=fn(self.unembedding)
        )

    def copy(self) -> "Checkpoint":
        return self.map_arrays(np.copy)

    def zeros_like(self) -> "Checkpoint":
        return self.map_arrays(np.zeros_like)

    def astype(self, precision: str) -> "Checkpoint":
        dtype = dtype_for(precision)
        return self.map_arrays(lambda a: a.astype(dtype), replace(self.config, precision=precision))

    def parameter_count(self) -> int:
        return sum(a.size for _, a in self.named_arrays())

    @classmethod
    def initialize(cls, config: AttentionConfig, rng: Rng) -> "Checkpoint":
        """
        Random initialization, every matrix normal with std 1/sqrt(fan_in).

        Args:
            config (AttentionConfig): Model shape
            rng (Rng): Generator consumed in container order

        Returns:
            Checkpoint: Fresh weights
        """
        d, p = config.d_model, config.precision
        std = 1.0 / math.sqrt(d)
        embedding = rng.normal((config.vocab, d), std, p)
        layers = []
        for _ in range(config.n_layers):
            layers.append(LayerWeights(
                wq=rng.normal((d, config.q_width), std, p),
                wk=rng.normal((d, config.kv_width), std, p),
                wv=rng.normal((d, config.kv_width), std, p),
                wo=rng.normal((config.q_width, d), 1.0 / math.sqrt(config.q_width), p)
            ))
        unembedding = rng.normal((d, config.vocab), std, p)
        logging.info(f"Initialized checkpoint H={config.n_heads} G={config.n_kv_groups} "
                     f"layers={config.n_layers} vocab={config.vocab} precision={p}")
        return cls(config, embedding, layers, unembedding)


@dataclass
class AttentionActivations:
    """Intermediates of one attention layer kept for the backward pass."""
    x: Tensor        # [..., T, d_model]
    q: Tensor        # [..., H, T, hd]
    k: Tensor        # [..., G, T, hd]
    v: Tensor        # [..., G, T, hd]
    probs: Tensor    # [..., H, T, T]
    heads: Tensor    # [..., T, H*hd], concatenated head outputs before Wo


def group_of_head(h: int, config: AttentionConfig) -> int:
    """
    Group index of query head `h`; contiguous blocks of H/G heads share a group.

    Raises:
        HeadIndexError: If h is outside [0, H)
    """
    if not 0 <= h < config.n_heads:
        raise HeadIndexError(f"head index {h} out of range for H={config.n_heads}")
    return h // config.group_size


def group_heads(a: Tensor, config: AttentionConfig) -> Tensor:
    """[..., H, T, x] -> [..., G, H/G, T, x]; head h lands at (group_of_head(h), h mod H/G)."""
    return a.reshape(a.shape[:-3] + (config.n_kv_groups, config.group_size) + a.shape[-2:])


def ungroup_heads(a: Tensor) -> Tensor:
    """[..., G, r, T, x] -> [..., G*r, T, x]"""
    return a.reshape(a.shape[:-4] + (a.shape[-4] * a.shape[-3],) + a.shape[-2:])


def split_heads(a: Tensor, n: int, head_dim: int) -> Tensor:
    """[..., T, n*hd] -> [..., n, T, hd]"""
    shape = a.shape[:-1] + (n, head_dim)
    return np.swapaxes(a.reshape(shape), -2, -3)


def merge_heads(a: Tensor) -> Tensor:
    """[..., n, T, hd] -> [..., T, n*hd]"""
    a = np.swapaxes(a, -2, -3)
    return a.reshape(a.shape[:-2] + (a.shape[-2] * a.shape[-1],))


def causal_mask(n_queries: int, n_keys: int, offset: int = 0) -> np.ndarray:
    """Boolean [n_queries, n_keys]; query i sits at absolute position offset + i."""
    q_pos = np.arange(n_queries)[:, None] + offset
    k_pos = np.arange(n_keys)[None, :]
    return k_pos <= q_pos


def attend(config: AttentionConfig, q: Tensor, k: Tensor, v: Tensor, offset: int = 0) -> Tuple[Tensor, Tensor]:
    """
    Scaled dot-product attention core shared by full forward and cached decoding.

    Queries are viewed as [..., G, H/G, Tq, hd] so each group's key/value head
    broadcasts over its member query heads.

    Args:
        config (AttentionConfig): Model shape
        q (Tensor): Queries [..., H, Tq, hd]
        k (Tensor): Keys [..., G, Tk, hd]
        v (Tensor): Values [..., G, Tk, hd]
        offset (int): Absolute position of the first query, for the causal mask

    Returns:
        tuple: (head outputs [..., H, Tq, hd], probabilities [..., H, Tq, Tk])
    """
    q_grouped = group_heads(q, config)
    scale = q.dtype.type(1.0 / math.sqrt(config.head_dim))
    scores = matmul(q_grouped, np.swapaxes(k[..., None, :, :], -1, -2)) * scale
    mask = causal_mask(q.shape[-2], k.shape[-2], offset) if config.causal else None
    probs = softmax_rows(scores, mask)
    out = matmul(probs, v[..., None, :, :])
    return ungroup_heads(out), ungroup_heads(probs)


def attention_forward_with_activations(config: AttentionConfig, weights: LayerWeights,
                                       x: Tensor) -> Tuple[Tensor, AttentionActivations]:
    """attention_forward that also returns the intermediates."""
    if x.shape[-1] != config.d_model or x.shape[-2] < 1:
        raise DimensionError(f"attention input has shape {x.shape}, expected [..., T>=1, {config.d_model}]")
    q = split_heads(matmul(x, weights.wq), config.n_heads, config.head_dim)
    k = split_heads(matmul(x, weights.wk), config.n_kv_groups, config.head_dim)
    v = split_heads(matmul(x, weights.wv), config.n_kv_groups, config.head_dim)
    out, probs = attend(config, q, k, v)
    heads = merge_heads(out)
    y = ensure_finite(matmul(heads, weights.wo), "attention output")
    return y, AttentionActivations(x=x, q=q, k=k, v=v, probs=probs, heads=heads)


def attention_forward(config: AttentionConfig, weights: LayerWeights, x: Tensor) -> Tensor:
    """
    Grouped-query self-attention over a sequence.

    Args:
        config (AttentionConfig): Model shape
        weights (LayerWeights): Layer projections
        x (Tensor): Input [T, d_model] (leading batch axes allowed)

    Returns:
        Tensor: Output [T, d_model]
    """
    y, _ = attention_forward_with_activations(config, weights, x)
    return y


def check_tokens(tokens: Sequence[int], vocab: int) -> np.ndarray:
    """Validate token ids and return them as an int array."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("token sequence is empty")
    if ids.min() < 0 or ids.max() >= vocab:
        raise ValueError(f"token id out of range for vocab={vocab}")
    return ids


def model_forward(ckpt: Checkpoint, tokens: Sequence[int]) -> Tensor:
    """
    Logits for every position: embed, n_layers of attention with residual, unembed.

    Args:
        ckpt (Checkpoint): Model weights
        tokens (list): Token ids (a [B, T] array is accepted as a batch)

    Returns:
        Tensor: Logits [T, vocab] ([B, T, vocab] for a batch)
    """
    config = ckpt.config
    ids = check_tokens(tokens, config.vocab)
    h = ckpt.embedding[ids]
    for layer in ckpt.layers:
        h = h + attention_forward(config, layer, h)
    return ensure_finite(matmul(h, ckpt.unembedding), "logits")
