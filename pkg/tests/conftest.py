import numpy as np
import pytest

from config import Config
from models.attention import AttentionConfig, Checkpoint
from models.tensor import Rng


@pytest.fixture(autouse=True)
def default_precision(monkeypatch):
    monkeypatch.setattr(Config, "PRECISION", "f32")


def make_config(H=4, G=2, hd=2, layers=1, vocab=8, precision="f32", causal=True):
    return AttentionConfig(d_model=H * hd, n_heads=H, n_kv_groups=G, head_dim=hd,
                           n_layers=layers, vocab=vocab, causal=causal, precision=precision)


def make_checkpoint(seed=0, **kwargs):
    config = make_config(**kwargs)
    return Checkpoint.initialize(config, Rng(seed))


@pytest.fixture
def tiny_config():
    return make_config()


@pytest.fixture
def tiny_checkpoint():
    return make_checkpoint(seed=0, H=4, G=2, hd=2, layers=2, vocab=8)


@pytest.fixture
def tiny_checkpoint_f64():
    return make_checkpoint(seed=0, H=4, G=2, hd=2, layers=2, vocab=8, precision="f64")


def oracle_model_forward(ckpt, tokens):
    """64-bit loop implementation: every head gets an explicit copy of its group's K/V."""
    c = ckpt.config
    r = c.n_heads // c.n_kv_groups
    h = ckpt.embedding.astype(np.float64)[np.asarray(tokens)]
    T = h.shape[0]
    for layer in ckpt.layers:
        wq, wk, wv, wo = (np.asarray(w, dtype=np.float64) for w in (layer.wq, layer.wk, layer.wv, layer.wo))
        heads = np.zeros((T, c.n_heads * c.head_dim))
        for head in range(c.n_heads):
            g = head // r
            q = h @ wq[:, head * c.head_dim:(head + 1) * c.head_dim]
            k = h @ wk[:, g * c.head_dim:(g + 1) * c.head_dim]
            v = h @ wv[:, g * c.head_dim:(g + 1) * c.head_dim]
            for i in range(T):
                limit = i + 1 if c.causal else T
                scores = np.array([q[i] @ k[j] for j in range(limit)]) / np.sqrt(c.head_dim)
                w = np.exp(scores - scores.max())
                w /= w.sum()
                heads[i, head * c.head_dim:(head + 1) * c.head_dim] = sum(w[j] * v[j] for j in range(limit))
        h = h + heads @ wo
    return h @ ckpt.unembedding.astype(np.float64)
