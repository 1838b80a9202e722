"""
Checkpoint conversion from G_src key/value groups down to G_tgt groups.
Mean-pooling, first-head selection, or fresh random key/value heads.
"""

import logging
import math
import numpy as np
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

from config import Config
from database.checkpoint_store import CheckpointStore
from models.attention import AttentionConfig, Checkpoint, LayerWeights, model_forward
from models.tensor import Rng, Tensor, derive_seed, mean_over


class ConversionError(ValueError):
    """Raised for an invalid source/target group combination."""


class ConversionKind(str, Enum):
    MEAN = "mean"
    FIRST = "first"
    RANDOM = "random"


@dataclass(frozen=True)
class ConversionMethod:
    """MeanPool, FirstHead or RandomInit(seed)."""
    kind: ConversionKind
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind == ConversionKind.RANDOM and self.seed is None:
            raise ConversionError("RandomInit needs an explicit seed")

    @classmethod
    def mean_pool(cls) -> "ConversionMethod":
        return cls(ConversionKind.MEAN)

    @classmethod
    def first_head(cls) -> "ConversionMethod":
        return cls(ConversionKind.FIRST)

    @classmethod
    def random_init(cls, seed: int) -> "ConversionMethod":
        return cls(ConversionKind.RANDOM, seed)

    @classmethod
    def parse(cls, name: str, seed: Optional[int] = None) -> "ConversionMethod":
        try:
            kind = ConversionKind(name.lower())
        except ValueError:
            logging.error(f"Unknown conversion method '{name}'")
            raise ConversionError(f"unknown conversion method '{name}', expected mean, first or random") from None
        return cls(kind, seed if kind == ConversionKind.RANDOM else None)

    @property
    def label(self) -> str:
        if self.kind == ConversionKind.RANDOM:
            return f"random(seed={self.seed})"
        return self.kind.value


@dataclass
class ConversionReport:
    """What a conversion did to the weights and to the model outputs."""
    source_groups: int
    target_groups: int
    method: str
    layer_max_abs_delta: List[float] = field(default_factory=list)
    drift: float = 0.0

    def to_dict(self) -> dict:
        return {
            'source_groups': self.source_groups,
            'target_groups': self.target_groups,
            'method': self.method,
            'layer_max_abs_delta': list(self.layer_max_abs_delta),
            'drift': self.drift
        }


def _group_blocks(w: Tensor, n_groups: int, head_dim: int) -> Tensor:
    """[d, G*hd] -> [G, d, hd]"""
    return np.transpose(w.reshape(w.shape[0], n_groups, head_dim), (1, 0, 2))


def _join_blocks(blocks: List[Tensor]) -> Tensor:
    """list of [d, hd] -> [d, G*hd]"""
    return np.concatenate(blocks, axis=1)


def _pool_projection(w: Tensor, config: AttentionConfig, target_groups: int,
                     method: ConversionMethod, rng: Optional[Rng]) -> Tensor:
    ratio = config.n_kv_groups // target_groups
    if method.kind == ConversionKind.RANDOM:
        std = 1.0 / math.sqrt(config.d_model)
        return rng.normal((config.d_model, target_groups * config.head_dim), std, config.precision)

    blocks = _group_blocks(w, config.n_kv_groups, config.head_dim)
    pooled = []
    for g in range(target_groups):
        members = [blocks[g * ratio + j] for j in range(ratio)]
        if method.kind == ConversionKind.MEAN:
            pooled.append(mean_over(members))
        else:
            pooled.append(members[0].copy())
    return _join_blocks(pooled)


def drift_batch(vocab: int, seed: int = None) -> np.ndarray:
    """Seeded token batch for logit drift [DRIFT_BATCH, DRIFT_SEQ_LEN]."""
    rng = Rng(Config.DRIFT_SEED if seed is None else seed)
    return rng.integers(vocab, (Config.DRIFT_BATCH, Config.DRIFT_SEQ_LEN))


class ConversionService:
    """
    Converts checkpoints to fewer key/value groups and reports what changed.
    """

    def __init__(self, store: CheckpointStore = None):
        """
        Initialize the conversion service.

        Args:
            store (CheckpointStore): Store used by convert_file
        """
        self.store = store or CheckpointStore()

    @staticmethod
    def _check_groups(config: AttentionConfig, target_groups: int):
        source_groups = config.n_kv_groups
        problem = None
        if target_groups < 1:
            problem = f"target groups must be positive, got {target_groups}"
        elif config.n_heads % target_groups != 0:
            problem = f"H mod G != 0 (H={config.n_heads}, G={target_groups})"
        elif target_groups > source_groups:
            problem = f"cannot up-group: G_tgt={target_groups} > G_src={source_groups}"
        elif source_groups % target_groups != 0:
            problem = f"G_tgt={target_groups} does not divide G_src={source_groups}"
        if problem:
            logging.error(f"Conversion rejected: {problem}")
            raise ConversionError(problem)

    def convert(self, ckpt: Checkpoint, target_groups: int, method: ConversionMethod) -> Checkpoint:
        """
        Rebuild K/V projections for `target_groups` groups; everything else is copied.

        Args:
            ckpt (Checkpoint): Source checkpoint with G_src groups
            target_groups (int): G_tgt, must divide G_src
            method (ConversionMethod): MeanPool, FirstHead or RandomInit(seed)

        Returns:
            Checkpoint: Converted checkpoint

        Raises:
            ConversionError: If G_tgt is not positive, does not divide H, exceeds G_src
                or does not divide G_src
        """
        config = ckpt.config
        self._check_groups(config, target_groups)

        layers = []
        for i, layer in enumerate(ckpt.layers):
            rng_k = rng_v = None
            if method.kind == ConversionKind.RANDOM:
                rng_k = Rng(derive_seed(method.seed, i, 0))
                rng_v = Rng(derive_seed(method.seed, i, 1))
            layers.append(LayerWeights(
                wq=layer.wq.copy(),
                wk=_pool_projection(layer.wk, config, target_groups, method, rng_k),
                wv=_pool_projection(layer.wv, config, target_groups, method, rng_v),
                wo=layer.wo.copy()
            ))

        converted = Checkpoint(
            config=config.with_groups(target_groups),
            embedding=ckpt.embedding.copy(),
            layers=layers,
            unembedding=ckpt.unembedding.copy()
        ).validate()
        logging.info(f"Converted checkpoint G={config.n_kv_groups} -> G={target_groups} using {method.label}")
        return converted

    def report(self, source: Checkpoint, converted: Checkpoint, method: ConversionMethod,
               tokens: np.ndarray = None) -> ConversionReport:
        """
        Compare a converted checkpoint with its source.

        Per layer, the delta is the largest |target group block - source head block| over
        the source heads of each target group, for both K and V.

        Args:
            source (Checkpoint): Checkpoint before conversion
            converted (Checkpoint): Checkpoint after conversion
            method (ConversionMethod): Method used
            tokens (np.ndarray): Optional drift tokens [B, T]

        Returns:
            ConversionReport: Weight deltas and mean absolute logit drift
        """
        src_cfg, tgt_cfg = source.config, converted.config
        ratio = src_cfg.n_kv_groups // tgt_cfg.n_kv_groups
        deltas = []
        for src_layer, tgt_layer in zip(source.layers, converted.layers):
            worst = 0.0
            for name in ('wk', 'wv'):
                src_blocks = _group_blocks(getattr(src_layer, name), src_cfg.n_kv_groups, src_cfg.head_dim)
                tgt_blocks = _group_blocks(getattr(tgt_layer, name), tgt_cfg.n_kv_groups, tgt_cfg.head_dim)
                for s in range(src_cfg.n_kv_groups):
                    diff = np.abs(tgt_blocks[s // ratio].astype(np.float64) - src_blocks[s].astype(np.float64))
                    worst = max(worst, float(np.max(diff)))
            deltas.append(worst)

        tokens = drift_batch(src_cfg.vocab) if tokens is None else tokens
        before = model_forward(source, tokens).astype(np.float64)
        after = model_forward(converted, tokens).astype(np.float64)
        drift = float(np.mean(np.abs(after - before)))

        report = ConversionReport(
            source_groups=src_cfg.n_kv_groups,
            target_groups=tgt_cfg.n_kv_groups,
            method=method.label,
            layer_max_abs_delta=deltas,
            drift=drift
        )
        logging.info(f"METRICS: Conversion drift={drift:.6g}, max weight delta={max(deltas, default=0.0):.6g}")
        return report

    def convert_file(self, path: str, target_groups: int,
                     method: ConversionMethod) -> Tuple[Checkpoint, Checkpoint, ConversionReport]:
        """
        Load a checkpoint file and convert it.

        Returns:
            tuple: (source, converted, report)
        """
        source = self.store.load(path)
        converted = self.convert(source, target_groups, method)
        return source, converted, self.report(source, converted, method)


def convert_checkpoint(ckpt: Checkpoint, target_groups: int, method: ConversionMethod) -> Checkpoint:
    """ConversionService.convert without a store."""
    return ConversionService().convert(ckpt, target_groups, method)


def build_conversion_report(source: Checkpoint, converted: Checkpoint, method: ConversionMethod,
                            tokens: np.ndarray = None) -> ConversionReport:
    """ConversionService.report without a store."""
    return ConversionService().report(source, converted, method, tokens)
