"""
Toy-scale pre-training and uptraining.

Hand-written reverse-mode gradients for the embed / attention+residual / unembed
stack, mean next-token cross-entropy on synthetic sequences, plain SGD, and the
conversion + uptraining experiments with multi-seed median aggregation.
"""

import logging
import math
import numpy as np
import pandas as pd
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from config import Config
from metrics import MetricsCollector
from models.attention import (
    AttentionActivations, AttentionConfig, Checkpoint, LayerWeights,
    attention_forward_with_activations, check_tokens, group_heads, merge_heads, split_heads, ungroup_heads
)
from models.tensor import NonFiniteError, Rng, Tensor, derive_seed, matmul, softmax_rows
from services.convert_service import ConversionKind, ConversionMethod, ConversionService


# Seed tags for per-base uptraining runs
RANDOM_INIT_TAG = 97
UPTRAIN_STREAM_TAG = 98


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""

    def __init__(self, message: str, step: int = None, trajectory: List[float] = None):
        super().__init__(message)
        self.step = step
        self.trajectory = list(trajectory or [])


class TaskKind(str, Enum):
    TOPIC = "topic"
    MARKOV = "markov"
    COPY = "copy"


def _log_sum_exp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _row_entropy(p: np.ndarray) -> np.ndarray:
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Token ids for uniform draws `u` [..., n] against rows `probs` [..., V]."""
    cdf = np.cumsum(probs, axis=-1)
    scaled = u[..., None] * cdf[..., None, -1:]
    ids = np.sum(cdf[..., None, :] <= scaled, axis=-1)
    return np.minimum(ids, probs.shape[-1] - 1)


@dataclass
class SyntheticTask:
    """
    Seeded synthetic token streams.

    topic:  each sequence draws one of `topics` seeded unigram distributions and
            samples every token from it; the prefix so far identifies the topic
    markov: order-2 chain, x_t ~ P(. | x_{t-2}, x_{t-1}); the transition logits are a
            strong first-order part plus a weaker second-order part
    copy:   `offset` uniform tokens, then x_t = x_{t-offset}
    """
    kind: TaskKind
    seed: int
    vocab: int
    seq_len: int
    offset: int = Config.COPY_OFFSET
    sharpness: Optional[float] = None
    topics: int = Config.TOPIC_COUNT
    table: Optional[np.ndarray] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        if self.vocab < 2:
            raise ValueError(f"vocab must be >= 2, got {self.vocab}")
        if self.seq_len < 3:
            raise ValueError(f"seq_len must be >= 3, got {self.seq_len}")
        if self.kind == TaskKind.COPY and not 1 <= self.offset < self.seq_len:
            raise ValueError(f"copy offset must be in [1, seq_len), got {self.offset}")
        if self.kind == TaskKind.TOPIC and self.topics < 1:
            raise ValueError(f"topic count must be >= 1, got {self.topics}")
        if self.sharpness is None:
            self.sharpness = Config.TOPIC_SHARPNESS if self.kind == TaskKind.TOPIC else Config.MARKOV_SHARPNESS

        rng = Rng(derive_seed(self.seed, 0))
        v = self.vocab
        if self.kind == TaskKind.TOPIC:
            self.table = softmax_rows(rng.normal((self.topics, v), self.sharpness, 'f64'))
        elif self.kind == TaskKind.MARKOV:
            first = rng.normal((v, v), 1.0, 'f64')
            second = rng.normal((v, v, v), 1.0, 'f64')
            logits = self.sharpness * (first[None, :, :] + Config.MARKOV_ORDER2_WEIGHT * second)
            self.table = softmax_rows(logits.reshape(v * v, v)).reshape(v, v, v)

    @property
    def transitions(self) -> np.ndarray:
        """Markov transition table [V, V, V]."""
        if self.kind != TaskKind.MARKOV:
            raise AttributeError(f"{self.kind.value} task has no transition table")
        return self.table

    def sample_batch(self, rng: Rng, batch: int) -> np.ndarray:
        """
        Draw `batch` sequences.

        Args:
            rng (Rng): Generator to consume
            batch (int): Number of sequences

        Returns:
            np.ndarray: Token ids [batch, seq_len]
        """
        if self.kind == TaskKind.COPY:
            head = rng.integers(self.vocab, (batch, self.offset))
            reps = -(-self.seq_len // self.offset)
            return np.tile(head, (1, reps))[:, :self.seq_len]

        if self.kind == TaskKind.TOPIC:
            z = rng.integers(self.topics, (batch,))
            return _inverse_cdf(self.table[z], rng.uniform((batch, self.seq_len))).astype(np.int64)

        out = np.empty((batch, self.seq_len), dtype=np.int64)
        out[:, :2] = rng.integers(self.vocab, (batch, 2))
        for t in range(2, self.seq_len):
            probs = self.table[out[:, t - 2], out[:, t - 1]]
            out[:, t] = _inverse_cdf(probs, rng.uniform((batch, 1)))[:, 0]
        return out

    def batch_stream(self, seed: int) -> Rng:
        """Generator for fresh training batches; each seed gives its own data order."""
        return Rng(derive_seed(self.seed, 1, seed))

    def monitor_batch(self, size: int = None) -> np.ndarray:
        """Fixed sequences the training loss trajectory is measured on."""
        return self.sample_batch(Rng(derive_seed(self.seed, 2)), size or Config.MONITOR_BATCH)

    def eval_batch(self, size: int = None) -> np.ndarray:
        """Held-out sequences from a fixed evaluation stream."""
        return self.sample_batch(Rng(derive_seed(Config.EVAL_SEED, self.seed)), size or Config.EVAL_BATCH)

    def entropy_floor(self) -> float:
        """
        Lowest achievable mean next-token loss (nats) over positions 1..seq_len-1.

        Markov: exact, propagating the pair distribution from the uniform start.
        Copy: only the first offset-1 predictions are uncertain.
        Topic: loss of the exact Bayes predictor (posterior over topics given the
        prefix), measured on the evaluation batch.
        """
        v, n = self.vocab, self.seq_len - 1
        if self.kind == TaskKind.COPY:
            return (self.offset - 1) * math.log(v) / n

        if self.kind == TaskKind.TOPIC:
            ids = self.eval_batch()
            token_logp = np.log(self.table).T[ids]  # [B, T, topics]
            prior = np.cumsum(token_logp, axis=1)[:, :-1] - math.log(self.topics)
            predictive = _log_sum_exp(prior + token_logp[:, 1:]) - _log_sum_exp(prior)
            return float(-np.mean(predictive))

        p = self.table
        row_entropy = _row_entropy(p)
        pair = np.full((v, v), 1.0 / (v * v))
        total = math.log(v)  # x_1 given x_0 is uniform
        for _ in range(2, self.seq_len):
            total += float(np.sum(pair * row_entropy))
            pair = np.einsum('ab,abc->bc', pair, p)
        return total / n

    def entropy_rate(self, iterations: int = 2000) -> float:
        """
        Per-token entropy once the context is fully known (nats).

        Markov: stationary entropy rate. Topic: mean entropy of the topic distributions.
        """
        if self.kind == TaskKind.COPY:
            return 0.0
        if self.kind == TaskKind.TOPIC:
            return float(np.mean(_row_entropy(self.table)))
        p = self.table
        row_entropy = _row_entropy(p)
        pair = np.full((self.vocab, self.vocab), 1.0 / self.vocab ** 2)
        for _ in range(iterations):
            pair = np.einsum('ab,abc->bc', pair, p)
        return float(np.sum(pair * row_entropy))

    def to_dict(self) -> dict:
        return {
            'kind': self.kind.value,
            'seed': self.seed,
            'vocab': self.vocab,
            'seq_len': self.seq_len,
            'offset': self.offset,
            'sharpness': self.sharpness,
            'topics': self.topics
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticTask":
        return cls(**data)


def _as_batch(ckpt: Checkpoint, batch) -> np.ndarray:
    if isinstance(batch, np.ndarray) and batch.ndim == 2:
        ids = batch.astype(np.int64)
    else:
        sequences = [list(s) for s in batch]
        if not sequences:
            raise ValueError("batch is empty")
        lengths = {len(s) for s in sequences}
        if len(lengths) != 1:
            raise ValueError(f"sequences in a batch must share one length, got {sorted(lengths)}")
        ids = np.asarray(sequences, dtype=np.int64)
    if ids.shape[0] == 0:
        raise ValueError("batch is empty")
    if ids.shape[1] < 2:
        raise ValueError("sequences need at least two tokens for next-token loss")
    check_tokens(ids.ravel(), ckpt.config.vocab)
    return ids


def _forward(ckpt: Checkpoint, ids: np.ndarray) -> Tuple[Tensor, Tensor, List[AttentionActivations]]:
    config = ckpt.config
    h = ckpt.embedding[ids]
    activations = []
    for layer in ckpt.layers:
        y, act = attention_forward_with_activations(config, layer, h)
        activations.append(act)
        h = h + y
    return matmul(h, ckpt.unembedding), h, activations


def _cross_entropy(logits: Tensor, ids: np.ndarray) -> Tuple[float, Tensor]:
    """Mean next-token loss (computed at 64-bit) and its gradient w.r.t. logits."""
    pred = logits[:, :-1].astype(np.float64)
    targets = ids[:, 1:]
    m = np.max(pred, axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.sum(np.exp(pred - m), axis=-1))
    picked = np.take_along_axis(pred, targets[..., None], axis=-1)[..., 0]
    count = targets.size
    loss = float(np.mean(lse - picked))

    probs = softmax_rows(logits[:, :-1])
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, targets[..., None], 1, axis=-1)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = (probs - onehot) / logits.dtype.type(count)
    return loss, dlogits


def _flat(a: Tensor) -> Tensor:
    return a.reshape(-1, a.shape[-1])


def _attention_backward(config: AttentionConfig, weights: LayerWeights, act: AttentionActivations,
                        dy: Tensor) -> Tuple[Tensor, LayerWeights]:
    """Gradients of one attention layer given the gradient of its output."""
    scale = dy.dtype.type(1.0 / math.sqrt(config.head_dim))
    k = act.k[..., None, :, :]
    v = act.v[..., None, :, :]
    q = group_heads(act.q, config)
    probs = group_heads(act.probs, config)

    d_wo = matmul(_flat(act.heads).T, _flat(dy))
    d_out = group_heads(split_heads(matmul(dy, weights.wo.T), config.n_heads, config.head_dim), config)

    d_probs = matmul(d_out, np.swapaxes(v, -1, -2))
    d_scores = probs * (d_probs - np.sum(d_probs * probs, axis=-1, keepdims=True)) * scale
    d_q = ungroup_heads(matmul(d_scores, k))
    # Heads of one group share its K/V: sum over the member axis
    d_k = matmul(np.swapaxes(d_scores, -1, -2), q).sum(axis=-3)
    d_v = matmul(np.swapaxes(probs, -1, -2), d_out).sum(axis=-3)

    d_q_flat, d_k_flat, d_v_flat = merge_heads(d_q), merge_heads(d_k), merge_heads(d_v)
    x_flat = _flat(act.x).T
    grads = LayerWeights(
        wq=matmul(x_flat, _flat(d_q_flat)),
        wk=matmul(x_flat, _flat(d_k_flat)),
        wv=matmul(x_flat, _flat(d_v_flat)),
        wo=d_wo
    )
    dx = (dy + matmul(d_q_flat, weights.wq.T) + matmul(d_k_flat, weights.wk.T)
          + matmul(d_v_flat, weights.wv.T))
    return dx, grads


def loss_and_grads(ckpt: Checkpoint, batch) -> Tuple[float, Checkpoint]:
    """
    Mean next-token cross-entropy and its gradient for every weight.

    Args:
        ckpt (Checkpoint): Model weights
        batch: Token sequences of one length (list of lists or [B, T] array)

    Returns:
        tuple: (scalar loss, gradient Checkpoint shaped like `ckpt`)

    Raises:
        TrainingError: If the loss or a gradient is not finite
    """
    ids = _as_batch(ckpt, batch)
    config = ckpt.config
    try:
        logits, h_final, activations = _forward(ckpt, ids)
        loss, d_logits = _cross_entropy(logits, ids)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss}")

        d_unembedding = matmul(_flat(h_final).T, _flat(d_logits))
        dh = matmul(d_logits, ckpt.unembedding.T)

        layer_grads: List[LayerWeights] = [None] * config.n_layers
        for i in reversed(range(config.n_layers)):
            dh, layer_grads[i] = _attention_backward(config, ckpt.layers[i], activations[i], dh)
    except NonFiniteError as e:
        raise TrainingError(str(e)) from e

    d_embedding = np.zeros_like(ckpt.embedding)
    np.add.at(d_embedding, ids, dh)

    grads = Checkpoint(config, d_embedding, layer_grads, d_unembedding)
    for name, g in grads.named_arrays():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    return loss, grads


def eval_loss(ckpt: Checkpoint, batch) -> float:
    """Mean next-token cross-entropy without gradients."""
    ids = _as_batch(ckpt, batch)
    logits, _, _ = _forward(ckpt, ids)
    loss, _ = _cross_entropy(logits, ids)
    return loss


def sgd_step(ckpt: Checkpoint, grads: Checkpoint, lr: float) -> Checkpoint:
    """
    Plain SGD update w <- w - lr * g.

    Args:
        ckpt (Checkpoint): Current weights
        grads (Checkpoint): Shape-congruent gradients
        lr (float): Learning rate

    Returns:
        Checkpoint: Updated weights (inputs untouched)
    """
    grad_arrays = dict(grads.named_arrays())
    for name, w in ckpt.named_arrays():
        if name not in grad_arrays or grad_arrays[name].shape != w.shape:
            raise ValueError(f"gradient for {name} is missing or has the wrong shape")
    if lr == 0:
        return ckpt.copy()
    step = ckpt.config.dtype(lr)
    g = iter([grad_arrays[name] for name, _ in ckpt.named_arrays()])
    return ckpt.map_arrays(lambda w: (w - step * next(g)).astype(w.dtype))


@dataclass
class PretrainResult:
    """A trained base checkpoint and its reference numbers."""
    checkpoint: Checkpoint
    eval_loss: float
    loss_trajectory: List[float]
    steps: int
    seed: int
    lr: float
    batch_size: int
    task: SyntheticTask
    max_loss_increase: float = 0.0
    loss_spikes: int = 0

    def to_dict(self) -> dict:
        return {
            'steps': self.steps,
            'seed': self.seed,
            'lr': self.lr,
            'batch_size': self.batch_size,
            'task': self.task.to_dict(),
            'config': self.checkpoint.config.to_dict(),
            'eval_loss': self.eval_loss,
            'entropy_floor': self.task.entropy_floor(),
            'max_loss_increase': self.max_loss_increase,
            'loss_spikes': self.loss_spikes,
            'loss_trajectory': list(self.loss_trajectory)
        }


@dataclass
class TrainRun:
    """One uptraining run: conversion settings, step budget and loss records."""
    base_id: str
    method: str
    method_seed: Optional[int]
    source_groups: int
    target_groups: int
    alpha: float
    base_steps: int
    steps: int
    lr: float
    batch_size: int
    seed: int
    task: dict
    base_eval_loss: Optional[float] = None
    loss_trajectory: List[float] = field(default_factory=list)
    eval_losses: Dict[float, float] = field(default_factory=dict)
    eval_loss: Optional[float] = None
    max_loss_increase: float = 0.0
    loss_spikes: int = 0
    retries: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        data = dict(self.__dict__)
        data['eval_losses'] = {f"{a:g}": v for a, v in self.eval_losses.items()}
        data['loss_trajectory'] = list(self.loss_trajectory)
        return data


class Trainer:
    """
    Minibatch SGD on fresh seeded batches.

    Every step draws a new batch from the task's stream for `seed`. The recorded
    trajectory is the loss on a fixed monitor batch, measured with the weights each
    step starts from, so with lr = 0 the trajectory is constant.
    """

    def __init__(self, task: SyntheticTask, lr: float = None, batch_size: int = None,
                 metrics: MetricsCollector = None, seed: int = 0):
        """
        Initialize the trainer.

        Args:
            task (SyntheticTask): Data source
            lr (float): Learning rate
            batch_size (int): Sequences drawn per step
            metrics (MetricsCollector): Collector for loss statistics
            seed (int): Data-order seed
        """
        self.task = task
        self.lr = Config.LEARNING_RATE if lr is None else lr
        self.batch_size = batch_size or Config.BATCH_SIZE
        self.metrics = metrics or MetricsCollector(run_id="train")
        self.seed = seed
        self.stream = task.batch_stream(seed)
        self.monitor = task.monitor_batch()
        self.eval_set = task.eval_batch()

    def evaluate(self, ckpt: Checkpoint) -> float:
        return eval_loss(ckpt, self.eval_set)

    def _step(self, ckpt: Checkpoint) -> Tuple[float, Checkpoint]:
        try:
            monitored = eval_loss(ckpt, self.monitor)
        except NonFiniteError as e:
            raise TrainingError(str(e)) from e
        if not math.isfinite(monitored):
            raise TrainingError(f"non-finite loss {monitored}")
        _, grads = loss_and_grads(ckpt, self.task.sample_batch(self.stream, self.batch_size))
        return monitored, sgd_step(ckpt, grads, self.lr)

    def train(self, ckpt: Checkpoint, steps: int, label: str, eval_at: Sequence[int] = ()) -> Tuple[Checkpoint, List[float], Dict[int, float], object]:
        """
        Run `steps` SGD steps.

        Args:
            ckpt (Checkpoint): Starting weights
            steps (int): Number of steps
            label (str): Run label for logs
            eval_at (list): Step counts after which to record eval loss (0 = before training)

        Returns:
            tuple: (weights, monitor-loss trajectory, {step: eval loss}, RunMetrics)

        Raises:
            TrainingError: On a non-finite loss or gradient, with the trajectory so far
        """
        trajectory: List[float] = []
        evals: Dict[int, float] = {}
        eval_at = set(eval_at)
        self.metrics.start_run(label)
        if 0 in eval_at:
            evals[0] = self.evaluate(ckpt)

        for step in range(steps):
            self.metrics.start_step()
            try:
                loss, ckpt = self._step(ckpt)
            except TrainingError as e:
                self.metrics.end_run()
                logging.error(f"TRAIN: {label} diverged at step {step}: {str(e)}")
                raise TrainingError(f"{label}: {e} at step {step}", step=step, trajectory=trajectory) from e
            trajectory.append(loss)
            self.metrics.record_loss(step, loss)
            self.metrics.end_step()
            if (step + 1) in eval_at:
                evals[step + 1] = self.evaluate(ckpt)
            if (step + 1) % Config.LOG_EVERY_STEPS == 0:
                logging.info(f"TRAIN: {label} step {step + 1}/{steps} loss={loss:.4f}")

        run = self.metrics.end_run()
        return ckpt, trajectory, evals, run


class TrainingService:
    """
    Pre-training and conversion + uptraining runs on one synthetic task.
    """

    def __init__(self, task: SyntheticTask, metrics: MetricsCollector = None,
                 conversion: ConversionService = None):
        """
        Initialize the training service.

        Args:
            task (SyntheticTask): Training and evaluation data
            metrics (MetricsCollector): Collector for loss statistics
            conversion (ConversionService): Converts bases before uptraining
        """
        self.task = task
        self.metrics = metrics or MetricsCollector(run_id="train")
        self.conversion = conversion or ConversionService()

    def _trainer(self, lr: float, batch_size: int, seed: int) -> Trainer:
        return Trainer(self.task, lr, batch_size, metrics=self.metrics, seed=seed)

    @staticmethod
    def _reject(message: str):
        logging.error(f"TRAIN: {message}")
        raise ValueError(message)

    def pretrain(self, config: AttentionConfig, steps: int, seed: int,
                 lr: float = None, batch_size: int = None) -> PretrainResult:
        """
        Train a model from scratch; with G = H this is the multi-head base model.

        Args:
            config (AttentionConfig): Model shape (any G; G = H for the base)
            steps (int): Step budget, the budget uptraining proportions refer to
            seed (int): Initialization and data-order seed

        Returns:
            PretrainResult: Checkpoint, held-out eval loss and trajectory

        Raises:
            TrainingError: On divergence, with the trajectory attached
        """
        task = self.task
        if steps < 1:
            self._reject(f"steps must be >= 1, got {steps}")
        if task.vocab != config.vocab:
            self._reject(f"task vocab {task.vocab} != model vocab {config.vocab}")
        trainer = self._trainer(lr, batch_size, seed)
        ckpt = Checkpoint.initialize(config, Rng(derive_seed(seed, 0)))
        label = f"pretrain H={config.n_heads} G={config.n_kv_groups} seed={seed}"
        ckpt, trajectory, _, run = trainer.train(ckpt, steps, label)
        result = PretrainResult(
            checkpoint=ckpt,
            eval_loss=trainer.evaluate(ckpt),
            loss_trajectory=trajectory,
            steps=steps,
            seed=seed,
            lr=trainer.lr,
            batch_size=trainer.batch_size,
            task=task,
            max_loss_increase=run.loss_stats.max_loss_increase,
            loss_spikes=run.loss_stats.loss_spikes
        )
        logging.info(f"TRAIN: {label} done, eval loss={result.eval_loss:.4f} "
                     f"(floor {task.entropy_floor():.4f}, uniform {math.log(config.vocab):.4f})")
        return result

    def uptrain(self, base: Checkpoint, target_groups: int, method: ConversionMethod, alpha: float, *,
                base_steps: int, seed: int = 0, lr: float = None, batch_size: int = None,
                base_eval_loss: float = None, base_id: str = None,
                alpha_grid: Sequence[float] = None) -> TrainRun:
        """
        Convert a multi-head checkpoint and continue training for round(alpha * base_steps) steps.

        Eval loss is recorded at every grid proportion the budget covers. A diverged run is
        retried with a derived seed and half the learning rate, up to
        Config.MAX_UPTRAIN_RETRIES times; attempts are recorded on the TrainRun.

        Args:
            base (Checkpoint): Multi-head checkpoint (G = H)
            target_groups (int): G after conversion
            method (ConversionMethod): Conversion method
            alpha (float): Uptraining proportion in [0, 1]
            base_steps (int): The base model's step budget
            seed (int): Data-order seed for the continued training
            base_eval_loss (float): Base eval loss, for the record
            base_id (str): Base checkpoint identifier

        Returns:
            TrainRun: Loss trajectory and eval losses
        """
        config = base.config
        if config.n_kv_groups != config.n_heads:
            self._reject(f"uptraining starts from a multi-head checkpoint, got G={config.n_kv_groups} H={config.n_heads}")
        if not 0.0 <= alpha <= 1.0:
            self._reject(f"alpha must be in [0, 1], got {alpha}")

        steps = int(round(alpha * base_steps))
        grid = Config.ALPHA_GRID if alpha_grid is None else alpha_grid
        checkpoints = {a: int(round(a * base_steps)) for a in sorted(set(grid) | {alpha}) if round(a * base_steps) <= steps}

        converted = self.conversion.convert(base, target_groups, method)
        lr = Config.LEARNING_RATE if lr is None else lr
        retries = []
        attempt_seed = seed
        while True:
            trainer = self._trainer(lr, batch_size, attempt_seed)
            label = f"uptrain G={target_groups} {method.label} alpha={alpha:g} seed={attempt_seed}"
            try:
                ckpt, trajectory, evals, run = trainer.train(converted, steps, label, eval_at=checkpoints.values())
                break
            except TrainingError as e:
                retries.append({'seed': attempt_seed, 'lr': lr, 'step': e.step, 'error': str(e)})
                if len(retries) > Config.MAX_UPTRAIN_RETRIES:
                    raise
                attempt_seed = derive_seed(seed, len(retries))
                lr = lr / 2
                if method.kind == ConversionKind.RANDOM:
                    method = ConversionMethod.random_init(derive_seed(method.seed, len(retries)))
                    converted = self.conversion.convert(base, target_groups, method)
                logging.warning(f"TRAIN: retrying {label} with seed={attempt_seed} lr={lr:g}")

        final_eval = evals.get(steps, None)
        if final_eval is None:
            final_eval = trainer.evaluate(ckpt)
        result = TrainRun(
            base_id=base_id or "",
            method=method.kind.value,
            method_seed=method.seed,
            source_groups=config.n_kv_groups,
            target_groups=target_groups,
            alpha=alpha,
            base_steps=base_steps,
            steps=steps,
            lr=lr,
            batch_size=trainer.batch_size,
            seed=seed,
            task=self.task.to_dict(),
            base_eval_loss=base_eval_loss,
            loss_trajectory=trajectory,
            eval_losses={a: evals[s] for a, s in checkpoints.items()},
            eval_loss=final_eval,
            max_loss_increase=run.loss_stats.max_loss_increase,
            loss_spikes=run.loss_stats.loss_spikes,
            retries=retries
        )
        logging.info(f"TRAIN: {label} eval losses {result.to_dict()['eval_losses']}")
        return result


def pretrain_base(config: AttentionConfig, task: SyntheticTask, steps: int, seed: int,
                  lr: float = None, batch_size: int = None) -> PretrainResult:
    """TrainingService.pretrain on `task`."""
    return TrainingService(task).pretrain(config, steps, seed, lr=lr, batch_size=batch_size)


def uptrain(base: Checkpoint, target_groups: int, method: ConversionMethod, alpha: float, *,
            task: SyntheticTask, **kwargs) -> TrainRun:
    """TrainingService.uptrain on `task`; keyword arguments pass through."""
    return TrainingService(task).uptrain(base, target_groups, method, alpha, **kwargs)


def run_uptraining_sweep(bases: Sequence[PretrainResult], groups: Sequence[int], methods: Sequence[str],
                         alpha: float, base_ids: Sequence[str] = None) -> List[TrainRun]:
    """
    Uptrain every (base seed, method, G) combination once at proportion `alpha`.

    Grid evaluations inside the run provide the smaller proportions.
    """
    runs = []
    for i, base in enumerate(bases):
        service = TrainingService(base.task)
        run_seed = derive_seed(base.seed, UPTRAIN_STREAM_TAG)
        for name in methods:
            method = ConversionMethod.parse(name, seed=derive_seed(base.seed, RANDOM_INIT_TAG))
            for g in groups:
                runs.append(service.uptrain(
                    base.checkpoint, g, method, alpha,
                    base_steps=base.steps, seed=run_seed,
                    lr=base.lr, batch_size=base.batch_size, base_eval_loss=base.eval_loss,
                    base_id=base_ids[i] if base_ids else f"seed{base.seed}"
                ))
    return runs


def aggregate_runs(runs: Sequence[TrainRun]) -> pd.DataFrame:
    """
    Median eval loss per (method, groups, alpha) across seeds.

    `distinct_runs` counts distinct eval losses; it falls below `seeds` when seeds
    did not change the outcome.

    Returns:
        pd.DataFrame: columns method, groups, alpha, median_eval_loss, seeds, distinct_runs
    """
    columns = ['method', 'groups', 'alpha', 'median_eval_loss', 'seeds', 'distinct_runs']
    rows = []
    for run in runs:
        for a, loss in run.eval_losses.items():
            rows.append({'method': run.method, 'groups': run.target_groups, 'alpha': a,
                         'seed': run.seed, 'eval_loss': loss})
    if not rows:
        return pd.DataFrame(columns=columns)
    frame = pd.DataFrame(rows)
    grouped = frame.groupby(['method', 'groups', 'alpha'], as_index=False).agg(
        median_eval_loss=('eval_loss', 'median'),
        seeds=('seed', 'nunique'),
        distinct_runs=('eval_loss', 'nunique')
    )
    return grouped.sort_values(['method', 'groups', 'alpha']).reset_index(drop=True)[columns]


def median_loss(summary: pd.DataFrame, method: str, groups: int, alpha: float) -> float:
    row = summary[(summary['method'] == method) & (summary['groups'] == groups)
                  & (np.isclose(summary['alpha'], alpha))]
    if row.empty:
        raise KeyError(f"no runs for method={method} groups={groups} alpha={alpha}")
    return float(row['median_eval_loss'].iloc[0])


def conversion_gap(summary: pd.DataFrame, groups: int, alpha: float = 0.0) -> float:
    """median(random) - median(mean) eval loss; positive means mean-pooling preserved more."""
    gap = median_loss(summary, ConversionKind.RANDOM.value, groups, alpha) - \
        median_loss(summary, ConversionKind.MEAN.value, groups, alpha)
    logging.info(f"METRICS: MeanPool vs RandomInit gap at G={groups}, alpha={alpha:g}: {gap:.4f}")
    return gap
