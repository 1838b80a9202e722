"""
Cost model for decoder inference: analytic roofline accounting of bytes loaded
and FLOPs per decode step, sharding replication of key/value heads, and a
wall-clock benchmark harness sweeping the number of groups.
"""

import logging
import math
import statistics
import pandas as pd
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from config import Config
from metrics import MetricsCollector
from models.attention import AttentionConfig, Checkpoint
from models.decoder import generate
from models.tensor import Rng


class BenchError(ValueError):
    """Raised for invalid benchmark requests."""


# FLOP constants: one multiply-accumulate counts as 2 FLOPs; per layer and sequence a
# decode step spends T*H*head_dim MACs on scores and the same on value aggregation.
FLOPS_PER_MAC = 2
ATTENTION_MACS_PER_POSITION_HEAD_DIM = 2


@dataclass(frozen=True)
class HardwareSpec:
    """Per-partition memory bandwidth and peak compute, and the partition count P."""
    memory_bandwidth: float = Config.HARDWARE_BANDWIDTH
    peak_flops: float = Config.HARDWARE_PEAK_FLOPS
    partitions: int = Config.HARDWARE_PARTITIONS

    def __post_init__(self):
        if self.memory_bandwidth <= 0 or self.peak_flops <= 0 or self.partitions <= 0:
            raise ValueError(f"hardware figures must be strictly positive: {self}")


@dataclass
class CostReport:
    """Analytic per-step figures for one decode workload."""
    groups: int
    seq_len: int
    batch: int
    kv_bytes_per_step: int
    weight_bytes_per_step: int
    flops_per_step: int
    bandwidth_time_s: float
    compute_time_s: float
    predicted_time_s: float
    bandwidth_bound: bool
    arithmetic_intensity: float
    kv_heads_per_partition: int
    replication_waste: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BenchReport:
    """Median wall time per generated token for each group count."""
    config: dict
    groups: List[int]
    seq_in: int
    seq_out: int
    trials: int
    noise_band: float = Config.BENCH_NOISE_BAND
    wall_time_s_median: Dict[int, float] = field(default_factory=dict)
    wall_time_s_trials: Dict[int, List[float]] = field(default_factory=dict)
    costs: Dict[int, CostReport] = field(default_factory=dict)
    deterministic: Dict[int, bool] = field(default_factory=dict)
    tokens: Dict[int, List[int]] = field(default_factory=dict)

    def to_dataframe(self) -> pd.DataFrame:
        """One row per group count, fixed column schema."""
        rows = []
        for g in self.groups:
            cost = self.costs[g]
            rows.append({
                'groups': g,
                'kv_bytes': kv_cache_bytes_for(self.config, g, self.seq_in + self.seq_out),
                'weight_bytes': cost.weight_bytes_per_step,
                'flops': cost.flops_per_step,
                'pred_time_s': cost.predicted_time_s,
                'wall_time_s_median': self.wall_time_s_median.get(g),
                'trials': self.trials
            })
        return pd.DataFrame(rows, columns=Config.REPORT_COLUMNS)

    def is_monotone_within_noise(self) -> bool:
        """Median wall time never drops by more than the noise band as G grows."""
        times = [self.wall_time_s_median[g] for g in sorted(self.groups)]
        return all(b >= a * (1.0 - self.noise_band) for a, b in zip(times, times[1:]))

    def to_dict(self) -> dict:
        return {
            'config': self.config,
            'groups': list(self.groups),
            'seq_in': self.seq_in,
            'seq_out': self.seq_out,
            'trials': self.trials,
            'noise_band': self.noise_band,
            'wall_time_s_median': {str(g): t for g, t in self.wall_time_s_median.items()},
            'wall_time_s_trials': {str(g): t for g, t in self.wall_time_s_trials.items()},
            'deterministic': {str(g): d for g, d in self.deterministic.items()},
            'tokens': {str(g): t for g, t in self.tokens.items()},
            'costs': {str(g): c.to_dict() for g, c in self.costs.items()},
            'monotone_within_noise': self.is_monotone_within_noise(),
            'notes': [
                "FLOPs count 2 per multiply-accumulate; attention adds 2*T*H*head_dim per score "
                "matrix and per value aggregation, per layer and sequence.",
                "Sharding replication for G < P generalizes the single-head case by ceil(G/P) "
                "heads per partition; this is an extrapolation."
            ]
        }


def kv_cache_bytes(config: AttentionConfig, seq_len: int, batch: int = 1, precision: str = None) -> int:
    """
    Key/value cache size: 2 * layers * batch * seq_len * G * head_dim * element size.

    Args:
        config (AttentionConfig): Model shape
        seq_len (int): Cached positions per sequence
        batch (int): Sequences
        precision (str): 'f32' / 'f64', defaults to the config's precision

    Returns:
        int: Bytes
    """
    element = Config.bytes_per_element(precision or config.precision)
    return 2 * config.n_layers * batch * seq_len * config.n_kv_groups * config.head_dim * element


def kv_cache_bytes_for(config_dict: dict, groups: int, seq_len: int) -> int:
    config = AttentionConfig(**{**config_dict, 'n_kv_groups': groups})
    return kv_cache_bytes(config, seq_len)


def sharded_kv_heads_per_partition(groups: int, partitions: int) -> int:
    """Key/value heads each partition holds: max(ceil(G/P), 1)."""
    if groups < 1 or partitions < 1:
        raise ValueError(f"groups and partitions must be >= 1, got G={groups}, P={partitions}")
    return max(math.ceil(groups / partitions), 1)


def replication_waste(groups: int, partitions: int) -> float:
    """Stored key/value heads across all partitions relative to G."""
    return sharded_kv_heads_per_partition(groups, partitions) * partitions / groups


def weight_bytes_per_step(config: AttentionConfig) -> int:
    """Bytes of every per-layer projection, loaded once per decode step."""
    per_layer = 2 * config.d_model * config.q_width + 2 * config.d_model * config.kv_width
    return config.n_layers * per_layer * config.bytes_per_element


def predict_step_time(config: AttentionConfig, hardware: HardwareSpec, seq_len: int, batch: int = 1) -> CostReport:
    """
    Roofline estimate for one decode step of `batch` sequences at `seq_len` cached positions.

    Bytes and FLOPs split evenly over the partitions; key/value bytes are multiplied
    by the replication waste.

    Args:
        config (AttentionConfig): Model shape
        hardware (HardwareSpec): Bandwidth, peak and partitions
        seq_len (int): Cached positions
        batch (int): Sequences decoded together

    Returns:
        CostReport: Bytes, FLOPs and predicted step time
    """
    if seq_len < 0 or batch < 1:
        raise ValueError(f"seq_len must be >= 0 and batch >= 1, got {seq_len}, {batch}")
    P = hardware.partitions
    waste = replication_waste(config.n_kv_groups, P)
    kv_bytes = int(round(kv_cache_bytes(config, seq_len, batch) * waste))
    weight_bytes = weight_bytes_per_step(config)

    weight_macs = config.n_layers * (2 * config.d_model * config.q_width + 2 * config.d_model * config.kv_width)
    attention_macs = (config.n_layers * ATTENTION_MACS_PER_POSITION_HEAD_DIM
                      * seq_len * config.n_heads * config.head_dim)
    flops = FLOPS_PER_MAC * (weight_macs + attention_macs) * batch

    total_bytes = kv_bytes + weight_bytes
    bandwidth_time = total_bytes / (hardware.memory_bandwidth * P)
    compute_time = flops / (hardware.peak_flops * P)
    predicted = max(bandwidth_time, compute_time)

    return CostReport(
        groups=config.n_kv_groups,
        seq_len=seq_len,
        batch=batch,
        kv_bytes_per_step=kv_bytes,
        weight_bytes_per_step=weight_bytes,
        flops_per_step=flops,
        bandwidth_time_s=bandwidth_time,
        compute_time_s=compute_time,
        predicted_time_s=predicted,
        bandwidth_bound=bandwidth_time >= compute_time,
        arithmetic_intensity=flops / total_bytes if total_bytes else float('inf'),
        kv_heads_per_partition=sharded_kv_heads_per_partition(config.n_kv_groups, P),
        replication_waste=waste
    )


def sweep_groups(config: AttentionConfig, hardware: HardwareSpec, seq_len: int, batch: int = 1,
                 groups: Sequence[int] = None) -> List[CostReport]:
    """predict_step_time for each valid G (every divisor of H by default)."""
    if groups is None:
        groups = [g for g in range(1, config.n_heads + 1) if config.n_heads % g == 0]
    return [predict_step_time(config.with_groups(g), hardware, seq_len, batch) for g in groups]


def costs_to_dataframe(costs: Sequence[CostReport]) -> pd.DataFrame:
    """Analytic rows in the bench column schema; wall-time columns stay empty."""
    rows = [{
        'groups': c.groups,
        'kv_bytes': c.kv_bytes_per_step,
        'weight_bytes': c.weight_bytes_per_step,
        'flops': c.flops_per_step,
        'pred_time_s': c.predicted_time_s,
        'wall_time_s_median': None,
        'trials': None
    } for c in costs]
    return pd.DataFrame(rows, columns=Config.REPORT_COLUMNS)


class BenchHarness:
    """
    Sequential wall-clock benchmark of greedy generation across group counts.
    Trials of one G finish before the next G starts.
    """

    def __init__(self, hardware: HardwareSpec = None, noise_band: float = None, metrics: MetricsCollector = None):
        """
        Initialize the harness.

        Args:
            hardware (HardwareSpec): Hardware for the predicted-time column
            noise_band (float): Relative slack declared for wall-time ordering
            metrics (MetricsCollector): Collector shared by every trial
        """
        self.hardware = hardware or HardwareSpec()
        self.noise_band = Config.BENCH_NOISE_BAND if noise_band is None else noise_band
        self.metrics = metrics or MetricsCollector(run_id="bench")

    @staticmethod
    def _check_compatible(checkpoints: Sequence[Checkpoint]):
        first = checkpoints[0].config
        for ckpt in checkpoints[1:]:
            c = ckpt.config
            for name in ('n_heads', 'head_dim', 'n_layers', 'd_model', 'vocab', 'precision', 'causal'):
                if getattr(c, name) != getattr(first, name):
                    raise BenchError(f"mismatched configs: {name} {getattr(c, name)} != {getattr(first, name)}")
        groups = [c.config.n_kv_groups for c in checkpoints]
        if len(set(groups)) != len(groups):
            raise BenchError(f"duplicate group counts in checkpoint set: {groups}")

    def bench_generate(self, checkpoints: Sequence[Checkpoint], seq_in: int, seq_out: int,
                       trials: int, seed: int = None) -> BenchReport:
        """
        Time greedy generation for every checkpoint.

        Args:
            checkpoints (list): Checkpoints sharing H, head_dim and layers, one per G
            seq_in (int): Prompt length
            seq_out (int): Generated tokens
            trials (int): Repetitions per G, at least Config.BENCH_MIN_TRIALS
            seed (int): Prompt seed

        Returns:
            BenchReport: Median wall time per generated token for each G
        """
        if not checkpoints:
            raise BenchError("no checkpoints to benchmark")
        if trials < Config.BENCH_MIN_TRIALS:
            raise BenchError(f"trials must be >= {Config.BENCH_MIN_TRIALS}, got {trials}")
        if seq_in < 1 or seq_out < 1:
            raise BenchError(f"seq_in and seq_out must be >= 1, got {seq_in}, {seq_out}")
        self._check_compatible(checkpoints)

        ordered = sorted(checkpoints, key=lambda c: c.config.n_kv_groups)
        base = ordered[0].config
        prompt = Rng(Config.BENCH_PROMPT_SEED if seed is None else seed).integers(base.vocab, (seq_in,)).tolist()
        capacity = seq_in + seq_out

        report = BenchReport(
            config={k: v for k, v in base.to_dict().items() if k != 'n_kv_groups'},
            groups=[c.config.n_kv_groups for c in ordered],
            seq_in=seq_in, seq_out=seq_out, trials=trials, noise_band=self.noise_band
        )
        for ckpt in ordered:
            g = ckpt.config.n_kv_groups
            per_token, traces = [], []
            for trial in range(trials):
                trace = generate(ckpt, prompt, seq_out, capacity=capacity, metrics=self.metrics)
                per_token.append(trace.time_per_token)
                traces.append(trace.tokens)
                logging.info(f"BENCH: G={g} trial {trial + 1}/{trials} {trace.time_per_token * 1e3:.4f} ms/token")
            report.wall_time_s_trials[g] = per_token
            report.wall_time_s_median[g] = statistics.median(per_token)
            report.deterministic[g] = all(t == traces[0] for t in traces)
            report.tokens[g] = traces[0]
            report.costs[g] = predict_step_time(ckpt.config, self.hardware, capacity)
            if not report.deterministic[g]:
                logging.warning(f"BENCH: G={g} token traces differ across trials")

        logging.info(f"BENCH: medians {report.wall_time_s_median}, monotone within noise: "
                     f"{report.is_monotone_within_noise()}")
        return report


def bench_generate(checkpoints: Sequence[Checkpoint], seq_in: int, seq_out: int, trials: int,
                   seed: int = None, hardware: HardwareSpec = None) -> BenchReport:
    """Module-level entry point for BenchHarness.bench_generate."""
    return BenchHarness(hardware=hardware).bench_generate(checkpoints, seq_in, seq_out, trials, seed)
