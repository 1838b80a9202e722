"""
Metrics Collector module for the grouped-query attention toolkit.
Tracks per-step wall time for decoding and benchmarks, and loss-trajectory
statistics (largest single-step increase, spike count) for training runs.
"""

import logging
import statistics
import time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Any

from config import Config


@dataclass
class StepTiming:
    """Data class for one timed step."""
    index: int
    wall_time: float  # seconds
    cache_bytes: Optional[int] = None


@dataclass
class LossStats:
    """Data class for loss-trajectory statistics."""
    steps: int = 0
    first_loss: Optional[float] = None
    last_loss: Optional[float] = None
    min_loss: float = float('inf')
    max_loss_increase: float = 0.0
    max_increase_step: Optional[int] = None
    loss_spikes: int = 0


@dataclass
class RunMetrics:
    """Data class for a finished run."""
    label: str
    started_at: datetime
    total_time: float = 0.0
    setup_time: float = 0.0
    step_timings: List[StepTiming] = field(default_factory=list)
    loss_stats: LossStats = field(default_factory=LossStats)

    @property
    def step_times(self) -> List[float]:
        return [s.wall_time for s in self.step_timings]

    @property
    def median_step_time(self) -> Optional[float]:
        times = self.step_times
        return statistics.median(times) if times else None


class MetricsCollector:
    """
    Run-level metrics collection with step timing and loss tracking.
    """

    def __init__(self, run_id: str = None, spike_threshold: float = None):
        """
        Initialize metrics collector.

        Args:
            run_id (str): Identifier used in log lines
            spike_threshold (float): Single-step loss increase counted as a spike
        """
        self.run_id = run_id or f"run_{int(time.time())}"
        self.spike_threshold = Config.LOSS_SPIKE_THRESHOLD if spike_threshold is None else spike_threshold
        self.history: List[RunMetrics] = []

        self.current: Optional[RunMetrics] = None
        self.current_run_start: float = 0.0
        self.current_step_start: float = 0.0
        self.previous_loss: Optional[float] = None

        logging.debug(f"MetricsCollector initialized for run: {self.run_id}")

    def start_run(self, label: str) -> RunMetrics:
        """
        Start tracking a new run.

        Args:
            label (str): Run label (e.g. 'generate', 'uptrain G=2 mean')

        Returns:
            RunMetrics: The live metrics object
        """
        self.current = RunMetrics(label=label, started_at=datetime.now())
        self.current_run_start = time.perf_counter()
        self.previous_loss = None
        logging.debug(f"METRICS: Starting run '{label}' ({self.run_id})")
        return self.current

    def mark_setup_done(self):
        """Record the time spent before the first step (e.g. prefill)."""
        if self.current is not None:
            self.current.setup_time = time.perf_counter() - self.current_run_start

    def start_step(self):
        self.current_step_start = time.perf_counter()

    def end_step(self, cache_bytes: int = None) -> float:
        """
        End timing the current step.

        Args:
            cache_bytes (int): Optional cache size after the step

        Returns:
            float: Step wall time in seconds
        """
        elapsed = time.perf_counter() - self.current_step_start
        if self.current is not None:
            self.current.step_timings.append(
                StepTiming(index=len(self.current.step_timings), wall_time=elapsed, cache_bytes=cache_bytes)
            )
        return elapsed

    def record_loss(self, step: int, loss: float):
        """
        Record one training loss and update spike statistics.

        Args:
            step (int): Step index
            loss (float): Scalar loss at that step
        """
        if self.current is None:
            return
        stats = self.current.loss_stats
        stats.steps += 1
        if stats.first_loss is None:
            stats.first_loss = loss
        stats.last_loss = loss
        stats.min_loss = min(stats.min_loss, loss)

        if self.previous_loss is not None:
            increase = loss - self.previous_loss
            if increase > stats.max_loss_increase:
                stats.max_loss_increase = increase
                stats.max_increase_step = step
            if increase > self.spike_threshold:
                stats.loss_spikes += 1
                logging.warning(f"METRICS: Loss spike at step {step}: +{increase:.4f} ({self.previous_loss:.4f} -> {loss:.4f})")
        self.previous_loss = loss

    def end_run(self) -> Optional[RunMetrics]:
        """
        End run tracking.

        Returns:
            RunMetrics: Completed run metrics
        """
        if self.current is None:
            logging.warning("METRICS: No active run to end")
            return None

        run = self.current
        run.total_time = time.perf_counter() - self.current_run_start
        self.history.append(run)
        self.current = None

        median = run.median_step_time
        logging.debug(f"METRICS: Run '{run.label}' completed - Total: {run.total_time:.4f}s, "
                      f"Steps: {len(run.step_timings)}, "
                      f"Median step: {median if median is None else f'{median * 1e3:.3f}ms'}")
        return run

    def get_statistics(self) -> Dict[str, Any]:
        """
        Summary over all finished runs.

        Returns:
            dict: Run count, total time, median step time, worst loss increase
        """
        all_steps = [t for run in self.history for t in run.step_times]
        return {
            'run_id': self.run_id,
            'runs': len(self.history),
            'total_time': sum(run.total_time for run in self.history),
            'median_step_time': statistics.median(all_steps) if all_steps else None,
            'max_loss_increase': max((run.loss_stats.max_loss_increase for run in self.history), default=0.0),
            'loss_spikes': sum(run.loss_stats.loss_spikes for run in self.history)
        }

    def reset(self):
        """Clear all recorded runs."""
        self.history = []
        self.current = None
        self.previous_loss = None
