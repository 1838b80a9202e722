"""
Report Writer - CSV / JSON outputs with a run manifest beside each file
<output> | <output>.manifest.json
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from config import Config
from database.checkpoint_store import CheckpointStore, atomic_write_bytes
from models.attention import Checkpoint

MANIFEST_SUFFIX = ".manifest.json"


@dataclass
class RunManifest:
    """Everything needed to reproduce one CLI invocation."""
    subcommand: str
    params: Dict[str, Any]
    argv: List[str]
    seeds: List[int] = field(default_factory=list)
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    tool_version: str = Config.TOOL_VERSION
    started_at: str = field(default_factory=lambda: datetime.now().isoformat())
    finished_at: str = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(**data)

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default)


class ReportWriter:
    """
    Writes every output of a run atomically and records it on the manifest.
    """

    def __init__(self, manifest: RunManifest, store: CheckpointStore = None):
        """
        Initialize the writer.

        Args:
            manifest (RunManifest): Manifest of the running subcommand
            store (CheckpointStore): Store used for checkpoint outputs
        """
        self.manifest = manifest
        self.store = store or CheckpointStore()
        self.written: List[str] = []
        logging.debug(f"ReportWriter initialized for subcommand: {manifest.subcommand}")

    def _check_target(self, path: str):
        target = os.path.abspath(path)
        if target in (os.path.abspath(p) for p in self.manifest.inputs):
            raise ValueError(f"refusing to overwrite input file {path}")

    def _record(self, path: str):
        self.written.append(path)
        if path not in self.manifest.outputs:
            self.manifest.outputs.append(path)

    def write_json(self, path: str, data: Any) -> str:
        """
        Write a JSON document.

        Args:
            path (str): Destination file
            data: JSON-serializable data (numpy scalars and arrays allowed)

        Returns:
            str: The path written
        """
        self._check_target(path)
        try:
            atomic_write_bytes(path, (to_json(data) + "\n").encode('utf-8'))
            self._record(path)
            logging.info(f"Report written: {path}")
            return path
        except Exception as e:
            logging.error(f"Failed to write JSON report {path}: {str(e)}")
            raise

    def write_csv(self, path: str, frame: pd.DataFrame) -> str:
        """
        Write a table as CSV (no index column).

        Args:
            path (str): Destination file
            frame (pd.DataFrame): Table to write

        Returns:
            str: The path written
        """
        self._check_target(path)
        try:
            atomic_write_bytes(path, frame.to_csv(index=False).encode('utf-8'))
            self._record(path)
            logging.info(f"Report written: {path} ({len(frame)} rows)")
            return path
        except Exception as e:
            logging.error(f"Failed to write CSV report {path}: {str(e)}")
            raise

    def write_checkpoint(self, path: str, ckpt: Checkpoint) -> str:
        """Save a checkpoint through the store; returns its fingerprint."""
        self._check_target(path)
        fingerprint = self.store.save(ckpt, path)
        self._record(path)
        return fingerprint

    def finalize(self) -> List[str]:
        """
        Stamp the finish time and write the manifest beside every output.

        Returns:
            list: Manifest paths written
        """
        self.manifest.finished_at = datetime.now().isoformat()
        data = (to_json(self.manifest.to_dict()) + "\n").encode('utf-8')
        paths = []
        for output in self.written:
            path = output + MANIFEST_SUFFIX
            atomic_write_bytes(path, data)
            paths.append(path)
        logging.info(f"Manifest written beside {len(paths)} output(s)")
        return paths
