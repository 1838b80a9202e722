"""
Checkpoint Store module for the grouped-query attention toolkit.
Handles the bit-exact checkpoint container: writing, reading, validation.

Layout (all little-endian):
    magic "GQAC" | version u32 | d_model, H, G, head_dim, n_layers, vocab,
    precision bits, causal flag (u32 each) | arrays in container order, row-major
    IEEE-754 | FNV-1a 64 checksum over every preceding byte
"""

import logging
import os
import struct
import tempfile
import numpy as np
from typing import Dict, Union

from config import Config
from models.attention import AttentionConfig, Checkpoint, ConfigError, LayerWeights

_HEADER = struct.Struct("<4sI8I")
_CHECKSUM = struct.Struct("<Q")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_PRECISION_BITS = {'f32': 32, 'f64': 64}
_BITS_PRECISION = {32: 'f32', 64: 'f64'}


class CheckpointFormatError(ValueError):
    """Base class for unreadable checkpoint files."""


class BadMagicError(CheckpointFormatError):
    """File does not start with the container magic."""


class VersionMismatchError(CheckpointFormatError):
    """Container version is not the one this toolkit writes."""


class TruncatedPayloadError(CheckpointFormatError):
    """File ends before the header-declared payload does."""


class HeaderInconsistencyError(CheckpointFormatError):
    """Header fields are invalid or disagree with the file size."""


class ChecksumMismatchError(CheckpointFormatError):
    """Stored checksum differs from the payload checksum."""


def fnv1a_64(data: bytes) -> int:
    """FNV-1a 64-bit hash. Byte-serial; about 0.1 s per MB."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _array_dtype(precision: str) -> str:
    return '<f4' if precision == 'f32' else '<f8'


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    """
    Encode a checkpoint into container bytes.

    Args:
        ckpt (Checkpoint): Checkpoint to encode

    Returns:
        bytes: Complete container including the trailing checksum
    """
    ckpt.validate()
    c = ckpt.config
    header = _HEADER.pack(
        Config.CHECKPOINT_MAGIC, Config.CHECKPOINT_VERSION,
        c.d_model, c.n_heads, c.n_kv_groups, c.head_dim, c.n_layers, c.vocab,
        _PRECISION_BITS[c.precision], int(c.causal)
    )
    dtype = _array_dtype(c.precision)
    parts = [header]
    for _, array in ckpt.named_arrays():
        parts.append(np.ascontiguousarray(array).astype(dtype, copy=False).tobytes(order='C'))
    payload = b"".join(parts)
    return payload + _CHECKSUM.pack(fnv1a_64(payload))


def _stored_fingerprint(data: bytes) -> str:
    (checksum,) = _CHECKSUM.unpack_from(data, len(data) - _CHECKSUM.size)
    return f"{checksum:016x}"


def checkpoint_fingerprint(ckpt: Checkpoint) -> str:
    """Stable id of a checkpoint: hex checksum of its serialized form."""
    return _stored_fingerprint(serialize_checkpoint(ckpt))


def deserialize_checkpoint(data: bytes) -> Checkpoint:
    """
    Decode container bytes; nothing is returned unless every check passes.

    Raises:
        BadMagicError, VersionMismatchError, TruncatedPayloadError,
        HeaderInconsistencyError, ChecksumMismatchError
    """
    if len(data) < 4 or data[:4] != Config.CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {Config.CHECKPOINT_MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"file of {len(data)} bytes is shorter than the header")

    (_, version, d_model, n_heads, n_groups, head_dim,
     n_layers, vocab, bits, causal) = _HEADER.unpack_from(data, 0)
    if version != Config.CHECKPOINT_VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, expected {Config.CHECKPOINT_VERSION}")
    if bits not in _BITS_PRECISION:
        raise HeaderInconsistencyError(f"unknown precision tag {bits}")
    if causal not in (0, 1):
        raise HeaderInconsistencyError(f"causal flag must be 0 or 1, got {causal}")
    try:
        config = AttentionConfig(
            d_model=d_model, n_heads=n_heads, n_kv_groups=n_groups, head_dim=head_dim,
            n_layers=n_layers, vocab=vocab, causal=bool(causal), precision=_BITS_PRECISION[bits]
        )
    except ConfigError as e:
        raise HeaderInconsistencyError(f"inconsistent header: {e}") from e

    element = bits // 8
    per_layer = (2 * config.d_model * config.q_width) + (2 * config.d_model * config.kv_width)
    n_values = 2 * config.vocab * config.d_model + config.n_layers * per_layer
    expected = _HEADER.size + n_values * element + _CHECKSUM.size
    if len(data) < expected:
        raise TruncatedPayloadError(f"truncated payload: {len(data)} bytes, header implies {expected}")
    if len(data) > expected:
        raise HeaderInconsistencyError(f"file has {len(data) - expected} bytes beyond the header-declared payload")

    payload = data[:-_CHECKSUM.size]
    (stored,) = _CHECKSUM.unpack_from(data, len(payload))
    actual = fnv1a_64(payload)
    if stored != actual:
        raise ChecksumMismatchError(f"checksum mismatch: stored {stored:016x}, computed {actual:016x}")

    dtype = _array_dtype(config.precision)
    offset = _HEADER.size

    def take(rows, cols):
        nonlocal offset
        count = rows * cols
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        offset += count * element
        return array.reshape(rows, cols).astype(config.dtype)

    embedding = take(config.vocab, config.d_model)
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            wq=take(config.d_model, config.q_width),
            wk=take(config.d_model, config.kv_width),
            wv=take(config.d_model, config.kv_width),
            wo=take(config.q_width, config.d_model)
        ))
    unembedding = take(config.d_model, config.vocab)
    return Checkpoint(config, embedding, layers, unembedding).validate()


def atomic_write_bytes(path: Union[str, os.PathLike], data: bytes):
    """Write via a temp file in the target directory, then replace."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(str(path)))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


class CheckpointStore:
    """
    Reads and writes checkpoint containers.

    The checksum of every file saved or loaded is remembered, so fingerprints of
    known files never re-hash the payload.
    """

    def __init__(self):
        """Initialize an empty fingerprint cache."""
        self.fingerprints: Dict[str, str] = {}

    @staticmethod
    def _key(path: Union[str, os.PathLike]) -> str:
        return os.path.abspath(str(path))

    def save(self, ckpt: Checkpoint, path: Union[str, os.PathLike]) -> str:
        """
        Save a checkpoint.

        Args:
            ckpt (Checkpoint): Checkpoint to write
            path (str): Destination file

        Returns:
            str: Fingerprint of the written file
        """
        try:
            data = serialize_checkpoint(ckpt)
            atomic_write_bytes(path, data)
        except Exception as e:
            logging.error(f"Failed to save checkpoint to {path}: {str(e)}")
            raise
        fingerprint = _stored_fingerprint(data)
        self.fingerprints[self._key(path)] = fingerprint
        logging.info(f"Checkpoint saved to {path} ({len(data)} bytes, G={ckpt.config.n_kv_groups})")
        return fingerprint

    def load(self, path: Union[str, os.PathLike]) -> Checkpoint:
        """
        Load a checkpoint.

        Args:
            path (str): Container file

        Returns:
            Checkpoint: Decoded checkpoint, bit-identical to the one saved

        Raises:
            CheckpointFormatError: On any container defect
        """
        try:
            with open(path, 'rb') as f:
                data = f.read()
            ckpt = deserialize_checkpoint(data)
        except Exception as e:
            logging.error(f"Failed to load checkpoint from {path}: {str(e)}")
            raise
        self.fingerprints[self._key(path)] = _stored_fingerprint(data)
        logging.info(f"Checkpoint loaded from {path} (H={ckpt.config.n_heads}, G={ckpt.config.n_kv_groups})")
        return ckpt

    def fingerprint(self, path: Union[str, os.PathLike]) -> str:
        """Fingerprint of a saved or loaded file; unknown files are loaded (and verified) first."""
        key = self._key(path)
        if key not in self.fingerprints:
            self.load(path)
        return self.fingerprints[key]


def save_checkpoint(ckpt: Checkpoint, path: Union[str, os.PathLike]) -> str:
    """Save through a one-off CheckpointStore; returns the fingerprint."""
    return CheckpointStore().save(ckpt, path)


def load_checkpoint(path: Union[str, os.PathLike]) -> Checkpoint:
    """Load through a one-off CheckpointStore."""
    return CheckpointStore().load(path)
