import struct

import numpy as np
import pytest

from conftest import make_checkpoint
from database.checkpoint_store import (
    BadMagicError, ChecksumMismatchError, CheckpointFormatError, CheckpointStore, HeaderInconsistencyError,
    TruncatedPayloadError, VersionMismatchError, checkpoint_fingerprint, deserialize_checkpoint,
    fnv1a_64, load_checkpoint, save_checkpoint, serialize_checkpoint
)

# Byte offsets of header fields
VERSION_OFFSET = 4
GROUPS_OFFSET = 16


def _patch_u32(data, offset, value):
    data = bytearray(data)
    struct.pack_into("<I", data, offset, value)
    return bytes(data)


def _assert_identical(a, b):
    assert a.config == b.config
    for (name_a, x), (name_b, y) in zip(a.named_arrays(), b.named_arrays()):
        assert name_a == name_b
        assert x.dtype == y.dtype
        assert x.tobytes() == y.tobytes()


def test_fnv1a_known_values():
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C


@pytest.mark.parametrize("precision", ["f32", "f64"])
def test_round_trip_is_bit_identical(tmp_path, precision):
    ckpt = make_checkpoint(seed=0, H=4, G=2, hd=2, layers=2, vocab=8, precision=precision)
    path = tmp_path / "model.gqac"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    _assert_identical(ckpt, loaded)
    assert path.read_bytes() == serialize_checkpoint(loaded)
    assert checkpoint_fingerprint(loaded) == checkpoint_fingerprint(ckpt)


def test_file_layout():
    ckpt = make_checkpoint(seed=1, H=4, G=1, hd=2, layers=1, vocab=8)
    data = serialize_checkpoint(ckpt)
    assert data[:4] == b"GQAC"
    fields = struct.unpack_from("<I8I", data, 4)
    assert fields == (1, 8, 4, 1, 2, 1, 8, 32, 1)
    values = 2 * 8 * 8 + (2 * 8 * 8 + 2 * 8 * 2)
    assert len(data) == 4 + 9 * 4 + values * 4 + 8
    first = np.frombuffer(data, dtype="<f4", count=1, offset=40)[0]
    assert first == ckpt.embedding[0, 0]


def test_bad_magic():
    data = serialize_checkpoint(make_checkpoint(seed=0))
    with pytest.raises(BadMagicError):
        deserialize_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(BadMagicError):
        deserialize_checkpoint(b"")


def test_version_mismatch():
    data = serialize_checkpoint(make_checkpoint(seed=0))
    with pytest.raises(VersionMismatchError):
        deserialize_checkpoint(_patch_u32(data, VERSION_OFFSET, 2))


def test_indivisible_groups_in_header():
    data = serialize_checkpoint(make_checkpoint(seed=0, H=8, G=4, hd=1))
    with pytest.raises(HeaderInconsistencyError, match="H mod G"):
        deserialize_checkpoint(_patch_u32(data, GROUPS_OFFSET, 3))


def test_header_disagreeing_with_size():
    data = serialize_checkpoint(make_checkpoint(seed=0, H=8, G=4, hd=1))
    with pytest.raises(CheckpointFormatError):
        deserialize_checkpoint(_patch_u32(data, GROUPS_OFFSET, 8))
    with pytest.raises(HeaderInconsistencyError):
        deserialize_checkpoint(data + b"\x00")


def test_truncated_payload():
    data = serialize_checkpoint(make_checkpoint(seed=0))
    with pytest.raises(TruncatedPayloadError):
        deserialize_checkpoint(data[:-12])
    with pytest.raises(TruncatedPayloadError):
        deserialize_checkpoint(data[:20])


def test_checksum_mismatch():
    data = bytearray(serialize_checkpoint(make_checkpoint(seed=0)))
    data[60] ^= 0x01
    with pytest.raises(ChecksumMismatchError):
        deserialize_checkpoint(bytes(data))


def test_error_classes_are_distinct():
    classes = {BadMagicError, VersionMismatchError, TruncatedPayloadError,
               HeaderInconsistencyError, ChecksumMismatchError}
    assert len(classes) == 5
    assert all(issubclass(c, CheckpointFormatError) for c in classes)


def test_failed_load_leaves_nothing_behind(tmp_path):
    path = tmp_path / "broken.gqac"
    path.write_bytes(b"GQAC" + b"\x00" * 10)
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["broken.gqac"]


def test_save_is_atomic_and_overwrites(tmp_path):
    path = tmp_path / "model.gqac"
    save_checkpoint(make_checkpoint(seed=0), path)
    save_checkpoint(make_checkpoint(seed=1), path)
    _assert_identical(load_checkpoint(path), make_checkpoint(seed=1))
    assert [p.name for p in tmp_path.iterdir()] == ["model.gqac"]


def test_store_fingerprints_come_from_the_file(tmp_path):
    store = CheckpointStore()
    ckpt = make_checkpoint(seed=2, H=4, G=2, hd=2, layers=1)
    path = tmp_path / "model.gqac"
    fingerprint = store.save(ckpt, path)
    assert fingerprint == checkpoint_fingerprint(ckpt)
    assert store.fingerprint(path) == fingerprint

    reader = CheckpointStore()
    assert reader.fingerprint(path) == fingerprint  # unknown file: loaded and verified
    _assert_identical(reader.load(tmp_path / "model.gqac"), ckpt)
    assert list(reader.fingerprints.values()) == [fingerprint]


def test_store_logs_before_raising(tmp_path, caplog):
    path = tmp_path / "bad.gqac"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    store = CheckpointStore()
    with pytest.raises(BadMagicError):
        store.load(path)
    assert "Failed to load checkpoint" in caplog.text
    assert store.fingerprints == {}
