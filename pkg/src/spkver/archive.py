"""Binary record archives for features ("FEA1") and embeddings ("EMB1").

Layout: 4 magic bytes, then per record
    u32 LE  utterance-id byte length, followed by the utf-8 bytes
    u32 LE  speaker-id byte length, followed by the utf-8 bytes
    u32 LE  T (rows)
    u32 LE  D (columns)
    T*D     float32 LE, row-major
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .errors import DataError

FEATURE_MAGIC = b"FEA1"
EMBEDDING_MAGIC = b"EMB1"

_U32 = struct.Struct("<I")


def _write_str(fh: BinaryIO, s: str) -> None:
    data = s.encode("utf-8")
    fh.write(_U32.pack(len(data)))
    fh.write(data)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError("truncated archive")
    return data


def _read_str(fh: BinaryIO) -> str:
    (n,) = _U32.unpack(_read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def write_records(
    path: str,
    records: Iterable[tuple[str, str, np.ndarray]],
    magic: bytes = FEATURE_MAGIC,
) -> int:
    """Write (utterance_id, speaker_id, matrix) records; returns the count."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(magic)
        for utt_id, spk_id, mat in records:
            mat = np.atleast_2d(np.asarray(mat, dtype=np.float32))
            _write_str(fh, utt_id)
            _write_str(fh, spk_id)
            fh.write(_U32.pack(mat.shape[0]))
            fh.write(_U32.pack(mat.shape[1]))
            fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
            count += 1
    return count


def iter_records(
    path: str, magic: bytes = FEATURE_MAGIC
) -> Iterator[tuple[str, str, np.ndarray]]:
    """Yield (utterance_id, speaker_id, float32 matrix) records."""
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise DataError(
                f"bad archive magic in {path!r}: expected {magic!r}, got {got!r}"
            )
        while True:
            head = fh.read(4)
            if not head:
                return
            (n,) = _U32.unpack(head)
            utt_id = _read_exact(fh, n).decode("utf-8")
            spk_id = _read_str(fh)
            (rows,) = _U32.unpack(_read_exact(fh, 4))
            (cols,) = _U32.unpack(_read_exact(fh, 4))
            raw = _read_exact(fh, 4 * rows * cols)
            mat = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy()
            yield utt_id, spk_id, mat


def read_records(path: str, magic: bytes = FEATURE_MAGIC):
    return list(iter_records(path, magic))
