"""Binary persistence of per-length accumulator state for resumable sweeps.

File layout (all integers little-endian, documented byte-level in the
README): magic 'SRCP', version byte, sha256 dataset fingerprint, header
struct (s, m, n, combos_done, total_combos, elapsed), the obs_ratio and
contrib_counts arrays as little-endian float64, and a trailing sha256 of
everything before it. Writes are atomic: temp file then rename.
"""

from __future__ import annotations

import csv
import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from siterank.combinatorics import binomial
from siterank.ranking import LengthAccumulator

MAGIC = b"SRCP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<HHQQQd")  # s, m, n, combos_done, total_combos, elapsed_seconds
_DIGEST_SIZE = 32


class CheckpointError(RuntimeError):
    """Raised for corrupt checkpoints or dataset fingerprint mismatches."""


def checkpoint_path(directory: str | Path, s: int) -> Path:
    return Path(directory) / f"len_{s}.ckpt"


def _encode(acc: LengthAccumulator, fingerprint: str) -> bytes:
    fp_raw = bytes.fromhex(fingerprint)
    if len(fp_raw) != _DIGEST_SIZE:
        raise CheckpointError(f"fingerprint must be a sha256 hex digest, got {len(fp_raw)} bytes")
    header = _HEADER.pack(acc.s, acc.m, acc.n, acc.combos_done, acc.total_combos(), acc.elapsed)
    body = b"".join(
        (
            MAGIC,
            bytes([FORMAT_VERSION]),
            fp_raw,
            header,
            np.ascontiguousarray(acc.obs_ratio, dtype="<f8").tobytes(),
            np.ascontiguousarray(acc.contrib_counts, dtype="<f8").tobytes(),
        )
    )
    return body + hashlib.sha256(body).digest()


def _decode(blob: bytes, path: Path) -> tuple[LengthAccumulator, str, int]:
    fixed = len(MAGIC) + 1 + _DIGEST_SIZE + _HEADER.size
    if len(blob) < fixed + _DIGEST_SIZE:
        raise CheckpointError(f"{path}: file truncated")
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, checkpoint is corrupt")
    if body[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = body[4]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    fp_hex = body[5 : 5 + _DIGEST_SIZE].hex()
    s, m, n, combos_done, total, elapsed = _HEADER.unpack_from(body, 5 + _DIGEST_SIZE)
    offset = fixed
    nr_bytes = n * 8
    oc_bytes = n * m * 8
    if len(body) != fixed + nr_bytes + oc_bytes:
        raise CheckpointError(f"{path}: payload size does not match header dimensions")
    obs_ratio = np.frombuffer(body, dtype="<f8", count=n, offset=offset).astype(np.float64)
    contrib = np.frombuffer(body, dtype="<f8", count=n * m, offset=offset + nr_bytes).astype(np.float64)
    if total != binomial(m, s) or combos_done > total:
        raise CheckpointError(f"{path}: combination counts out of lexicographic range")
    acc = LengthAccumulator(
        s=s,
        obs_ratio=obs_ratio,
        contrib_counts=contrib.reshape(n, m),
        combos_done=combos_done,
        elapsed=elapsed,
    )
    return acc, fp_hex, version


def save(acc: LengthAccumulator, directory: str | Path, fingerprint: str) -> Path:
    """Atomically persist one accumulator; a failed write leaves any prior file intact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    final = checkpoint_path(directory, acc.s)
    tmp = directory / f".len_{acc.s}.ckpt.tmp.{os.getpid()}"
    blob = _encode(acc, fingerprint)
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, final)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise
    return final


def load(directory: str | Path, s: int, matrix_fingerprint: str) -> LengthAccumulator | None:
    """Load the length-s accumulator if present.

    Absent file -> None. A fingerprint mismatch is a hard error: the
    checkpoint belongs to a different dataset and silently restarting
    would hide that.
    """
    path = checkpoint_path(directory, s)
    if not path.exists():
        return None
    blob = path.read_bytes()
    acc, fp_hex, _ = _decode(blob, path)
    if acc.s != s:
        raise CheckpointError(f"{path}: contains length {acc.s}, expected {s}")
    if fp_hex != matrix_fingerprint:
        raise CheckpointError(
            f"{path}: dataset fingerprint mismatch (checkpoint {fp_hex[:12]}..., matrix {matrix_fingerprint[:12]}...)"
        )
    return acc


def timing_report(directory: str | Path) -> list[tuple[int, float]]:
    """(s, elapsed_seconds) for every completed length found in the directory."""
    directory = Path(directory)
    rows: list[tuple[int, float]] = []
    if not directory.exists():
        return rows
    for path in sorted(directory.glob("len_*.ckpt")):
        acc, _, _ = _decode(path.read_bytes(), path)
        if acc.is_complete():
            rows.append((acc.s, acc.elapsed))
    rows.sort()
    return rows


def write_timings_csv(directory: str | Path) -> Path:
    """Write timings.csv next to the checkpoints, one row per completed length."""
    directory = Path(directory)
    out = directory / "timings.csv"
    rows = timing_report(directory)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "elapsed_seconds"])
        for s, elapsed in rows:
            writer.writerow([s, repr(elapsed)])
    return out


class CheckpointStore:
    """Directory-bound save/load facade used by the sweep orchestrator."""

    def __init__(self, directory: str | Path, fingerprint: str):
        self.directory = Path(directory)
        self.fingerprint = fingerprint

    def save(self, acc: LengthAccumulator) -> Path:
        return save(acc, self.directory, self.fingerprint)

    def load(self, s: int) -> LengthAccumulator | None:
        return load(self.directory, s, self.fingerprint)

    def write_timings(self) -> Path:
        return write_timings_csv(self.directory)
