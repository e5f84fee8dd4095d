"""Binary containers and file IO shared across the toolkit.

Formats:
  WAV   -- RIFF PCM, 16-bit signed little-endian, mono.
  F32M  -- magic "F32M", u32 rows, u32 cols (little-endian), row-major float32.
  LIPV  -- magic "LIPV", u32 frame_count, u32 height, u32 width, then
           frame_count * height * width grayscale bytes.
  JSONL -- one JSON object per line (manifests, landmarks).
  CKPT  -- one-line JSON header + "\\n" + concatenated F32M blocks, one per
           named parameter, in header index order.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import wave
from typing import Iterable, Iterator

import numpy as np

F32M_MAGIC = b"F32M"
LIPV_MAGIC = b"LIPV"


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write-temp-then-rename so readers never see a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_wav(path: str, samples: np.ndarray, sample_rate: int) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM mono."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with wave.open(path, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str) -> tuple[np.ndarray, int]:
    """Read mono 16-bit PCM; returns (float64 samples in [-1, 1], sample_rate)."""
    with wave.open(path, "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def f32m_bytes(matrix: np.ndarray) -> bytes:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim == 1:
        mat = mat.reshape(-1, 1)
    if mat.ndim != 2:
        raise ValueError(f"F32M stores 2-D matrices, got shape {matrix.shape}")
    rows, cols = mat.shape
    return F32M_MAGIC + struct.pack("<II", rows, cols) + mat.tobytes()


def write_f32m(path: str, matrix: np.ndarray) -> None:
    atomic_write_bytes(path, f32m_bytes(matrix))


def parse_f32m(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one F32M block starting at `offset`; returns (matrix, next_offset)."""
    if blob[offset : offset + 4] != F32M_MAGIC:
        raise ValueError("bad F32M magic")
    rows, cols = struct.unpack_from("<II", blob, offset + 4)
    start = offset + 12
    end = start + rows * cols * 4
    if end > len(blob):
        raise ValueError("truncated F32M payload")
    mat = np.frombuffer(blob[start:end], dtype="<f4").reshape(rows, cols)
    return mat.astype(np.float32), end


def read_f32m(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    mat, end = parse_f32m(blob)
    if end != len(blob):
        raise ValueError(f"{path}: trailing bytes after F32M payload")
    return mat


def write_lipv(path: str, frames: np.ndarray) -> None:
    """Write grayscale video frames (N, H, W) uint8."""
    arr = np.ascontiguousarray(frames, dtype=np.uint8)
    if arr.ndim != 3:
        raise ValueError(f"LIPV stores (frames, height, width), got {frames.shape}")
    n, h, w = arr.shape
    atomic_write_bytes(path, LIPV_MAGIC + struct.pack("<III", n, h, w) + arr.tobytes())


def read_lipv(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != LIPV_MAGIC:
        raise ValueError(f"{path}: bad LIPV magic")
    n, h, w = struct.unpack_from("<III", blob, 4)
    payload = blob[16:]
    if len(payload) != n * h * w:
        raise ValueError(f"{path}: LIPV payload size mismatch")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w).copy()


def write_jsonl(path: str, rows: Iterable[dict]) -> None:
    lines = [json.dumps(row, sort_keys=False) for row in rows]
    payload = ("\n".join(lines) + "\n") if lines else ""
    atomic_write_bytes(path, payload.encode("utf-8"))


def read_jsonl(path: str) -> Iterator[tuple[int, dict]]:
    """Yield (1-based line number, parsed object); raises on malformed lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON line: {exc}") from exc
            if not isinstance(obj, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def save_checkpoint(path: str, header: dict, params: dict[str, np.ndarray]) -> None:
    """Persist named float arrays with a JSON header (config, step, index)."""
    index = []
    blocks = []
    for name, value in params.items():
        arr = np.asarray(value, dtype=np.float32)
        index.append({"name": name, "shape": list(arr.shape)})
        flat = arr.reshape(arr.shape[0] if arr.ndim >= 1 and arr.size else 1, -1)
        blocks.append(f32m_bytes(flat))
    full_header = dict(header)
    full_header["params"] = index
    payload = json.dumps(full_header, sort_keys=False).encode("utf-8") + b"\n"
    atomic_write_bytes(path, payload + b"".join(blocks))


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(blob[:newline].decode("utf-8"))
    params: dict[str, np.ndarray] = {}
    offset = newline + 1
    for entry in header.get("params", []):
        mat, offset = parse_f32m(blob, offset)
        shape = tuple(entry["shape"])
        params[entry["name"]] = mat.reshape(shape) if shape else mat.reshape(())
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after parameter blocks")
    return header, params
