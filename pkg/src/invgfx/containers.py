"""File containers: float grids, PGM/PPM import, and training checkpoints.

Float-grid layout (little endian):
    magic "FGRD" | u8 version | u8 dtype (1 = float64) | u8 ndim |
    ndim x u32 extents | row-major float64 payload

Checkpoint layout (little endian):
    magic "ICKP" | u8 version | u64 header length | UTF-8 JSON header |
    concatenated float64 tensor payloads in header order
The JSON header carries iteration, train-state, RNG states, optimizer
moments metadata, a provenance config dict, and the tensor manifest.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import CheckpointVersionError, DomainError

FGRID_MAGIC = b"FGRD"
FGRID_VERSION = 1
CKPT_MAGIC = b"ICKP"
CKPT_VERSION = 1


def save_fgrid(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    if arr.ndim < 1 or arr.ndim > 255:
        raise DomainError("unsupported rank %d" % arr.ndim)
    with open(path, "wb") as fh:
        fh.write(FGRID_MAGIC)
        fh.write(struct.pack("<BBB", FGRID_VERSION, 1, arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(arr.tobytes(order="C"))


def load_fgrid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FGRID_MAGIC:
            raise DomainError("%s is not a float-grid container" % path)
        version, dtype_code, ndim = struct.unpack("<BBB", fh.read(3))
        if version != FGRID_VERSION:
            raise CheckpointVersionError("float-grid version %d unsupported" % version)
        if dtype_code != 1:
            raise DomainError("unknown dtype code %d" % dtype_code)
        shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise DomainError("truncated float-grid payload in %s" % path)
        return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


# ---------------------------------------------------------------------------
# PGM / PPM import (P2/P5 grayscale, P3/P6 color), values scaled to [0, 1]


def load_pnm(path) -> np.ndarray:
    """Read a PGM/PPM image as (c, h, w) float64 in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = _pnm_tokens(data)
    magic = next(tokens)
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DomainError("unsupported PNM magic %r" % magic)
    w = int(next(tokens))
    h = int(next(tokens))
    maxval = int(next(tokens))
    if maxval <= 0 or maxval > 65535:
        raise DomainError("bad PNM maxval %d" % maxval)
    channels = 3 if magic in (b"P3", b"P6") else 1
    n = w * h * channels
    if magic in (b"P2", b"P3"):
        values = np.array([int(next(tokens)) for _ in range(n)], dtype=np.float64)
    else:
        # Binary payload starts after exactly one whitespace past maxval.
        offset = _pnm_binary_offset(data)
        if maxval < 256:
            raw = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset)
        else:
            raw = np.frombuffer(data, dtype=">u2", count=n, offset=offset)
        values = raw.astype(np.float64)
    img = values.reshape(h, w, channels) / float(maxval)
    return np.moveaxis(img, 2, 0).copy()


def save_pnm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a (c, h, w) [0, 1] image as binary PGM (c=1) or PPM (c=3)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    if c not in (1, 3):
        raise DomainError("PNM export supports 1 or 3 channels, got %d" % c)
    magic = b"P5" if c == 1 else b"P6"
    quant = np.clip(np.rint(arr * maxval), 0, maxval).astype(np.uint8)
    flat = np.moveaxis(quant, 0, 2).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(flat)


def _pnm_tokens(data: bytes):
    i = 0
    n = len(data)
    while i < n:
        ch = data[i : i + 1]
        if ch.isspace():
            i += 1
            continue
        if ch == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace():
            j += 1
        yield data[i:j]
        i = j


def _pnm_binary_offset(data: bytes) -> int:
    # Skip three header tokens (magic handled by caller) + single whitespace.
    seen = 0
    i = 0
    n = len(data)
    while i < n and seen < 4:
        ch = data[i : i + 1]
        if ch == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if ch.isspace():
            i += 1
            continue
        while i < n and not data[i : i + 1].isspace():
            i += 1
        seen += 1
        if seen == 4:
            return i + 1
    raise DomainError("malformed PNM header")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: Dict[str, np.ndarray], iteration: int,
                    state_json: str, rng_states: Dict[str, dict],
                    config: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    names = list(tensors.keys())
    header = {
        "version": CKPT_VERSION,
        "iteration": int(iteration),
        "state": json.loads(state_json) if state_json else None,
        "rng": rng_states,
        "config": config or {},
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(np.asarray(tensors[n]).shape)}
                    for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<B", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype=np.float64).tobytes("C"))


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise DomainError("%s is not a checkpoint container" % path)
        (version,) = struct.unpack("<B", fh.read(1))
        if version != CKPT_VERSION:
            raise CheckpointVersionError(
                "checkpoint version %d unsupported (expected %d)"
                % (version, CKPT_VERSION))
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for meta in header["tensors"]:
            shape = tuple(int(s) for s in meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise DomainError("truncated checkpoint payload in %s" % path)
            tensors[meta["name"]] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return header, tensors
