"""Binary checkpoint format.

Layout: magic b"OTAC", u32 version, u32 header length, UTF-8 JSON header,
then a single raw little-endian float64 blob. The header records the
architecture, tensor names/shapes/offsets into the blob, an optional RNG
state, and free-form metadata (e.g. backbone_only). Raw f64 bytes make the
round trip bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import StorageError
from .layers import ArchSpec, Network, build_network
from .tensor import Tensor

MAGIC = b"OTAC"
VERSION = 1


def _write(path, arch: ArchSpec, tensors: list[Tensor], meta: dict) -> None:
    entries = []
    offset = 0
    blobs = []
    for t in tensors:
        if not t.name:
            raise StorageError("cannot checkpoint an unnamed tensor")
        entries.append({"name": t.name, "shape": list(t.shape), "offset": offset})
        raw = t.data.astype("<f8").tobytes()
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": VERSION,
        "arch": arch.to_dict(),
        "tensors": entries,
        **meta,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", VERSION, len(payload)))
            f.write(payload)
            for raw in blobs:
                f.write(raw)
    except OSError as e:
        raise StorageError(f"cannot write checkpoint {path}: {e}") from e


def _read(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise StorageError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise StorageError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StorageError(f"{path}: corrupt checkpoint header: {e}") from e
    blob = raw[12 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * n
        if end > len(blob):
            raise StorageError(f"{path}: truncated checkpoint data")
        tensors[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).copy()
    return header, tensors


def save_checkpoint(net: Network, path, rng_state: dict | None = None,
                    meta: dict | None = None) -> None:
    extra = dict(meta or {})
    if rng_state is not None:
        extra["rng_state"] = json.loads(json.dumps(rng_state, default=int))
    _write(path, net.arch, net.all_tensors(), extra)


def load_checkpoint(path, expect_arch: ArchSpec | None = None) -> tuple[Network, dict]:
    """Rebuild a Network from a checkpoint; returns (net, header)."""
    header, tensors = _read(path)
    arch = ArchSpec.from_dict(header["arch"])
    if expect_arch is not None and arch != expect_arch:
        raise StorageError(
            f"architecture mismatch: checkpoint has {arch}, expected {expect_arch}"
        )
    if header.get("backbone_only"):
        raise StorageError(f"{path}: backbone-only checkpoint, expected a full network")
    net = build_network(arch, np.random.default_rng(0))
    _load_tensors(net.all_tensors(), tensors, path)
    net.eval()
    return net, header


def save_backbone(arch: ArchSpec, tensors: list[Tensor], path, meta: dict | None = None) -> None:
    extra = {"backbone_only": True, **(meta or {})}
    _write(path, arch, tensors, extra)


def load_backbone(path) -> tuple[ArchSpec, dict[str, np.ndarray], dict]:
    header, tensors = _read(path)
    if not header.get("backbone_only"):
        raise StorageError(f"{path}: expected a backbone-only checkpoint")
    return ArchSpec.from_dict(header["arch"]), tensors, header


def _load_tensors(targets: list[Tensor], source: dict[str, np.ndarray], path) -> None:
    for t in targets:
        if t.name not in source:
            raise StorageError(f"{path}: missing tensor {t.name!r}")
        data = source[t.name]
        if data.shape != t.shape:
            raise StorageError(
                f"{path}: architecture mismatch for {t.name!r}: {data.shape} vs {t.shape}"
            )
        t.data = data
