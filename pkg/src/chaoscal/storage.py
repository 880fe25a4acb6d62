"""On-disk formats: trajectory binaries with JSON sidecars, and model checkpoints.

Trajectory binary layout (little-endian)::

    8 bytes   magic  b"EETRJ001"
    8 bytes   uint64 T
    8 bytes   uint64 d
    T*d*8     float64, row-major

Checkpoint binary layout (little-endian)::

    8 bytes   magic  b"EECKPT01"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header (tensor table, specs, optimizer/epoch metadata)
    ...       float64 tensor payloads in header order
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .dynamics import Trajectory

TRAJ_MAGIC = b"EETRJ001"
CKPT_MAGIC = b"EECKPT01"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_trajectory(path, traj: Trajectory, filtered: bool = True) -> None:
    path = Path(path)
    states = np.ascontiguousarray(traj.states, dtype="<f8")
    T, d = states.shape
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        fh.write(struct.pack("<QQ", T, d))
        fh.write(states.tobytes(order="C"))
    meta = traj.meta
    sidecar = {
        "system": meta.get("system"),
        "params": [float(x) for x in meta.get("params", [])],
        "dt": float(traj.dt),
        "seed": meta.get("seed"),
        "T": int(T),
        "d": int(d),
        "filtered": bool(filtered),
    }
    extra = {k: v for k, v in meta.items() if k not in sidecar}
    if extra:
        sidecar["extra"] = extra
    write_json(sidecar_path(path), sidecar)


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != TRAJ_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    T, d = struct.unpack("<QQ", raw[8:24])
    body = raw[24:]
    if len(body) != T * d * 8:
        raise FormatError(f"{path}: expected {T * d * 8} payload bytes, found {len(body)}")
    states = np.frombuffer(body, dtype="<f8").reshape(T, d).astype(float)
    meta: dict = {}
    dt = 1.0
    sc = sidecar_path(path)
    if sc.exists():
        side = read_json(sc)
        dt = side["dt"]
        meta = {k: side[k] for k in ("system", "params", "seed", "filtered") if k in side}
        meta.update(side.get("extra", {}))
    return Trajectory(states, dt, meta)


def write_checkpoint(path, tensors: dict[str, np.ndarray], header: dict) -> dict:
    """Write named float64 arrays plus a JSON header; returns the manifest dict."""
    names = sorted(tensors)
    table = []
    offset = 0
    for name in names:
        arr = np.array(tensors[name], dtype="<f8", order="C")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    head = {"version": CKPT_VERSION, "tensors": table, **header}
    hbytes = canonical_json(head).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for name in names:
            fh.write(np.array(tensors[name], dtype="<f8", order="C").tobytes(order="C"))
    manifest = {
        "version": CKPT_VERSION,
        "file": Path(path).name,
        "shapes": {t["name"]: t["shape"] for t in table},
        "config_hash": header.get("config_hash"),
        "epoch": header.get("epoch"),
    }
    write_json(Path(path).with_suffix(".manifest.json"), manifest)
    return manifest


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    head = json.loads(raw[16 : 16 + hlen].decode())
    if head.get("version") != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {head.get('version')}")
    base = 16 + hlen
    tensors = {}
    for t in head["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        start = base + t["offset"]
        arr = np.frombuffer(raw[start : start + 8 * n], dtype="<f8").astype(float)
        tensors[t["name"]] = arr.reshape(t["shape"])
    return tensors, head
