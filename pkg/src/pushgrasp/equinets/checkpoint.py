"""Network parameter checkpoints.

Layout (little-endian)::

    b"PGCK"              magic
    u16                  format version
    u32                  manifest length L
    L bytes              UTF-8 JSON manifest (sorted keys)
    raw arrays           each parameter in manifest order, C order

The manifest carries the network config, dtype, and for every parameter its
name, shape, byte offset (relative to the end of the manifest) and size.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .nets import NetConfig, build_net

MAGIC = b"PGCK"
VERSION = 1
_DTYPES = {"float32": ("<f4", torch.float32), "float64": ("<f8", torch.float64)}


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(net, extra: dict | None = None) -> bytes:
    state = net.state_dict()
    dtype = next(iter(state.values())).dtype
    dname = "float64" if dtype == torch.float64 else "float32"
    code = _DTYPES[dname][0]
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        raw = np.ascontiguousarray(t.detach().cpu().numpy().astype(code)).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "config": net.config.to_dict(),
        "dtype": dname,
        "params": entries,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(head)) + head + b"".join(blobs)


def read_manifest(data: bytes) -> tuple[dict, int]:
    if len(data) < 10 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(data) < 10 + n:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(data[10:10 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    return manifest, 10 + n


def net_from_bytes(data: bytes):
    manifest, base = read_manifest(data)
    code, tdtype = _DTYPES[manifest["dtype"]]
    net = build_net(NetConfig.from_dict(manifest["config"])).to(tdtype)
    state = {}
    for e in manifest["params"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise CheckpointError(f"truncated array {e['name']}")
        arr = np.frombuffer(data, dtype=code, count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(str(exc)) from exc
    return net


def save_checkpoint(net, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, extra))


def load_checkpoint(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return net_from_bytes(p.read_bytes())


def checkpoint_extra(path) -> dict:
    return read_manifest(Path(path).read_bytes())[0]["extra"]
