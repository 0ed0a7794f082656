"""Binary checkpoint files.

Layout: ``b"SNNCKPT1"``, format version (uint32 LE), metadata length
(uint32 LE), UTF-8 JSON metadata, then every tensor as raw little-endian
float64 in the order listed in ``metadata["tensors"]``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import Network, NetworkSpec
from .trainer import STREAM_INIT
from .data import make_rng

MAGIC = b"SNNCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: dict
    epoch: int
    rng_state: dict
    tensors: dict  # name -> ndarray, in declaration order
    extra: dict

    def build_network(self) -> Network:
        net = Network(NetworkSpec.from_dict(self.spec), make_rng(self.rng_state.get("seed", 0), STREAM_INIT))
        self.restore(net)
        return net

    def restore(self, net: Network) -> None:
        targets = _targets(net)
        missing = [name for name in targets if name not in self.tensors]
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors {missing[:5]}")
        for name, (arr, _) in targets.items():
            src = self.tensors[name]
            if src.shape != arr.shape:
                raise CheckpointError(f"{name}: shape {list(src.shape)} != network {list(arr.shape)}")
        for name, (arr, _) in targets.items():
            arr[...] = self.tensors[name]


def _targets(net: Network) -> dict:
    out = {}
    for p in net.parameters():
        out[p.name] = (p.data, "param")
    for p in net.parameters():
        out[f"{p.name}#momentum"] = (p.momentum, "momentum")
    for name, buf in net.buffers().items():
        out[name] = (buf, "buffer")
    return out


def save(path, net: Network, epoch: int = 0, seed: int = 0, extra: dict | None = None) -> None:
    targets = _targets(net)
    meta = {
        "spec": net.spec.to_dict(),
        "epoch": int(epoch),
        "rng_state": {"bit_generator": "PCG64", "seed": int(seed), "epoch": int(epoch)},
        "tensors": [{"name": n, "shape": list(a.shape), "kind": k} for n, (a, k) in targets.items()],
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a, _ in targets.values()]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: expected magic {MAGIC!r}, found {raw[:8]!r}")
    version, meta_len = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: incompatible format version, expected {VERSION}, found {version}")
    if len(raw) < 16 + meta_len:
        raise CheckpointError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(raw[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from None
    offset = 16 + meta_len
    need = sum(int(np.prod(t["shape"])) for t in meta["tensors"]) * 8
    if len(raw) - offset != need:
        raise CheckpointError(f"{path}: tensor payload is {len(raw) - offset} bytes, expected {need}")
    tensors = {}
    for entry in meta["tensors"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float64)
        offset += count * 8
    return Checkpoint(meta["spec"], meta["epoch"], meta["rng_state"], tensors, meta.get("extra", {}))
