"""Checkpoints: a JSON manifest plus one little-endian float32 payload.

The manifest lists every tensor (name, shape, byte offset) in payload order
along with metadata (network config, epoch, step). Parameters, probe weights
and optimizer momentum all live in the same payload under the prefixes
``net/``, ``probe/`` and ``opt/``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import NetConfig
from .net import ParamStore

MANIFEST = "manifest.json"
PAYLOAD = "weights.f32"
FORMAT = "iitrack-checkpoint/1"


@dataclass
class Checkpoint:
    net: NetConfig
    params: ParamStore
    probes: ParamStore
    epoch: int = 0
    step: int = 0
    probes_trained: bool = False
    meta: dict = field(default_factory=dict)


def _tensors(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = []
    for prefix, store in (("net/", ck.params), ("probe/", ck.probes)):
        for name in store.names():
            out.append((prefix + name, store[name].data))
    for prefix, store in (("opt/net/", ck.params), ("opt/probe/", ck.probes)):
        for name in sorted(store.state):
            out.append((prefix + name, store.state[name]))
    return out


def save_checkpoint(ck: Checkpoint, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, arr in _tensors(ck):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "net": asdict(ck.net), "epoch": int(ck.epoch), "step": int(ck.step),
                "probes_trained": bool(ck.probes_trained), "meta": ck.meta, "tensors": entries,
                "payload_bytes": offset}
    (directory / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    (directory / PAYLOAD).write_bytes(b"".join(blobs))


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"not a checkpoint: format {manifest.get('format')!r}")
    payload = (directory / PAYLOAD).read_bytes()
    if len(payload) != manifest["payload_bytes"]:
        raise ValueError("payload size does not match the manifest")
    net_fields = dict(manifest["net"])
    net = NetConfig(**net_fields)
    params, probes = ParamStore(), ParamStore()
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"]).astype(np.float64)
        arr = arr.reshape(e["shape"])
        name = e["name"]
        if name.startswith("net/"):
            params.add(name[4:], arr)
        elif name.startswith("probe/"):
            probes.add(name[6:], arr)
        elif name.startswith("opt/net/"):
            params.state[name[8:]] = arr
        elif name.startswith("opt/probe/"):
            probes.state[name[10:]] = arr
        else:
            raise ValueError(f"unknown tensor {name!r}")
    return Checkpoint(net, params, probes, int(manifest["epoch"]), int(manifest["step"]),
                      bool(manifest["probes_trained"]), dict(manifest.get("meta", {})))
