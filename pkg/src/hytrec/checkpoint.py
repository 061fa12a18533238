"""Checkpoint container: text manifest followed by raw little-endian float64 payload.

Layout::

    hytrec-checkpoint 1
    meta.<key> = <json value>
    tensor <name> = shape=<d0>x<d1>... offset=<byte offset> count=<elements>
    payload_bytes = <n>
    end
    <payload>
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "hytrec-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    lines = [f"{MAGIC} {VERSION}"]
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k} = {json.dumps(v, sort_keys=True)}")
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        if any(c in name for c in " =\n"):
            raise CheckpointError(f"invalid tensor name {name!r}")
        a = np.asarray(arr, dtype="<f8", order="C")
        shape = "x".join(str(s) for s in a.shape) or "scalar"
        lines.append(f"tensor {name} = shape={shape} offset={offset} count={a.size}")
        chunks.append(a.tobytes())
        offset += a.nbytes
    lines.append(f"payload_bytes = {offset}")
    lines.append("end")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if end < 0:
        raise CheckpointError(f"{path}: manifest terminator not found")
    header = raw[:end].decode("utf-8").split("\n")
    payload = raw[end + len(b"\nend\n"):]
    magic = header[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(magic[1]) != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {magic[1]}")
    sizes = [ln.partition(" = ")[2] for ln in header[1:] if ln.startswith("payload_bytes = ")]
    if len(sizes) != 1:
        raise CheckpointError(f"{path}: manifest lacks a single payload_bytes entry")
    if int(sizes[0]) != len(payload):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest says {sizes[0]}")
    meta, tensors = {}, {}
    for line in header[1:]:
        key, _, value = line.partition(" = ")
        if key.startswith("meta."):
            meta[key[5:]] = json.loads(value)
        elif key.startswith("tensor "):
            name = key[7:]
            fields = dict(f.split("=", 1) for f in value.split())
            shape = () if fields["shape"] == "scalar" else tuple(int(s) for s in fields["shape"].split("x"))
            off, count = int(fields["offset"]), int(fields["count"])
            if off < 0 or off + 8 * count > len(payload) or int(np.prod(shape)) != count:
                raise CheckpointError(f"{path}: tensor {name} lies outside the payload or has a bad shape")
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off)
            tensors[name] = arr.reshape(shape).astype(np.float64)
        elif key == "payload_bytes":
            pass
        else:
            raise CheckpointError(f"{path}: unrecognised manifest line {line!r}")
    return tensors, meta
