"""Self-describing checkpoint container.

Layout: an 8-byte magic, a little-endian u64 header length, a JSON header
(config echo, training progress, tensor table) and the raw little-endian
float64 values of every tensor in table order.  Writing the same contents
twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .core_math import AdamState
from .model import ModelParams

MAGIC = b"IDCKPT01"


@dataclass
class Checkpoint:
    task: str
    config: dict
    params: ModelParams
    epoch: int = 0
    losses: list[float] = field(default_factory=list)
    adam: AdamState | None = None


def _header_and_blobs(ck: Checkpoint) -> tuple[dict, list[np.ndarray]]:
    arrays = {n: t.values for n, t in ck.params.named_tensors().items()}
    adam_meta = None
    if ck.adam is not None:
        a = ck.adam
        adam_meta = {"t": a.t, "alpha": a.alpha, "beta1": a.beta1, "beta2": a.beta2,
                     "epsilon": a.epsilon}
        for n in sorted(a.m):
            arrays[f"adam.m/{n}"] = a.m[n]
            arrays[f"adam.v/{n}"] = a.v[n]
    table, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
        blobs.append(a)
    header = {"format": 1, "task": ck.task, "config": ck.config, "epoch": ck.epoch,
              "losses": ck.losses, "adam": adam_meta, "dims": ck.params.dims(),
              "tensors": table}
    return header, blobs


def dumps(ck: Checkpoint) -> bytes:
    header, blobs = _header_and_blobs(ck)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(b.tobytes() for b in blobs)


def save(ck: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ck))


def loads(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    body = memoryview(data)[16 + n:]
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    d = header["dims"]
    params = ModelParams.init(d["vocab_size"], d["embed_dim"], d["char_embed_dim"],
                              d["hidden_dim"], char_vocab_size=d["char_vocab_size"])
    params.load_arrays(arrays)
    adam = None
    if header["adam"] is not None:
        a = header["adam"]
        adam = AdamState(a["alpha"], a["beta1"], a["beta2"], a["epsilon"], a["t"])
        for name in arrays:
            if name.startswith("adam.m/"):
                key = name[len("adam.m/"):]
                adam.m[key] = arrays[name].copy()
                adam.v[key] = arrays[f"adam.v/{key}"].copy()
    return Checkpoint(header["task"], header["config"], params, header["epoch"],
                      list(header["losses"]), adam)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
