"""Flat binary checkpoints for base stacks and adapter sets.

Layout: an ascii magic line with a format version, an ascii byte count,
a JSON header, then every tensor's raw bytes back to back. The header
records name, shape, dtype and offset per tensor, so loading is a
single read plus views. No pickling; the container is portable and
diffable byte for byte.

Base checkpoints carry the freeze hash and loading re-verifies it, so a
corrupted or edited file fails loudly instead of producing an encoder
that quietly disagrees with its siblings.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, StateError
from .model import AdapterSet, BaseWeights, LowRankPair, ModelConfig
from .tensor import Tensor

_MAGIC = b"icarus-ckpt 1\n"


def _pack(kind: str, config: ModelConfig, meta: dict, named) -> bytes:
    entries = []
    payload = bytearray()
    for name, t in named:
        arr = np.ascontiguousarray(t.data)
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.str, "offset": len(payload),
                        "nbytes": arr.nbytes})
        payload += arr.tobytes()
    header = json.dumps({"kind": kind, "config": json.loads(config.canonical_json()),
                         "meta": meta, "tensors": entries},
                        sort_keys=True).encode()
    return _MAGIC + f"{len(header)}\n".encode() + header + bytes(payload)


def _unpack(blob: bytes, expect_kind: str) -> tuple[ModelConfig, dict, dict]:
    if not blob.startswith(b"icarus-ckpt "):
        raise ConfigError("not a checkpoint container")
    if not blob.startswith(_MAGIC):
        version = blob.split(b"\n", 1)[0].decode("ascii", "replace")
        raise ConfigError(f"unsupported checkpoint format {version!r}")
    rest = blob[len(_MAGIC):]
    length_line, rest = rest.split(b"\n", 1)
    header_len = int(length_line)
    header = json.loads(rest[:header_len])
    payload = rest[header_len:]
    if header["kind"] != expect_kind:
        raise ConfigError(f"checkpoint holds {header['kind']!r}, expected {expect_kind!r}")
    config = ModelConfig(**header["config"])
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ConfigError(f"tensor {e['name']!r} truncated")
        tensors[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return config, header["meta"], tensors


def save_base(path: str | Path, base: BaseWeights) -> None:
    meta = {"freeze_hash": base.freeze_hash}
    Path(path).write_bytes(_pack("base", base.config, meta, base.named()))


def load_base(path: str | Path) -> BaseWeights:
    config, meta, tensors = _unpack(Path(path).read_bytes(), "base")
    layers = []
    for i in range(config.num_layers):
        prefix = f"layers.{i}."
        layers.append({name[len(prefix):]: arr for name, arr in tensors.items()
                       if name.startswith(prefix)})
    base = BaseWeights(config, tensors["embed"], layers,
                       tensors["final_gain"], tensors["lm_head"])
    if base.freeze_hash != meta["freeze_hash"]:
        raise StateError("checkpoint bytes do not reproduce the stored freeze hash")
    return base


def save_adapters(path: str | Path, adapters: AdapterSet) -> None:
    meta = {"rank": adapters.rank, "alpha": adapters.alpha,
            "targets": list(adapters.targets), "task": adapters.task}
    Path(path).write_bytes(_pack("adapters", adapters.config, meta,
                                 adapters.named_params()))


def load_adapters(path: str | Path) -> AdapterSet:
    config, meta, tensors = _unpack(Path(path).read_bytes(), "adapters")
    targets = tuple(meta["targets"])
    layers: list[dict[str, LowRankPair]] = []
    for i in range(config.num_layers):
        per = {}
        for t in targets:
            per[t] = LowRankPair(Tensor(tensors[f"layers.{i}.{t}.a"], trainable=True),
                                 Tensor(tensors[f"layers.{i}.{t}.b"], trainable=True))
        layers.append(per)
    return AdapterSet(config, meta["rank"], meta["alpha"], targets, layers,
                      task=meta["task"])
