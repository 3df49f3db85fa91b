"""Versioned single-file checkpoints.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then raw
little-endian float64 blocks at the offsets listed in the header manifest.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .encoder import Vocab
from .exceptions import CheckpointError, ContractError, IncompatibleCheckpointError
from .model import RelationNetwork
from .optim import AdamW

FORMAT = "irnet-checkpoint"
VERSION = 1


def _blocks(model: RelationNetwork, optimizer: AdamW | None):
    for name, p in model.named_parameters().items():
        yield "param", name, p.data
    if optimizer is not None:
        for name in model.named_parameters():
            if name in optimizer.state.m:
                yield "adam_m", name, optimizer.state.m[name]
                yield "adam_v", name, optimizer.state.v[name]


def save_checkpoint(path, model: RelationNetwork, optimizer: AdamW | None = None,
                    rng_state: dict | None = None, extra: dict | None = None) -> None:
    manifest, payload, offset = [], [], 0
    for kind, name, arr in _blocks(model, optimizer):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"kind": kind, "name": name, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.itos[len(Vocab.reserved):],
        "global_step": optimizer.state.step if optimizer is not None else 0,
        "rng_state": rng_state,
        "manifest": manifest,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in payload:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    """Parse a checkpoint into its header and ``{(kind, name): array}``."""
    blob = Path(path).read_bytes()
    try:
        (n,) = struct.unpack_from("<Q", blob, 0)
        header = json.loads(blob[8:8 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} file")
    if header.get("version") != VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint version {header.get('version')!r}, this build reads {VERSION}")
    data = blob[8 + n:]
    arrays = {}
    for entry in header["manifest"]:
        start, size = entry["offset"], entry["nbytes"]
        if start + size > len(data):
            raise CheckpointError(f"{path}: truncated block for {entry['name']!r}")
        arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=start)
        arrays[(entry["kind"], entry["name"])] = arr.reshape(entry["shape"]).astype(np.float64)
    return header, arrays


def load_into(path, model: RelationNetwork, optimizer: AdamW | None = None) -> dict:
    """Restore parameters (and optimizer moments) into existing objects; returns the header."""
    header, arrays = read_checkpoint(path)
    named = model.named_parameters()
    for name, p in named.items():
        arr = arrays.get(("param", name))
        if arr is None:
            raise ContractError(f"checkpoint has no parameter {name!r}")
        if arr.shape != p.shape:
            raise ContractError(f"parameter {name!r}: checkpoint shape {arr.shape} vs model {p.shape}")
    model.load_state_arrays({name: arrays[("param", name)] for name in named})
    if optimizer is not None:
        optimizer.state.m = {n: arrays[("adam_m", n)].copy() for n in named if ("adam_m", n) in arrays}
        optimizer.state.v = {n: arrays[("adam_v", n)].copy() for n in named if ("adam_v", n) in arrays}
        optimizer.state.step = int(header["global_step"])
    return header


def load_checkpoint(path) -> tuple[RelationNetwork, AdamW, dict]:
    """Rebuild model and optimizer from a checkpoint file."""
    header, _ = read_checkpoint(path)
    config = TrainConfig.from_dict(header["config"])
    model = RelationNetwork(Vocab(header["vocab"]), config)
    optimizer = AdamW(model.trainable_parameters(), config.lr, (config.beta1, config.beta2),
                      config.adam_eps, config.weight_decay)
    load_into(path, model, optimizer)
    return model, optimizer, header
