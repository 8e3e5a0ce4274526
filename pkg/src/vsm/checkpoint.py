"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"VSMC" | u32 version | u32 entry count | entries...
    entry: u32 name length | UTF-8 name | u8 dtype tag | u8 rank | u64 extents[rank] | payload

Dtype tags: 0 = f32, 1 = f64, 2 = i64, 3 = UTF-8 bytes (the JSON metadata blob).
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VSMC"
VERSION = 1
META_ENTRY = "meta.json"

_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    """File is not a readable checkpoint of a supported version."""


def _write_entry(buf, name: str, tag: int, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<BB", tag, array.ndim))
    buf.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    buf.write(np.ascontiguousarray(array, dtype=_TAGS[tag]).tobytes())


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    entries = list(arrays.items())
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries) + (meta is not None)))
    for name, array in entries:
        array = np.asarray(array)
        if array.dtype not in _TAG_OF:
            if np.issubdtype(array.dtype, np.integer) or array.dtype == bool:
                array = array.astype(np.int64)
            else:
                raise CheckpointError(f"entry {name!r} has unsupported dtype {array.dtype}")
        _write_entry(buf, name, _TAG_OF[array.dtype], array)
    if meta is not None:
        blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        _write_entry(buf, META_ENTRY, 3, blob)
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    arrays, meta = {}, None
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("entry name is not valid UTF-8") from exc
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _TAGS:
            raise CheckpointError(f"entry {name!r} has unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _TAGS[tag]
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = np.frombuffer(take(size * dtype.itemsize), dtype=dtype).reshape(shape)
        if tag == 3:
            if name != META_ENTRY:
                raise CheckpointError(f"unexpected text entry {name!r}")
            try:
                meta = json.loads(payload.tobytes().decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise CheckpointError("metadata blob is not valid JSON") from exc
        else:
            arrays[name] = payload.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(view):
        raise CheckpointError("trailing bytes after the last entry")
    return arrays, meta


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically (temporary file, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict | None]:
    return loads(Path(path).read_bytes())


# learner state -----------------------------------------------------------------


def learner_state(learner) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    for name, p in learner.nets.named_parameters().items():
        arrays[f"param/{name}"] = p.data
    for name, b in learner.nets.named_buffers().items():
        arrays[f"buffer/{name}"] = b
    for name, value in learner.optimizer.state_arrays().items():
        arrays[f"adam/{name}"] = value
    if learner.store is not None:
        for name, value in learner.store.state_arrays().items():
            arrays[f"memory/{name}"] = value
    meta = {
        "train": learner.config.to_dict(),
        "network": learner.network_config.to_dict(),
        "step": learner.step,
        "episodes_seen": learner.episodes_seen,
        # episode RNGs derive from (seed, stream, index); the counter is the whole RNG state
        "rng": {"seed": learner.config.seed, "eval_seed": learner.config.eval_seed, "next_episode": learner.episodes_seen},
    }
    return arrays, meta


def save_learner(learner, path) -> None:
    arrays, meta = learner_state(learner)
    save(path, arrays, meta)


def restore_learner(arrays: dict[str, np.ndarray], meta: dict):
    from .networks import EncoderConfig, NetworkConfig
    from .trainer import Learner, TrainConfig

    if meta is None:
        raise CheckpointError("checkpoint has no metadata entry")
    try:
        config = TrainConfig(**meta["train"])
        net = dict(meta["network"])
        net["encoder"] = EncoderConfig(**net["encoder"])
        network_config = NetworkConfig(**net)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint metadata does not describe a model: {exc}") from exc
    learner = Learner(config, network_config)
    try:
        for name, p in learner.nets.named_parameters().items():
            _assign(p.data, arrays[f"param/{name}"], name)
        for name, b in learner.nets.named_buffers().items():
            _assign(b, arrays[f"buffer/{name}"], name)
        learner.optimizer.load_state_arrays(
            {k[len("adam/"):]: v for k, v in arrays.items() if k.startswith("adam/")}
        )
        if learner.store is not None:
            learner.store.load_state_arrays(
                {k[len("memory/"):]: v for k, v in arrays.items() if k.startswith("memory/")}
            )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing entry {exc}") from exc
    learner.step = int(meta["step"])
    learner.episodes_seen = int(meta["episodes_seen"])
    return learner


def _assign(target: np.ndarray, value: np.ndarray, name: str) -> None:
    if target.shape != value.shape:
        raise CheckpointError(f"entry {name!r} has shape {value.shape}, model expects {target.shape}")
    target[...] = value


def load_learner(path):
    arrays, meta = load(path)
    return restore_learner(arrays, meta)
