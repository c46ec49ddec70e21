"""Checkpoint files: a JSON manifest plus a raw little-endian float32 blob.

A checkpoint is two sibling files, ``<base>.json`` and ``<base>.bin``. The
manifest carries the model config, a name -> (shape, byte offset) table, the
training step, and a metrics snapshot; the blob is the tensors' float32 bytes
laid end to end in table order. Unknown manifest fields are ignored so old
readers keep working; a missing model tensor is fatal.

Training state (optimizer moments, batch-slot carries, counters) rides along
as extra named tensors plus a ``train_state`` manifest section, all optional.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ModelParams, init_params
from .tensors import Tensor

FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype("<f4")


def _tensor_table(named: dict) -> tuple:
    table = {}
    offset = 0
    for name in sorted(named):
        arr = named[name]
        table[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size * BLOB_DTYPE.itemsize
    return table, offset


def save_checkpoint(base_path, params: ModelParams, step: int = 0,
                    metrics: dict | None = None, extras: dict | None = None,
                    train_state: dict | None = None) -> str:
    """Write ``<base>.json`` + ``<base>.bin``. ``extras`` maps extra tensor
    names to float arrays; ``train_state`` is a JSON-serializable section."""
    base = os.fspath(base_path)
    named = {name: np.asarray(t.data, dtype=np.float32)
             for name, t in params.items()}
    for name, arr in (extras or {}).items():
        if name in named:
            raise CheckpointError(f"extra tensor {name!r} collides with a model tensor")
        named[name] = np.asarray(arr, dtype=np.float32)
    table, total = _tensor_table(named)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": params.config.to_dict(),
        "step": int(step),
        "metrics": metrics or {},
        "tensors": table,
        "blob_bytes": total,
    }
    if train_state is not None:
        manifest["train_state"] = train_state
    os.makedirs(os.path.dirname(base) or ".", exist_ok=True)
    blob = bytearray(total)
    for name, entry in table.items():
        raw = np.ascontiguousarray(named[name], dtype=BLOB_DTYPE).tobytes()
        blob[entry["offset"]: entry["offset"] + len(raw)] = raw
    with open(base + ".bin", "wb") as f:
        f.write(bytes(blob))
    with open(base + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return base


def read_manifest(base_path) -> dict:
    base = os.fspath(base_path)
    try:
        with open(base + ".json") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"no manifest at {base}.json")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable manifest {base}.json: {e}")
    for key in ("format_version", "model_config", "tensors"):
        if key not in manifest:
            raise CheckpointError(f"manifest missing required field {key!r}")
    if manifest["format_version"] > FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {manifest['format_version']} is newer than "
            f"this reader ({FORMAT_VERSION})")
    return manifest


def _validate_table(manifest: dict, blob_len: int):
    entries = sorted(manifest["tensors"].items(), key=lambda kv: kv[1]["offset"])
    expected = 0
    for name, entry in entries:
        if entry["offset"] != expected:
            raise CheckpointError(
                f"tensor table corrupt at {name!r}: offset {entry['offset']}, "
                f"expected {expected}")
        size = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        expected += size * BLOB_DTYPE.itemsize
    if expected != blob_len:
        raise CheckpointError(
            f"blob length {blob_len} does not match table total {expected}")


def load_tensors(base_path) -> tuple:
    """All named tensors from a checkpoint: (manifest, {name: float32 array})."""
    base = os.fspath(base_path)
    manifest = read_manifest(base)
    try:
        with open(base + ".bin", "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"no blob at {base}.bin")
    _validate_table(manifest, len(blob))
    out = {}
    for name, entry in manifest["tensors"].items():
        size = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        start = entry["offset"]
        raw = blob[start: start + size * BLOB_DTYPE.itemsize]
        out[name] = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(entry["shape"]).copy()
    return manifest, out


def load_checkpoint(base_path) -> tuple:
    """(ModelParams, manifest). Extra tensors are ignored here; a missing
    model tensor is a hard error."""
    manifest, named = load_tensors(base_path)
    config = ModelConfig.from_dict(manifest["model_config"])
    required = set(init_params(config, seed=0).names())
    missing = required - set(named)
    if missing:
        raise CheckpointError(f"checkpoint lacks model tensors: {sorted(missing)}")
    tensors = {name: Tensor(named[name]) for name in required}
    return ModelParams(config, tensors), manifest


def save_training_checkpoint(base_path, state, train_config,
                             metrics: dict | None = None) -> str:
    """Persist a resumable TrainState: optimizer moments and slot carries go
    into the blob as extra tensors, counters into a manifest section."""
    extras = {}
    for name, arr in state.adam.m.items():
        extras[f"adam.m.{name}"] = arr
    for name, arr in state.adam.v.items():
        extras[f"adam.v.{name}"] = arr
    for i, slot in enumerate(state.slots):
        extras[f"slot{i:03d}.z"] = np.asarray(slot.carry.z.data)
        extras[f"slot{i:03d}.y"] = np.asarray(slot.carry.y.data)
    section = {
        "epoch": state.epoch,
        "cursor": state.cursor,
        "global_step": state.global_step,
        "adam_step": state.adam.step,
        "exhausted": state.exhausted,
        "slot_indices": [s.index for s in state.slots],
        "slot_steps": [s.steps_taken for s in state.slots],
        "slot_halted": [s.halted for s in state.slots],
        "train_config": train_config.to_dict(),
    }
    return save_checkpoint(base_path, state.params, step=state.global_step,
                           metrics=metrics if metrics is not None else state.metrics,
                           extras=extras, train_state=section)


def load_training_checkpoint(base_path, train_set) -> tuple:
    """Rebuild a TrainState from disk; slot instances rebind to ``train_set``
    by stored index. Returns (TrainState, TrainConfig, manifest)."""
    from .model import Carry
    from .training import AdamState, BatchSlot, TrainConfig, TrainState

    params, manifest = load_checkpoint(base_path)
    section = manifest.get("train_state")
    if section is None:
        raise CheckpointError("checkpoint has no train_state section")
    _, named = load_tensors(base_path)
    model_names = set(params.names())
    m = {n: named[f"adam.m.{n}"] for n in model_names}
    v = {n: named[f"adam.v.{n}"] for n in model_names}
    if len(m) != len(model_names) or len(v) != len(model_names):
        raise CheckpointError("optimizer state incomplete in checkpoint")
    slots = []
    for i, index in enumerate(section["slot_indices"]):
        if not 0 <= index < len(train_set):
            raise CheckpointError(
                f"slot {i} refers to training index {index}, outside the "
                f"provided set of {len(train_set)}")
        carry = Carry(Tensor(named[f"slot{i:03d}.z"]), Tensor(named[f"slot{i:03d}.y"]))
        slots.append(BatchSlot(train_set[index], carry,
                               steps_taken=section["slot_steps"][i],
                               halted=section["slot_halted"][i], index=index))
    state = TrainState(params=params,
                       adam=AdamState(m=m, v=v, step=section["adam_step"]),
                       slots=slots, epoch=section["epoch"],
                       cursor=section["cursor"],
                       global_step=section["global_step"],
                       exhausted=section.get("exhausted", False),
                       metrics=manifest.get("metrics", {}))
    return state, TrainConfig.from_dict(section["train_config"]), manifest
