"""Binary checkpoint format.

Layout::

    b"GRITCKPT"                 8-byte magic
    u32 little-endian           format version
    u64 little-endian           header length in bytes
    header                      UTF-8 JSON: config, scalars, tensor table
    payload                     raw little-endian float64 data

Each tensor-table entry carries ``name``, ``shape``, ``offset`` and
``nbytes``, with offsets relative to the start of the payload.  Model
parameters are stored as ``param/<name>``, Adam moments as
``adam_m/<name>`` and ``adam_v/<name>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Normalization
from .model import GritModel, ModelConfig
from .training import TrainState

MAGIC = b"GRITCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_LE_F64 = np.dtype("<f8")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic or unparseable header."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: GritModel
    state: TrainState
    meta: dict = field(default_factory=dict)


def _normalization_to_dict(norm: Normalization) -> dict:
    return {"mean": list(norm.mean), "std": list(norm.std), "source_ids": list(norm.source_ids)}


def save_checkpoint(model: GritModel, state: TrainState, path: str | Path,
                    meta: dict | None = None) -> None:
    """Write ``model`` and ``state``; output bytes depend only on their contents."""
    tensors: list[tuple[str, np.ndarray]] = []
    for name, p in model.parameters().items():
        tensors.append((f"param/{name}", p.data))
    for name in sorted(state.moment1):
        tensors.append((f"adam_m/{name}", state.moment1[name]))
        tensors.append((f"adam_v/{name}", state.moment2[name]))

    table, offset = [], 0
    for name, arr in tensors:
        nbytes = arr.size * 8
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "config": model.config.to_dict(),
        "normalization": _normalization_to_dict(model.normalization),
        "train_state": state.scalars(),
        "meta": meta or {},
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes())
    tmp.replace(path)


def _read_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < _PREFIX.size:
        if not MAGIC.startswith(blob[:8]):
            raise CheckpointFormatError("not a checkpoint file (bad magic)")
        raise CheckpointTruncatedError("file ends inside the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f"not a checkpoint file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, this reader supports {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointTruncatedError("file ends inside the header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointFormatError(f"unreadable header: {err}") from None
    for key in ("config", "normalization", "train_state", "tensors"):
        if key not in header:
            raise CheckpointFormatError(f"header lacks {key!r}")
    return header, start + hlen


def read_header(path: str | Path) -> dict:
    return _read_header(Path(path).read_bytes())[0]


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Nothing is constructed until the whole file has been validated.  With
    ``expect``, the stored configuration must agree field by field.
    """
    blob = Path(path).read_bytes()
    header, payload_start = _read_header(blob)
    try:
        config = ModelConfig(**header["config"])
    except (TypeError, ValueError) as err:
        raise CheckpointFormatError(f"invalid stored config: {err}") from None
    if expect is not None:
        for key, want in expect.to_dict().items():
            have = getattr(config, key)
            if have != want:
                raise CheckpointShapeError(f"config field {key!r}: checkpoint has {have!r}, expected {want!r}")

    model = GritModel.init(config)
    params = model.parameters()
    arrays: dict[str, np.ndarray] = {}
    payload = memoryview(blob)[payload_start:]
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if int(np.prod(shape)) * 8 != entry["nbytes"]:
            raise CheckpointFormatError(f"{name}: nbytes {entry['nbytes']} disagrees with shape {shape}")
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointTruncatedError(f"{name}: payload ends at byte {len(payload)}, need {end}")
        kind, _, pname = name.partition("/")
        if pname not in params or kind not in ("param", "adam_m", "adam_v"):
            raise CheckpointFormatError(f"unexpected tensor {name!r}")
        if shape != params[pname].shape:
            raise CheckpointShapeError(f"{name}: stored shape {shape}, model expects {params[pname].shape}")
        arrays[name] = np.frombuffer(payload[entry["offset"]:end], dtype=_LE_F64).reshape(shape).astype(np.float64)
    missing = [n for n in params if f"param/{n}" not in arrays]
    if missing:
        raise CheckpointFormatError(f"missing parameters: {missing}")

    for n, p in params.items():
        p.data[...] = arrays[f"param/{n}"]
    norm = header["normalization"]
    model.normalization = Normalization(tuple(norm["mean"]), tuple(norm["std"]),
                                        tuple(norm["source_ids"]))
    scal = header["train_state"]
    state = TrainState(
        lr=float(scal["lr"]), epoch=int(scal["epoch"]), step=int(scal["step"]),
        best_val_loss=float(scal["best_val_loss"]), best_epoch=int(scal["best_epoch"]),
        epochs_since_improvement=int(scal["epochs_since_improvement"]),
        rng_seed=int(scal["rng_seed"]),
        moment1={n[7:]: a for n, a in arrays.items() if n.startswith("adam_m/")},
        moment2={n[7:]: a for n, a in arrays.items() if n.startswith("adam_v/")},
    )
    return Checkpoint(model, state, header.get("meta", {}))
