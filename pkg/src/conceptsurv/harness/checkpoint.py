"""Binary checkpoint container.

Layout::

    b"SCBM" | version: u32 LE | header length: u32 LE | JSON header | arrays

The header lists every array with its name, shape and byte offset relative to
the start of the array section; arrays are little-endian float64.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..autodiff import ParameterSet
from ..models import BeranBackground, ModelSpec, TrainConfig, TrainedModel
from ..survival import StepSurvivalFunction

__all__ = ["CheckpointError", "FORMAT_VERSION", "MAGIC", "save_checkpoint", "load_checkpoint"]

MAGIC = b"SCBM"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def _arrays_of(model: TrainedModel) -> list:
    out = [(f"param:{name}", model.params.arrays[name]) for name in sorted(model.params.arrays)]
    if model.baseline is not None:
        out += [("baseline:knots", model.baseline.knots), ("baseline:values", model.baseline.values)]
    if model.background is not None:
        bg = model.background
        out += [
            ("background:features", bg.features),
            ("background:times", bg.times),
            ("background:events", bg.events.astype(np.float64)),
            ("background:indices", bg.indices.astype(np.float64)),
        ]
    return out


def save_checkpoint(model: TrainedModel, path, provenance: dict | None = None) -> None:
    """Write ``model`` to ``path``; ``provenance`` (e.g. config hash, seed) is stored verbatim."""
    arrays = _arrays_of(model)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "spec": model.spec.to_dict(),
        "trainable": {n: model.params.trainable[n] for n in sorted(model.params.arrays)},
        "risk_offset": model.risk_offset,
        "train_config": model.config.to_dict() if model.config is not None else None,
        "history": model.history,
        "provenance": provenance or {},
        "arrays": entries,
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(text)))
        fh.write(text)
        for blob in blobs:
            fh.write(blob)


def _field(header, key):
    if key not in header:
        raise CheckpointError(f"corrupt checkpoint: missing field {key!r}")
    return header[key]


def load_checkpoint(path) -> TrainedModel:
    """Read a checkpoint written by ``save_checkpoint``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"truncated checkpoint: {len(raw)} bytes, need at least {_PREFIX.size}")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError(f"truncated checkpoint: header needs {hlen} bytes, {len(raw) - _PREFIX.size} present")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint: field 'header' does not parse ({err})") from err
    if not isinstance(header, dict):
        raise CheckpointError("corrupt checkpoint: field 'header' is not a mapping")

    arrays = {}
    for entry in _field(header, "arrays"):
        try:
            name, shape, off, nbytes = entry["name"], tuple(entry["shape"]), entry["offset"], entry["nbytes"]
        except (KeyError, TypeError) as err:
            raise CheckpointError(f"corrupt checkpoint: malformed field 'arrays' entry {entry!r}") from err
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        if nbytes != expected:
            raise CheckpointError(f"corrupt checkpoint: array {name!r} has {nbytes} bytes for shape {shape}")
        lo, hi = start + off, start + off + nbytes
        if off < 0 or hi > len(raw):
            raise CheckpointError(f"truncated checkpoint: array {name!r} needs bytes {lo}..{hi}, file has {len(raw)}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=lo).reshape(shape).astype(np.float64)

    try:
        spec = ModelSpec.from_dict(_field(header, "spec"))
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: field 'spec' is invalid ({err})") from err
    trainable = _field(header, "trainable")
    params = ParameterSet()
    for name in sorted(trainable):
        key = f"param:{name}"
        if key not in arrays:
            raise CheckpointError(f"corrupt checkpoint: field {key!r} is missing")
        params.add(name, arrays[key], trainable=bool(trainable[name]))

    baseline = background = None
    try:
        if spec.head.kind == "cox":
            baseline = StepSurvivalFunction(arrays["baseline:knots"], arrays["baseline:values"])
        else:
            background = BeranBackground(
                arrays["background:features"],
                arrays["background:times"],
                arrays["background:events"].astype(bool),
                arrays["background:indices"].astype(np.int64),
            )
    except KeyError as err:
        raise CheckpointError(f"corrupt checkpoint: field {err.args[0]!r} is missing") from err
    except ValueError as err:
        raise CheckpointError(f"corrupt checkpoint: field 'baseline' is invalid ({err})") from err

    cfg = header.get("train_config")
    config = TrainConfig(**cfg) if cfg else None
    return TrainedModel(
        spec, params, baseline, background, list(header.get("history", [])), config,
        float(_field(header, "risk_offset")),
    )


def read_provenance(path) -> dict:
    with open(path, "rb") as fh:
        magic, version, hlen = _PREFIX.unpack(fh.read(_PREFIX.size))
        header = json.loads(fh.read(hlen))
    return header.get("provenance", {})
