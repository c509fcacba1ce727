"""Parameter checkpoints in a binary or a JSON layout.

Binary layout (all integers little-endian)::

    8 bytes   magic  b"BDCLCKPT"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header
    ...       raw float64 ('<f8') array data, concatenated in header order

The header holds the model dimensions and, for each parameter group, its
trainable flag and an ordered list of ``{"name", "shape", "offset"}`` entries
where ``offset`` counts bytes from the start of the data section.

The JSON layout carries the same header with each array's values inlined as
nested lists. Python's float repr round-trips exactly, so both forms restore
bit-identical parameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import BDCLError
from .model import GROUPS, ModelParams, ParamGroup

MAGIC = b"BDCLCKPT"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(BDCLError):
    pass


def _header(params: ModelParams) -> dict:
    return {
        "format": "bdcl-checkpoint",
        "version": FORMAT_VERSION,
        "feature_dims": list(params.feature_dims),
        "prior_dims": list(params.prior_dims),
        "latent_dim": params.latent_dim,
        "num_classes": params.num_classes,
        "groups": [],
    }


def _params_from(header: dict, arrays: dict[str, dict[str, np.ndarray]]) -> ModelParams:
    groups = {}
    for g in header["groups"]:
        groups[g["name"]] = ParamGroup(arrays[g["name"]], bool(g["trainable"]))
    if sorted(groups) != sorted(GROUPS):
        raise CheckpointError(f"checkpoint groups {sorted(groups)} do not match {sorted(GROUPS)}")
    return ModelParams(groups, tuple(header["feature_dims"]), tuple(header["prior_dims"]),
                       int(header["latent_dim"]), int(header["num_classes"]))


def _check_version(header: dict) -> None:
    if header.get("format") != "bdcl-checkpoint":
        raise CheckpointError("not a bdcl checkpoint")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")


def to_bytes(params: ModelParams) -> bytes:
    header = _header(params)
    chunks, offset = [], 0
    for g in GROUPS:
        entries = []
        for k in sorted(params[g]):
            a = np.ascontiguousarray(params[g][k], dtype=_DTYPE)
            entries.append({"name": k, "shape": list(a.shape), "offset": offset})
            chunks.append(a.tobytes())
            offset += a.nbytes
        header["groups"].append({"name": g, "trainable": params.groups[g].trainable,
                                 "arrays": entries})
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(chunks)


def from_bytes(blob: bytes) -> ModelParams:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not a binary bdcl checkpoint")
    try:
        version, hlen = struct.unpack_from("<IQ", blob, 8)
    except struct.error as e:
        raise CheckpointError("truncated checkpoint header") from e
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 20 + hlen
    try:
        header = json.loads(blob[20:start])
    except ValueError as e:
        raise CheckpointError("corrupt checkpoint header") from e
    _check_version(header)
    data = memoryview(blob)[start:]
    arrays = {}
    for g in header["groups"]:
        arrays[g["name"]] = {}
        for e in g["arrays"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            end = e["offset"] + count * _DTYPE.itemsize
            if end > len(data):
                raise CheckpointError(f"array {g['name']}.{e['name']} runs past end of file")
            a = np.frombuffer(data[e["offset"]:end], dtype=_DTYPE).reshape(e["shape"])
            arrays[g["name"]][e["name"]] = a.astype(np.float64)
    return _params_from(header, arrays)


def to_json(params: ModelParams) -> str:
    header = _header(params)
    for g in GROUPS:
        header["groups"].append({
            "name": g,
            "trainable": params.groups[g].trainable,
            "arrays": [{"name": k, "shape": list(params[g][k].shape),
                        "values": params[g][k].tolist()} for k in sorted(params[g])],
        })
    return json.dumps(header, sort_keys=True, indent=1)


def from_json(text: str) -> ModelParams:
    try:
        header = json.loads(text)
    except ValueError as e:
        raise CheckpointError("checkpoint is not valid JSON") from e
    _check_version(header)
    arrays = {}
    for g in header["groups"]:
        arrays[g["name"]] = {e["name"]: np.array(e["values"], dtype=np.float64).reshape(e["shape"])
                             for e in g["arrays"]}
    return _params_from(header, arrays)


def save(path, params: ModelParams) -> None:
    """Write ``params``; a ``.json`` suffix selects the JSON layout."""
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(to_json(params) + "\n")
    else:
        path.write_bytes(to_bytes(params))


def load(path) -> ModelParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    if blob[:8] == MAGIC:
        return from_bytes(blob)
    return from_json(blob.decode())
