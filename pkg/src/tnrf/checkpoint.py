"""Versioned binary checkpoints.

Layout (little-endian)::

    b"TNRF" | version u32 | crc32 u32 | payload length u64 | payload

The payload is a sequence of named blocks::

    name length u16 | name utf-8 | kind u8 | count u64 | data

``kind`` is 32 or 64 for float32/float64 scalars and 0 for raw bytes (used
for the JSON metadata block).
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import torch

from .exceptions import ChecksumError, LoadError, VersionError
from .trainer import TrainConfig, TrainState, _fresh_moments
from .fields import FieldModel

MAGIC = b"TNRF"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_KIND_BYTES = 0


def _write_block(buf, name: str, kind: int, data: bytes, count: int):
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BQ", kind, count))
    buf.write(data)


def _tensor_block(buf, name: str, t: torch.Tensor):
    arr = t.detach().cpu().numpy()
    kind = 64 if arr.dtype == np.float64 else 32
    arr = np.ascontiguousarray(arr, dtype="<f8" if kind == 64 else "<f4").ravel()
    _write_block(buf, name, kind, arr.tobytes(), arr.size)


def write_blocks(path: Union[str, Path], meta: dict, tensors: Dict[str, torch.Tensor]):
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    _write_block(buf, "__meta__", _KIND_BYTES, meta_bytes, len(meta_bytes))
    for name in tensors:
        _tensor_block(buf, name, tensors[name])
    payload = buf.getvalue()
    header = _HEADER.pack(MAGIC, VERSION, zlib.crc32(payload), len(payload))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header + payload)


def read_blocks(path: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise LoadError(f"cannot read checkpoint {path}: {err}") from err
    if len(data) < _HEADER.size:
        raise ChecksumError(f"{path}: truncated header")
    magic, version, crc, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ChecksumError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, expected {VERSION}")
    payload = data[_HEADER.size :]
    if len(payload) != length or zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: checksum mismatch (file truncated or corrupt)")
    pos = 0
    meta, blocks = None, {}
    while pos < len(payload):
        (n,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        name = payload[pos : pos + n].decode()
        pos += n
        kind, count = struct.unpack_from("<BQ", payload, pos)
        pos += 9
        if kind == _KIND_BYTES:
            raw = payload[pos : pos + count]
            pos += count
            meta = json.loads(raw.decode())
            continue
        dt = np.dtype("<f8") if kind == 64 else np.dtype("<f4")
        nbytes = count * dt.itemsize
        blocks[name] = np.frombuffer(payload[pos : pos + nbytes], dtype=dt).copy()
        pos += nbytes
    if meta is None:
        raise ChecksumError(f"{path}: missing metadata block")
    return meta, blocks


def _json_rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(state: TrainState, path: Union[str, Path]):
    tensors = {}
    for name, p in state.model.named_parameters():
        tensors[f"net.{name}"] = p
    tensors["latent.shape"] = state.latent_shape
    tensors["latent.appearance"] = state.latent_appearance
    for key, mom in state.moments.items():
        tensors[f"adam.m.{key}"] = mom.m
        tensors[f"adam.v.{key}"] = mom.v
    tensors["latent_steps"] = state.latent_steps.to(torch.float64)
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "num_objects": state.num_objects,
        "rng": _json_rng_state(state.rng),
        "w0": {n: m.w0 for n, m in state.model.named_modules() if hasattr(m, "w0")},
    }
    write_blocks(path, meta, tensors)


def load_checkpoint(path: Union[str, Path]) -> TrainState:
    meta, blocks = read_blocks(path)
    config = TrainConfig.from_dict(meta["config"])
    dtype = config.dtype
    model = FieldModel(config.field_config()).to(dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(blocks[f"net.{name}"]).reshape(p.shape).to(dtype))
        for name, m in model.named_modules():
            if name in meta["w0"]:
                m.w0 = meta["w0"][name]
    n = meta["num_objects"]
    latent_shape = torch.from_numpy(blocks["latent.shape"]).reshape(n, config.shape_dim).to(dtype)
    latent_app = torch.from_numpy(blocks["latent.appearance"]).reshape(n, config.appearance_dim).to(dtype)
    moments = _fresh_moments(model, latent_shape, latent_app)
    for key, mom in moments.items():
        mom.m.copy_(torch.from_numpy(blocks[f"adam.m.{key}"]).reshape(mom.m.shape))
        mom.v.copy_(torch.from_numpy(blocks[f"adam.v.{key}"]).reshape(mom.v.shape))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(
        config=config,
        model=model,
        latent_shape=latent_shape,
        latent_appearance=latent_app,
        moments=moments,
        latent_steps=torch.from_numpy(blocks["latent_steps"]).clone(),
        step=int(meta["step"]),
        rng=rng,
    )
