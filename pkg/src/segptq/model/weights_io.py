"""SAQW weight file format.

Layout: magic "SAQW", u32 version (=1), u32 tensor count; per tensor a
header record of u16 name length, UTF-8 name, u8 rank, rank u64 dims and a
u64 byte offset into the data blob; then one contiguous little-endian
float64 blob. Round trips are bit-exact.

The model configuration rides along as scalar/vector tensors under the
"meta." prefix so a file alone reconstructs the model.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import ModelConfig
from .segmenter import Model

MAGIC = b"SAQW"
VERSION = 1

_META_SCALARS = [
    "image_size", "patch_size", "embed_dim", "num_heads", "encoder_layers",
    "window_size", "mlp_ratio", "neck_dim", "decoder_blocks", "decoder_heads",
    "mask_head_dim", "qk_init_gain", "seed",
]


def _encode_tensors(tensors: dict) -> bytes:
    names = sorted(tensors)
    header = bytearray()
    header += MAGIC
    header += struct.pack("<II", VERSION, len(names))
    blob = bytearray()
    offset = 0
    for name in names:
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.ndim:  # ascontiguousarray would promote rank-0 to rank-1
            arr = np.ascontiguousarray(arr)
        raw = arr.astype("<f8", copy=False).tobytes()
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        header += struct.pack("<H", len(nb)) + nb
        header += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            header += struct.pack("<Q", dim)
        header += struct.pack("<Q", offset)
        blob += raw
        offset += len(raw)
    return bytes(header) + bytes(blob)


def _decode_tensors(buf: bytes) -> dict:
    if buf[:4] != MAGIC:
        raise ValueError("not a SAQW file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported SAQW version {version}")
    pos = 12
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
        pos += 8 * rank
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        entries.append((name, dims, offset))
    blob_start = pos
    tensors = {}
    for name, dims, offset in entries:
        n = int(np.prod(dims)) if dims else 1
        start = blob_start + offset
        end = start + 8 * n
        if end > len(buf):
            raise ValueError(f"SAQW file truncated while reading {name!r}")
        arr = np.frombuffer(buf[start:end], dtype="<f8").astype(np.float64)
        tensors[name] = arr.reshape(dims)
    return tensors


def save_weights(model: Model, path: str):
    tensors = dict(model.params)
    cfg = model.cfg.to_dict()
    for key in _META_SCALARS:
        tensors[f"meta.{key}"] = np.float64(cfg[key])
    tensors["meta.global_layer_indices"] = np.asarray(
        cfg["global_layer_indices"], dtype=np.float64)
    with open(path, "wb") as f:
        f.write(_encode_tensors(tensors))


def load_weights(path: str) -> Model:
    with open(path, "rb") as f:
        tensors = _decode_tensors(f.read())
    cfg_dict = {}
    params = {}
    for name, arr in tensors.items():
        if name.startswith("meta."):
            key = name[5:]
            if key == "global_layer_indices":
                cfg_dict[key] = [int(v) for v in arr.ravel()]
            elif key == "qk_init_gain":
                cfg_dict[key] = float(arr)
            else:
                cfg_dict[key] = int(arr)
        else:
            params[name] = arr
    if not cfg_dict:
        raise ValueError("SAQW file carries no model configuration")
    cfg = ModelConfig.from_dict(cfg_dict)
    return Model(cfg, params)
