"""Binary tensor files, the weight file container and binary PPM images.

Tensor record ("UCTN"): 4-byte magic, u8 version (1), u8 ndim, ndim
little-endian u32 dims, then the little-endian f32 payload.

Weight file ("UCWF"): 4-byte magic, u8 version (1), little-endian u32 manifest
length, UTF-8 JSON manifest, then the data section. The manifest holds the
model config and one entry per item ``{"name", "offset", "shape"}`` where
``offset`` is relative to the data section start. Tensor entries point at a
UCTN record; feature-map entries carry ``"tag"`` and point at a single tag byte.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import WeightFileError

TENSOR_MAGIC = b"UCTN"
WEIGHT_MAGIC = b"UCWF"
VERSION = 1

# one-byte tags for feature-map kinds stored in weight files
FMAP_TAGS = {"identity": 0, "relu": 1, "elu1": 2, "symrelu": 3, "hedgehog": 4}
FMAP_NAMES = {v: k for k, v in FMAP_TAGS.items()}


def encode_tensor(a) -> bytes:
    a = np.asarray(a, dtype="<f4")
    if a.ndim > 255:
        raise ValueError("too many dimensions")
    head = TENSOR_MAGIC + struct.pack("<BB", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a).tobytes()


def decode_tensor(buf: bytes, offset: int = 0, field: str = "tensor"):
    """Decode one record at ``offset``; returns (array, next_offset)."""
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise WeightFileError(f"{field}: bad tensor magic", field=field)
    if len(buf) < offset + 6:
        raise WeightFileError(f"{field}: truncated header", field=field)
    version, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise WeightFileError(f"{field}: unsupported tensor version {version}", field=field)
    pos = offset + 6
    if len(buf) < pos + 4 * ndim:
        raise WeightFileError(f"{field}: truncated shape", field=field)
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * count
    if len(buf) < end:
        raise WeightFileError(f"{field}: truncated payload", field=field)
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
    return arr, end


def save_tensor(path, a):
    Path(path).write_bytes(encode_tensor(a))


def load_tensor(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read {path}: {exc}", field="path") from exc
    return decode_tensor(buf, 0, str(path))[0]


def save_weights(path, tensors: dict, config: dict | None = None, feature_maps: dict | None = None):
    """Write named tensors (and optional feature-map tags) to a weight file."""
    data = io.BytesIO()
    entries = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float32)
        entries.append({"name": name, "offset": data.tell(), "shape": list(arr.shape)})
        data.write(encode_tensor(arr))
    for name in sorted(feature_maps or {}):
        kind = feature_maps[name]
        entries.append({"name": name, "offset": data.tell(), "shape": [], "tag": kind})
        data.write(struct.pack("<B", FMAP_TAGS[kind]))
    manifest = json.dumps({"config": config or {}, "entries": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC + struct.pack("<BI", VERSION, len(manifest)))
        fh.write(manifest)
        fh.write(data.getvalue())


def load_weights(path):
    """Returns (tensors, config, feature_maps)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read weight file {path}: {exc}", field="path") from exc
    if buf[:4] != WEIGHT_MAGIC:
        raise WeightFileError("bad weight file magic", field="magic")
    if len(buf) < 9:
        raise WeightFileError("truncated weight file header", field="header")
    version, mlen = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}", field="version")
    try:
        manifest = json.loads(buf[9 : 9 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"corrupt manifest: {exc}", field="manifest") from exc
    base = 9 + mlen
    tensors, fmaps = {}, {}
    for entry in manifest.get("entries", []):
        name = entry.get("name", "?")
        try:
            start = base + int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise WeightFileError(f"entry {name}: bad offset", field=name) from exc
        if "tag" in entry:
            if start >= len(buf) or buf[start] not in FMAP_NAMES:
                raise WeightFileError(f"entry {name}: bad feature-map tag", field=name)
            fmaps[name] = FMAP_NAMES[buf[start]]
            continue
        arr, _ = decode_tensor(buf, start, name)
        if list(arr.shape) != list(entry.get("shape", [])):
            raise WeightFileError(f"entry {name}: shape {arr.shape} != manifest {entry.get('shape')}", field=name)
        tensors[name] = arr
    return tensors, manifest.get("config", {}), fmaps


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) PPM as a (1, 3, h, w) float32 tensor in [0, 1]."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read image {path}: {exc}", field="input") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise WeightFileError(f"{path}: truncated PPM header", field="input")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise WeightFileError(f"{path}: not a binary PPM (P6)", field="input")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise WeightFileError(f"{path}: only maxval 255 is supported", field="input")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos) if len(buf) >= pos + w * h * 3 else None
    if raw is None:
        raise WeightFileError(f"{path}: truncated pixel data", field="input")
    img = raw.reshape(h, w, 3).transpose(2, 0, 1)[None].astype(np.float32) / 255.0
    return np.ascontiguousarray(img)


def write_ppm(path, img):
    """Write a (1, 3, h, w) tensor with values in [0, 1] as a binary PPM."""
    img = np.asarray(img)
    if img.ndim == 4:
        img = img[0]
    _, h, w = img.shape
    px = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(px.transpose(1, 2, 0).tobytes())
