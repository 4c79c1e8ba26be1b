"""
Parameter Checkpoints
Binary file: 8-byte little-endian header length, UTF-8 JSON header
(config, tensor names, shapes, byte offsets), then every tensor as
little-endian float64 in header order. Round-trips bit-exactly.
"""
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path

import numpy as np

from config.config import WattNetConfig
from src.core.errors import ArtifactError, ParseError
from src.core.wattnet import ModelParams, param_shapes

logger = logging.getLogger(__name__)

MAGIC = "ndf-wattnet-checkpoint"
FORMAT_VERSION = 1
DTYPE = np.dtype("<f8")
_LENGTH = struct.Struct("<Q")


def save_checkpoint(params: ModelParams, path: str) -> Path:
    """Write ``params`` and their config to ``path``."""
    entries = []
    offset = 0
    for name, value in params.items():
        nbytes = value.size * DTYPE.itemsize
        entries.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "config": asdict(params.config),
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        f.write(_LENGTH.pack(len(header_bytes)))
        f.write(header_bytes)
        for value in params.tensors.values():
            f.write(np.ascontiguousarray(value, dtype=DTYPE).tobytes())
    logger.info(f"Saved {len(entries)} tensors ({offset} bytes) to {out}")
    return out


def load_checkpoint(path: str) -> ModelParams:
    """Read a checkpoint written by ``save_checkpoint``."""
    file_path = Path(path)
    if not file_path.exists():
        raise ArtifactError(f"checkpoint missing: {file_path}", producer="train")
    raw = file_path.read_bytes()
    if len(raw) < _LENGTH.size:
        raise ParseError("truncated checkpoint header", str(path))
    (header_len,) = _LENGTH.unpack_from(raw, 0)
    start = _LENGTH.size + header_len
    if start > len(raw):
        raise ParseError("checkpoint header length exceeds file size", str(path))
    try:
        header = json.loads(raw[_LENGTH.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"unreadable checkpoint header ({e})", str(path)) from e
    if header.get("magic") != MAGIC or header.get("version") != FORMAT_VERSION:
        raise ParseError(f"not a version {FORMAT_VERSION} checkpoint", str(path))

    config = WattNetConfig(**header["config"])
    expected = param_shapes(config)
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise ParseError(f"tensor {name} has shape {shape}, config expects {expected.get(name)}", str(path))
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise ParseError(f"tensor {name} runs past the end of the file", str(path))
        tensors[name] = np.frombuffer(raw[lo:hi], dtype=DTYPE).reshape(shape).astype(np.float64)
    if list(tensors) != list(expected):
        raise ParseError("checkpoint tensor list does not match its config", str(path))
    return ModelParams(config, tensors)
