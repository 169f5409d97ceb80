"""Named-tensor container file.

Layout (little-endian throughout)::

    u64             header length N
    N bytes         UTF-8 JSON header
    ...             raw tensor bytes

The header maps each tensor name to ``{"dtype": "F32"|"F64", "shape": [...],
"data_offsets": [begin, end]}`` with offsets relative to the start of the
data section. An optional ``"__metadata__"`` entry holds string -> string
pairs. This is the safetensors layout, so float32 exports of pretrained
weights in that format load directly; checkpoints written here use F64 so a
save/load round trip is bitwise exact.
"""
import json
import struct
from pathlib import Path

import numpy as np

_DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}


class ContainerError(ValueError):
    pass


def save_tensors(path, tensors, metadata=None, dtype="F64"):
    if dtype not in _DTYPES:
        raise ContainerError(f"unsupported dtype {dtype}")
    np_dtype = _DTYPES[dtype]
    header = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=np_dtype)
        raw = arr.tobytes()
        header[name] = {"dtype": dtype, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        blobs.append(raw)
        offset += len(raw)
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    # pad header to 8 bytes so the data section is aligned
    hbytes += b" " * (-len(hbytes) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path):
    """Return ``(tensors, metadata)``; tensors are float64 numpy arrays."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ContainerError(f"{path}: file too short for a header")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if hlen > len(raw) - 8:
        raise ContainerError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: malformed header ({exc})") from exc
    if not isinstance(header, dict):
        raise ContainerError(f"{path}: header is not a JSON object")
    metadata = header.pop("__metadata__", {}) or {}
    data = raw[8 + hlen:]
    tensors = {}
    for name, info in header.items():
        try:
            dt = _DTYPES[info["dtype"]]
            shape = tuple(int(d) for d in info["shape"])
            begin, end = (int(v) for v in info["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"{path}: bad header entry for {name!r}") from exc
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if end - begin != expected or end > len(data) or begin < 0:
            raise ContainerError(f"{path}: tensor {name!r} is truncated or has inconsistent offsets")
        tensors[name] = np.frombuffer(data[begin:end], dtype=dt).reshape(shape).astype(np.float64)
    return tensors, metadata
