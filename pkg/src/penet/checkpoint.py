"""Byte-deterministic single-file checkpoints.

Layout: magic, a little-endian u64 header length, a canonical-JSON header
(sorted keys, no whitespace), then raw tensor bytes in the order listed
by the header. Tensors inside the payload are replaced by indices into
the blob table; everything else (ints, floats, strings, dict/list
structure, RNG states) lives in the header JSON. Floats survive JSON
round-trips exactly (shortest-repr), so save -> load -> save reproduces
the file byte for byte.

The training config travels in the header together with a SHA-256 of its
canonical JSON; loading recomputes and compares the digest and refuses
mismatches.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"PENETCKPT1\n"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}
_NP_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "int32": np.int32,
    "uint8": np.uint8,
    "bool": np.bool_,
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _encode(obj, blobs):
    if torch.is_tensor(obj):
        t = obj.detach().cpu().contiguous()
        dtype = str(t.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype}")
        idx = len(blobs)
        blobs.append((dtype, tuple(t.shape), t.numpy().tobytes()))
        return {"__t__": idx}
    if isinstance(obj, dict):
        items = []
        for k, v in obj.items():
            if isinstance(k, bool) or not isinstance(k, (str, int)):
                raise CheckpointError(f"unsupported dict key type {type(k)}")
            tag = "s" if isinstance(k, str) else "i"
            items.append([tag, str(k), _encode(v, blobs)])
        return {"__d__": items}
    if isinstance(obj, (list, tuple)):
        tag = "__l__" if isinstance(obj, list) else "__u__"
        return {tag: [_encode(v, blobs) for v in obj]}
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise CheckpointError(f"unsupported payload value of type {type(obj)}")


def _decode(node, tensors):
    if isinstance(node, dict):
        if "__t__" in node:
            return tensors[node["__t__"]]
        if "__d__" in node:
            out = {}
            for tag, key, val in node["__d__"]:
                out[key if tag == "s" else int(key)] = _decode(val, tensors)
            return out
        if "__l__" in node:
            return [_decode(v, tensors) for v in node["__l__"]]
        if "__u__" in node:
            return tuple(_decode(v, tensors) for v in node["__u__"])
        raise CheckpointError("malformed payload node")
    return node


def save_checkpoint(payload: dict, config: dict, path):
    """Serialize a (nested) payload of tensors/scalars plus its config."""
    blobs = []
    encoded = _encode(payload, blobs)
    header = {
        "version": FORMAT_VERSION,
        "config": config,
        "config_hash": config_digest(config),
        "payload": encoded,
        "blobs": [{"dtype": d, "shape": list(s), "nbytes": len(b)}
                  for d, s, b in blobs],
    }
    header_bytes = canonical_json(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for _, _, b in blobs:
            f.write(b)
    return path


def load_checkpoint(path, expect_config: dict | None = None):
    """Read a checkpoint; returns (payload, config).

    Refuses files whose stored config hash does not match the stored
    config, and (optionally) checkpoints written under a different config
    than the caller expects.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    off += hlen

    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version "
                              f"{header.get('version')}")
    config = header["config"]
    if config_digest(config) != header.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch — file corrupt "
                              "or tampered")
    if expect_config is not None and config_digest(expect_config) != \
            header["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint was written under a "
                              "different config than the one supplied")

    tensors = []
    for spec in header["blobs"]:
        n = spec["nbytes"]
        if len(raw) < off + n:
            raise CheckpointError(f"{path}: truncated tensor data")
        arr = np.frombuffer(raw[off:off + n],
                            dtype=_NP_DTYPES[spec["dtype"]]).copy()
        tensors.append(torch.from_numpy(arr.reshape(spec["shape"])))
        off += n
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return _decode(header["payload"], tensors), config
