"""Deterministic binary checkpoints.

Layout (all integers little-endian):

    bytes 0..3    magic b"ENN1"
    u32           metadata length
    metadata      UTF-8 JSON: kind, architecture, train config, seeds,
                  payload sha256 digest
    u32           tensor count
    per tensor    u16 name length, name UTF-8, u8 ndim, u32 dims...,
                  float32 data (row-major, little-endian)

Round-tripping reproduces parameter bytes exactly; loading recomputes the
payload digest and fails hard on truncation or mismatch.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .epinet import BaseNet, EpinetModel
from .errors import ContractError, DigestError, FormatError
from .layers import ConvNet, Dense

MAGIC = b"ENN1"


def _encode_payload(params: dict) -> bytes:
    chunks = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_checkpoint(model, path, *, train_config=None, seeds=None) -> str:
    """Write a model checkpoint; returns the payload content digest."""
    kind, arch, params = model.state()
    payload = _encode_payload(params)
    digest = hashlib.sha256(payload).hexdigest()
    meta = {
        "kind": kind,
        "arch": arch,
        "train_config": train_config,
        "seeds": seeds,
        "digest": digest,
        "format": "ENN1/1",
    }
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(meta_b)))
        fh.write(meta_b)
        fh.write(struct.pack("<I", len(params)))
        fh.write(payload)
    return digest


def read_checkpoint(path):
    """Parse a checkpoint file into (metadata, {name: float32 array})."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DigestError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (meta_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + meta_len + 4:
        raise DigestError(f"{path}: truncated checkpoint metadata")
    meta = json.loads(raw[8 : 8 + meta_len].decode("utf-8"))
    off = 8 + meta_len
    (n_tensors,) = struct.unpack("<I", raw[off : off + 4])
    off += 4
    payload = raw[off:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != meta.get("digest"):
        raise DigestError(f"{path}: content digest mismatch (file truncated or corrupted)")
    params = {}
    pos = 0
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", payload[pos : pos + 2])
        pos += 2
        name = payload[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack("<B", payload[pos : pos + 1])
        pos += 1
        shape = struct.unpack(f"<{ndim}I", payload[pos : pos + 4 * ndim])
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(payload[pos : pos + 4 * count], dtype="<f4").reshape(shape)
        pos += 4 * count
        params[name] = arr.copy()
    return meta, params


def _build_convnet(arch: dict) -> ConvNet:
    return ConvNet(arch["image_shape"], arch["channels"], arch["classes"],
                   kernel=arch["kernel"], stride=arch["stride"])


def _assign(named: dict, params: dict, prefix: str = "") -> None:
    for name, tensor in named.items():
        key = prefix + name
        if key not in params:
            raise FormatError(f"checkpoint missing tensor {key!r}")
        if params[key].shape != tensor.data.shape:
            raise FormatError(
                f"tensor {key!r} shape {params[key].shape} != expected {tensor.data.shape}"
            )
        tensor.data = params[key].astype(np.float32)


def _load_convnet(meta: dict, params: dict) -> BaseNet:
    arch = meta["arch"]
    net = _build_convnet(arch)
    _assign(net.named_params(), params)
    base = BaseNet(net, model_id=arch.get("model_id", "base"))
    base.train_record = arch.get("train_record", {})
    base.freeze()
    return base


def _load_epinet(meta: dict, params: dict) -> EpinetModel:
    arch = meta["arch"]
    net = _build_convnet(arch["base"])
    base = BaseNet(net, model_id="base")
    base.freeze()
    model = EpinetModel(base, index_dim=arch["index_dim"], hidden=arch["hidden"],
                        prior_mlp_scale=arch["prior_mlp_scale"],
                        prior_conv_scale=arch["prior_conv_scale"],
                        prior_conv_channels=arch["prior_conv_channels"],
                        model_id=arch.get("model_id", "epinet"))
    _assign(model.named_params(), params)
    # learnable weights stay trainable after a reload; everything else is fixed
    for layer in model.learnable.layers:
        if isinstance(layer, Dense):
            layer.w.requires_grad = True
            layer.b.requires_grad = True
    return model


_LOADERS = {"convnet": _load_convnet, "epinet": _load_epinet}


def load_checkpoint(path):
    """Rebuild a model from a checkpoint file."""
    meta, params = read_checkpoint(path)
    kind = meta.get("kind")
    if kind not in _LOADERS:
        raise ContractError(f"unknown checkpoint kind {kind!r}")
    return _LOADERS[kind](meta, params)
