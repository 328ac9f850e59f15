"""Binary checkpoint: magic, version, JSON header, then float32 little-endian kernels.

Layout::

    b"DYNSRCKP" | uint32 version | uint64 header length | header (UTF-8 JSON)
    | kernels in declaration order | [Adam m kernels | Adam v kernels]

The JSON header is written with sorted keys and fixed separators so that
``save(load(path))`` reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ..exceptions import CheckpointError
from ..fileio import atomic_write_bytes
from .optim import Adam
from .unet import UNet, UNetConfig

MAGIC = b"DYNSRCKP"
VERSION = 1
_LE32 = np.dtype("<f4")


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(net: UNet, optimizer: Adam | None = None, step: int = 0,
                     metadata: dict | None = None) -> bytes:
    params = net.parameters()
    header = {
        "config": net.config.to_dict(),
        "step": int(step),
        "kernels": [[name, list(p.shape)] for name, p in params],
        "optimizer": None if optimizer is None else {
            "betas": list(optimizer.betas), "eps": optimizer.eps,
            "step_count": optimizer.step_count},
        "metadata": metadata or {},
    }
    hb = _dumps(header)
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(hb)), hb]
    chunks += [np.ascontiguousarray(p, dtype=_LE32).tobytes() for _, p in params]
    if optimizer is not None:
        for moments in (optimizer.m, optimizer.v):
            for name, p in params:
                arr = moments.get(name, np.zeros(p.shape))
                chunks.append(np.ascontiguousarray(arr, dtype=_LE32).tobytes())
    return b"".join(chunks)


def save_checkpoint(path, net, optimizer=None, step=0, metadata=None):
    atomic_write_bytes(path, checkpoint_bytes(net, optimizer, step, metadata))


def parse_checkpoint(data: bytes):
    """Return ``(net, optimizer or None, step, metadata)``."""
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", data, off)
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint header") from exc
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += 12
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    off += hlen

    net = UNet(UNetConfig.from_dict(header["config"]))
    expected = [(n, tuple(s)) for n, s in header["kernels"]]
    actual = [(n, p.shape) for n, p in net.parameters()]
    if expected != actual:
        raise CheckpointError("checkpoint kernels do not match the architecture config")

    def take(shape):
        nonlocal off
        n = int(np.prod(shape)) * 4
        if off + n > len(data):
            raise CheckpointError("truncated checkpoint payload")
        arr = np.frombuffer(data, dtype=_LE32, count=n // 4, offset=off).reshape(shape)
        off += n
        return arr.astype(np.float32)

    for name, shape in expected:
        net.set_parameter(name, take(shape))
    opt = None
    if header.get("optimizer") is not None:
        oh = header["optimizer"]
        opt = Adam(tuple(oh["betas"]), oh["eps"])
        opt.step_count = int(oh["step_count"])
        opt.m = {name: take(shape) for name, shape in expected}
        opt.v = {name: take(shape) for name, shape in expected}
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes in checkpoint")
    return net, opt, int(header["step"]), header.get("metadata", {})


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(data)
