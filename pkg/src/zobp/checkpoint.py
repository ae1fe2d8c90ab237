"""Checkpoint file format.

Binary, little-endian:

    magic    4 bytes  "EZO1"
    mode     u8       0 = fp32, 1 = int8
    bias     u8       1 if fp32 parameters carry biases
    n_layers u8
    layer table, n_layers entries of (kind u8, d0 u32, d1 u32):
        kind: 0 conv(d0=in_ch, d1=out_ch), 1 fc(d0=in, d1=out),
              2 relu, 3 maxpool, 4 flatten
    parameter blobs, one per trainable layer in layer order:
        fp32: W float32 raw (then b float32 raw when bias = 1)
        int8: exponent int16, then W int8 raw
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .fpnet import LayerSpec, Network
from .qnet import QuantNetwork
from .qtensor import QuantTensor

MAGIC = b"EZO1"
_KIND_CODE = {"conv": 0, "fc": 1, "relu": 2, "maxpool": 3, "flatten": 4}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def _layer_entry(spec: LayerSpec) -> bytes:
    if spec.kind == "conv":
        return struct.pack("<BII", 0, spec.in_ch, spec.out_ch)
    if spec.kind == "fc":
        return struct.pack("<BII", 1, spec.in_dim, spec.out_dim)
    return struct.pack("<BII", _KIND_CODE[spec.kind], 0, 0)


def _parse_layer(buf: bytes, off: int) -> tuple[LayerSpec, int]:
    code, d0, d1 = struct.unpack_from("<BII", buf, off)
    off += struct.calcsize("<BII")
    kind = _CODE_KIND[code]
    if kind == "conv":
        return LayerSpec("conv", in_ch=d0, out_ch=d1), off
    if kind == "fc":
        return LayerSpec("fc", in_dim=d0, out_dim=d1), off
    return LayerSpec(kind), off


def save(net, path) -> None:
    """Write a Network or QuantNetwork checkpoint."""
    is_int8 = isinstance(net, QuantNetwork)
    bias = 0 if is_int8 else (1 if net.bias else 0)
    parts = [MAGIC, struct.pack("<BBB", 1 if is_int8 else 0, bias, len(net.layers))]
    for spec in net.layers:
        parts.append(_layer_entry(spec))
    for i in net.trainable_indices():
        p = net.params[i]
        if is_int8:
            parts.append(struct.pack("<h", p.exponent))
            parts.append(p.data.astype("<i1").tobytes())
        else:
            parts.append(p["W"].astype("<f4").tobytes())
            if p["b"] is not None:
                parts.append(p["b"].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _param_shape(spec: LayerSpec):
    if spec.kind == "conv":
        return (spec.out_ch, spec.in_ch, 5, 5), spec.out_ch
    return (spec.out_dim, spec.in_dim), spec.out_dim


def load(path):
    """Read a checkpoint; returns a Network or QuantNetwork."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    mode, bias, n_layers = struct.unpack_from("<BBB", buf, 4)
    off = 7
    layers = []
    for _ in range(n_layers):
        spec, off = _parse_layer(buf, off)
        layers.append(spec)
    params = {}
    for i, spec in enumerate(layers):
        if not spec.has_params:
            continue
        w_shape, nb = _param_shape(spec)
        n = int(np.prod(w_shape))
        if mode == 1:
            (exp,) = struct.unpack_from("<h", buf, off)
            off += 2
            w = np.frombuffer(buf, dtype="<i1", count=n, offset=off).reshape(w_shape)
            off += n
            params[i] = QuantTensor(w.copy(), exp)
        else:
            w = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(w_shape)
            off += 4 * n
            b = None
            if bias:
                b = np.frombuffer(buf, dtype="<f4", count=nb, offset=off).copy()
                off += 4 * nb
            params[i] = {"W": w.copy(), "b": b}
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    if mode == 1:
        return QuantNetwork(layers, params=params)
    return Network(layers, params=params, bias=bool(bias))
