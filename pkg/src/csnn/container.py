"""Binary model container.

Layout (all integers little-endian):

* magic ``CSNN`` (4 bytes), format version (u16), input H/W/C (u16 each),
  layer count (u16),
* one record per layer: kind tag (u8), name (u8 length + utf-8), the
  layer's geometry/plan fields, bias array (i32 per output) when present,
  and for weight-bearing layers the packed slot streams: per set, one
  (position: u32, kernel_id: u16, weight: i8) entry for every position,
  vacant slots carrying the 0xFFFF null id with weight 0,
* trailing CRC-32 (u32) of every preceding byte.

Loading re-verifies the CRC, the kernel-id bounds, the per-position
complementarity of the streams, and the layer shape chain.
"""

from __future__ import annotations

import struct
import zlib
from io import BytesIO
from pathlib import Path

import numpy as np

from .kernels import ConvConfig
from .kwta import KwtaConfig
from .network import (
    ConvLayer,
    ConvSpec,
    FlattenLayer,
    FlattenSpec,
    KwtaLayer,
    KwtaSpec,
    LinearLayer,
    LinearSpec,
    ModelGraph,
    PoolLayer,
    PoolSpec,
    validate_graph,
)
from .packing import NULL_KERNEL_ID, AugmentedWeightTensor
from .tensor import Requantizer

MAGIC = b"CSNN"
FORMAT_VERSION = 1
NULL_ID_WIRE = 0xFFFF
NO_SHIFT = 0xFF

_KIND_TAGS = {"conv": 1, "maxpool": 2, "flatten": 3, "linear": 4, "kwta": 5}
_ENTRY_DTYPE = np.dtype([("pos", "<u4"), ("id", "<u2"), ("w", "i1")])


class ContainerError(ValueError):
    """Malformed, truncated, or corrupt model container."""


def _write_name(buf: BytesIO, name: str) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 255:
        raise ContainerError(f"layer name too long: {name!r}")
    buf.write(struct.pack("<B", len(raw)))
    buf.write(raw)


def _write_awt(buf: BytesIO, awt: AugmentedWeightTensor) -> None:
    if awt.n_kernels >= NULL_ID_WIRE:
        raise ContainerError("kernel id does not fit in the u16 wire format")
    buf.write(struct.pack("<HI", awt.n_sets, awt.n_positions))
    positions = np.arange(awt.n_positions, dtype=np.uint32)
    for s in range(awt.n_sets):
        ids = awt.kernel_ids[:, s]
        stream = np.empty(awt.n_positions, dtype=_ENTRY_DTYPE)
        stream["pos"] = positions
        stream["id"] = np.where(ids == NULL_KERNEL_ID, NULL_ID_WIRE, ids).astype(np.uint16)
        stream["w"] = awt.weights[:, s]
        buf.write(stream.tobytes())


def _write_bias(buf: BytesIO, bias: np.ndarray | None, n_out: int) -> None:
    if bias is None:
        buf.write(struct.pack("<B", 0))
    else:
        if bias.size != n_out:
            raise ContainerError("bias length does not match the output count")
        buf.write(struct.pack("<B", 1))
        buf.write(bias.astype("<i4").tobytes())


def save(model: ModelGraph, path: str | Path) -> None:
    """Serialize a model; identical models produce identical bytes."""
    buf = BytesIO()
    buf.write(MAGIC)
    h, w, c = model.input_shape
    buf.write(struct.pack("<HHHHH", FORMAT_VERSION, h, w, c, len(model.layers)))
    for layer in model.layers:
        buf.write(struct.pack("<B", _KIND_TAGS[layer.kind]))
        _write_name(buf, layer.name)
        if isinstance(layer, ConvLayer):
            cfg = layer.cfg
            shift = NO_SHIFT if layer.requant is None else layer.requant.right_shift
            buf.write(
                struct.pack(
                    "<BBBHHIB",
                    cfg.kernel_size,
                    cfg.stride,
                    cfg.padding,
                    cfg.in_channels,
                    cfg.out_channels,
                    layer.awt.n_per_kernel,
                    shift,
                )
            )
            _write_bias(buf, layer.bias, cfg.out_channels)
            _write_awt(buf, layer.awt)
        elif isinstance(layer, LinearLayer):
            shift = NO_SHIFT if layer.requant is None else layer.requant.right_shift
            buf.write(
                struct.pack(
                    "<IIIB",
                    layer.in_features,
                    layer.spec.out_features,
                    layer.awt.n_per_kernel,
                    shift,
                )
            )
            _write_bias(buf, layer.bias, layer.spec.out_features)
            _write_awt(buf, layer.awt)
        elif isinstance(layer, PoolLayer):
            buf.write(struct.pack("<BB", layer.spec.size, layer.spec.stride))
        elif isinstance(layer, FlattenLayer):
            pass
        elif isinstance(layer, KwtaLayer):
            scope = 1 if layer.cfg.partition is not None else 0
            partition = layer.cfg.partition or 0
            buf.write(struct.pack("<BII", scope, layer.cfg.k, partition))
        else:
            raise ContainerError(f"cannot serialize layer kind {layer.kind!r}")
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", crc))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise ContainerError("container truncated")
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values if len(values) > 1 else values[0]

    def take_bytes(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ContainerError("container truncated")
        out = self.data[self.offset : self.offset + size]
        self.offset += size
        return out


def _read_name(r: _Reader) -> str:
    n = r.take("<B")
    return r.take_bytes(n).decode("utf-8")


def _read_bias(r: _Reader, n_out: int) -> np.ndarray | None:
    if not r.take("<B"):
        return None
    raw = r.take_bytes(4 * n_out)
    return np.frombuffer(raw, dtype="<i4").astype(np.int32)


def _read_awt(r: _Reader, shape: tuple[int, ...], n_per_kernel: int) -> AugmentedWeightTensor:
    expected = int(np.prod(shape))
    n_sets, n_positions = r.take("<HI")
    if n_positions != expected:
        raise ContainerError(
            f"stream covers {n_positions} positions, layer geometry needs {expected}"
        )
    if n_sets < 1:
        raise ContainerError("a packed layer needs at least one set")
    weights = np.empty((n_positions, n_sets), dtype=np.int8)
    ids = np.empty((n_positions, n_sets), dtype=np.int32)
    for s in range(n_sets):
        raw = r.take_bytes(_ENTRY_DTYPE.itemsize * n_positions)
        stream = np.frombuffer(raw, dtype=_ENTRY_DTYPE)
        if not np.array_equal(stream["pos"], np.arange(n_positions, dtype=np.uint32)):
            raise ContainerError("entry positions must enumerate every position in order")
        wire_ids = stream["id"].astype(np.int32)
        ids[:, s] = np.where(wire_ids == NULL_ID_WIRE, NULL_KERNEL_ID, wire_ids)
        weights[:, s] = stream["w"]
    try:
        awt = AugmentedWeightTensor(shape, weights, ids, n_per_kernel)
        awt.validate()
    except ValueError as e:
        raise ContainerError(str(e)) from e
    return awt


def load(path: str | Path) -> ModelGraph:
    """Read and re-verify a serialized model."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 2 + 4:
        raise ContainerError("file too small to be a model container")
    payload, crc_raw = blob[:-4], blob[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_raw)[0]:
        raise ContainerError("CRC mismatch: container is corrupt")
    r = _Reader(payload)
    if r.take_bytes(4) != MAGIC:
        raise ContainerError("bad magic; not a model container")
    version, h, w, c, n_layers = r.take("<HHHHH")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version}")
    layers: list = []
    for _ in range(n_layers):
        tag = r.take("<B")
        name = _read_name(r)
        if tag == _KIND_TAGS["conv"]:
            ksize, stride, pad, c_in, c_out, n_per, shift = r.take("<BBBHHIB")
            bias = _read_bias(r, c_out)
            cfg = ConvConfig(ksize, c_in, c_out, stride, pad)
            awt = _read_awt(r, (ksize, ksize, c_in), n_per)
            if awt.n_kernels > c_out:
                raise ContainerError(f"layer {name}: kernel id exceeds out_channels")
            spec = ConvSpec(name, c_out, ksize, stride, pad, n_per,
                            None if shift == NO_SHIFT else shift)
            requant = None if shift == NO_SHIFT else Requantizer(shift)
            layers.append(ConvLayer(spec, cfg, awt, bias, requant))
        elif tag == _KIND_TAGS["linear"]:
            n_in, n_out, n_per, shift = r.take("<IIIB")
            bias = _read_bias(r, n_out)
            awt = _read_awt(r, (n_in,), n_per)
            if awt.n_kernels > n_out:
                raise ContainerError(f"layer {name}: kernel id exceeds out_features")
            spec = LinearSpec(name, n_out, n_per, None if shift == NO_SHIFT else shift)
            requant = None if shift == NO_SHIFT else Requantizer(shift)
            layers.append(LinearLayer(spec, n_in, awt, bias, requant))
        elif tag == _KIND_TAGS["maxpool"]:
            size, stride = r.take("<BB")
            layers.append(PoolLayer(PoolSpec(name, size, stride)))
        elif tag == _KIND_TAGS["flatten"]:
            layers.append(FlattenLayer(FlattenSpec(name)))
        elif tag == _KIND_TAGS["kwta"]:
            scope, k, partition = r.take("<BII")
            spec = KwtaSpec(name, k, "local" if scope else "global", partition or None)
            cfg = KwtaConfig(k, partition=partition or None)
            layers.append(KwtaLayer(spec, cfg))
        else:
            raise ContainerError(f"unknown layer tag {tag}")
    if r.offset != len(payload):
        raise ContainerError("trailing bytes after the last layer record")
    model = ModelGraph((h, w, c), layers)
    validate_graph(model)
    return model
