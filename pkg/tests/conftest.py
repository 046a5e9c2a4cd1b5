"""Shared fixtures: synthetic datasets and a minimal stand-alone ONNX encoder.

The encoder here is deliberately independent of the package's reader so the
two sides check each other; it emits just the protobuf fields the tests need.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from dermfuse.dataset import LesionClass

# ---------------------------------------------------------------------------
# synthetic images: class signal injected into pixel blocks


def synthetic_pixels(cls: LesionClass, rng: np.random.Generator, side: int = 48) -> np.ndarray:
    base = np.full((side, side, 3), 110.0)
    h = side // 2
    if cls is LesionClass.MELANOMA:
        base[:h, :h, 0] += 90.0
        base[h:, h:, 2] -= 40.0
    elif cls is LesionClass.SEBORRHEIC_KERATOSIS:
        base[h:, :h, 1] += 90.0
        base[:h, h:, 0] -= 40.0
    noise = rng.normal(0.0, 12.0, size=base.shape)
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def write_synthetic_dataset(root: Path, counts: dict[LesionClass, int], seed: int = 0,
                            side: int = 48, prefix: str = "img") -> tuple[Path, Path]:
    """Write PNGs plus a labeled manifest; returns (manifest_path, image_dir)."""
    rng = np.random.default_rng(seed)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    lines = ["image_id,melanoma,seborrheic_keratosis"]
    index = 0
    for cls in (LesionClass.MELANOMA, LesionClass.SEBORRHEIC_KERATOSIS, LesionClass.NEVUS):
        for _ in range(counts.get(cls, 0)):
            image_id = f"{prefix}_{index:04d}"
            index += 1
            Image.fromarray(synthetic_pixels(cls, rng, side)).save(image_dir / f"{image_id}.png")
            mel = "1.0" if cls is LesionClass.MELANOMA else "0.0"
            sk = "1.0" if cls is LesionClass.SEBORRHEIC_KERATOSIS else "0.0"
            lines.append(f"{image_id},{mel},{sk}")
    manifest = root / "ground_truth.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest, image_dir


# ---------------------------------------------------------------------------
# minimal protobuf encoder for hand-built ONNX test models


def _varint(value: int) -> bytes:
    out = bytearray()
    value &= (1 << 64) - 1
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _field(number: int, wire: int, payload: bytes) -> bytes:
    return _varint((number << 3) | wire) + payload


def _len_field(number: int, payload: bytes) -> bytes:
    return _field(number, 2, _varint(len(payload)) + payload)


def _varint_field(number: int, value: int) -> bytes:
    return _field(number, 0, _varint(value))


def _str_field(number: int, value: str) -> bytes:
    return _len_field(number, value.encode("utf-8"))


def onnx_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    data_type = 1 if arr.dtype.kind == "f" else 7
    payload = b"".join(_varint_field(1, d) for d in arr.shape)
    payload += _varint_field(2, data_type)
    payload += _str_field(8, name)
    raw = np.ascontiguousarray(arr, dtype="<f4" if data_type == 1 else "<i8").tobytes()
    payload += _len_field(9, raw)
    return payload


def onnx_attr_ints(name: str, values) -> bytes:
    payload = _str_field(1, name)
    payload += _len_field(8, b"".join(_varint(v) for v in values))
    payload += _varint_field(20, 7)  # AttributeProto.INTS
    return payload


def onnx_attr_int(name: str, value: int) -> bytes:
    return _str_field(1, name) + _varint_field(3, value) + _varint_field(20, 2)


def onnx_attr_float(name: str, value: float) -> bytes:
    return _str_field(1, name) + _field(2, 5, struct.pack("<f", value)) + _varint_field(20, 1)


def onnx_node(op_type: str, inputs, outputs, attrs=()) -> bytes:
    payload = b"".join(_str_field(1, name) for name in inputs)
    payload += b"".join(_str_field(2, name) for name in outputs)
    payload += _str_field(4, op_type)
    payload += b"".join(_len_field(5, attr) for attr in attrs)
    return payload


def onnx_value_info(name: str, shape, elem_type: int = 1) -> bytes:
    dims = b"".join(_len_field(1, _varint_field(1, d)) for d in shape)
    tensor = _varint_field(1, elem_type) + _len_field(2, dims)
    type_proto = _len_field(1, tensor)
    return _str_field(1, name) + _len_field(2, type_proto)


def onnx_model_bytes(nodes, inputs, outputs, initializers, opset: int = 13) -> bytes:
    graph = b"".join(_len_field(1, n) for n in nodes)
    graph += b"".join(_len_field(5, t) for t in initializers)
    graph += b"".join(_len_field(11, vi) for vi in inputs)
    graph += b"".join(_len_field(12, vi) for vi in outputs)
    opset_id = _str_field(1, "") + _varint_field(2, opset)
    return _varint_field(1, 8) + _len_field(7, graph) + _len_field(8, opset_id)


def build_toy_backbone(side: int, seed: int = 0, fc7_dim: int = 4096, fc8_dim: int = 1000,
                       declare_layers=("fc6", "fc7", "fc8")) -> bytes:
    """Tiny fc6/fc7/fc8 graph: global average pool -> three dense heads."""
    rng = np.random.default_rng(seed)
    w6 = rng.standard_normal((4096, 3)).astype(np.float32)
    b6 = rng.standard_normal(4096).astype(np.float32)
    w7 = rng.standard_normal((fc7_dim, 3)).astype(np.float32)
    b7 = rng.standard_normal(fc7_dim).astype(np.float32)
    w8 = rng.standard_normal((fc8_dim, 3)).astype(np.float32)
    b8 = rng.standard_normal(fc8_dim).astype(np.float32)
    nodes = [
        onnx_node("AveragePool", ["input"], ["pooled"],
                  [onnx_attr_ints("kernel_shape", [side, side]), onnx_attr_ints("strides", [1, 1])]),
        onnx_node("Flatten", ["pooled"], ["flat"], [onnx_attr_int("axis", 1)]),
        onnx_node("Gemm", ["flat", "w6", "b6"], ["fc6"], [onnx_attr_int("transB", 1)]),
        onnx_node("Gemm", ["flat", "w7", "b7"], ["fc7"], [onnx_attr_int("transB", 1)]),
        onnx_node("Gemm", ["flat", "w8", "b8"], ["fc8"], [onnx_attr_int("transB", 1)]),
    ]
    inits = [onnx_tensor("w6", w6), onnx_tensor("b6", b6),
             onnx_tensor("w7", w7), onnx_tensor("b7", b7),
             onnx_tensor("w8", w8), onnx_tensor("b8", b8)]
    inputs = [onnx_value_info("input", (1, 3, side, side))]
    dims = {"fc6": 4096, "fc7": fc7_dim, "fc8": fc8_dim}
    outputs = [onnx_value_info(name, (1, dims[name])) for name in declare_layers]
    return onnx_model_bytes(nodes, inputs, outputs, inits)
