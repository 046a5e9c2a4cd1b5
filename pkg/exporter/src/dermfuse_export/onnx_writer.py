"""Minimal ONNX protobuf writer.

Encodes just the schema subset a plain feed-forward classifier needs: float32
initializers (raw_data), Conv/Relu/MaxPool/AveragePool/Flatten/Gemm nodes with
int/ints attributes, and static-shaped value infos. The file is an ordinary
ONNX ModelProto readable by onnxruntime or any other consumer.
"""

from __future__ import annotations

import numpy as np

_FLOAT = 1  # TensorProto.DataType


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


def tensor(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    payload = b"".join(_varint_field(1, d) for d in array.shape)
    payload += _varint_field(2, _FLOAT)
    payload += _str_field(8, name)
    payload += _len_field(9, array.tobytes())
    return payload


def attr_int(name: str, value: int) -> bytes:
    return _str_field(1, name) + _varint_field(3, value) + _varint_field(20, 2)


def attr_ints(name: str, values) -> bytes:
    payload = _str_field(1, name)
    payload += _len_field(8, b"".join(_varint(int(v)) for v in values))
    payload += _varint_field(20, 7)
    return payload


def node(op_type: str, inputs, outputs, attrs=(), name: str = "") -> bytes:
    payload = b"".join(_str_field(1, i) for i in inputs)
    payload += b"".join(_str_field(2, o) for o in outputs)
    if name:
        payload += _str_field(3, name)
    payload += _str_field(4, op_type)
    payload += b"".join(_len_field(5, a) for a in attrs)
    return payload


def value_info(name: str, shape) -> bytes:
    dims = b"".join(_len_field(1, _varint_field(1, int(d))) for d in shape)
    tensor_type = _varint_field(1, _FLOAT) + _len_field(2, dims)
    return _str_field(1, name) + _len_field(2, _len_field(1, tensor_type))


def model(nodes, inputs, outputs, initializers, opset: int, producer: str = "dermfuse-export") -> bytes:
    graph = b"".join(_len_field(1, n) for n in nodes)
    graph += _str_field(2, "network")
    graph += b"".join(_len_field(5, t) for t in initializers)
    graph += b"".join(_len_field(11, vi) for vi in inputs)
    graph += b"".join(_len_field(12, vi) for vi in outputs)
    opset_id = _str_field(1, "") + _varint_field(2, opset)
    out = _varint_field(1, 8)  # ir_version 8
    out += _str_field(2, producer)
    out += _len_field(7, graph)
    out += _len_field(8, opset_id)
    return out
