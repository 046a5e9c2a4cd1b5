"""Minimal reader for ONNX model files (protobuf wire format, no onnx dep).

Understands just enough of the ONNX schema to describe plain feed-forward
image classifiers: graph inputs/outputs with static shapes, float32/int64
initializers, and node attributes of scalar/list kinds. Unknown fields are
skipped, unknown attribute kinds are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

_WIRE_VARINT = 0
_WIRE_I64 = 1
_WIRE_LEN = 2
_WIRE_I32 = 5

# TensorProto.DataType values we accept
TENSOR_FLOAT = 1
TENSOR_INT64 = 7


class OnnxFormatError(ValidationError):
    pass


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise OnnxFormatError("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise OnnxFormatError("varint too long")


def _signed(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


def _fields(buf: bytes):
    """Yield (field_number, wire_type, payload) where payload is int or bytes."""
    pos = 0
    while pos < len(buf):
        tag, pos = _read_varint(buf, pos)
        number, wire = tag >> 3, tag & 0x7
        if wire == _WIRE_VARINT:
            value, pos = _read_varint(buf, pos)
        elif wire == _WIRE_I64:
            value = buf[pos : pos + 8]
            pos += 8
        elif wire == _WIRE_LEN:
            length, pos = _read_varint(buf, pos)
            value = buf[pos : pos + length]
            if len(value) != length:
                raise OnnxFormatError("truncated length-delimited field")
            pos += length
        elif wire == _WIRE_I32:
            value = buf[pos : pos + 4]
            pos += 4
        else:
            raise OnnxFormatError(f"unsupported wire type {wire}")
        yield number, wire, value


def _packed_varints(payload, wire) -> list[int]:
    if wire == _WIRE_VARINT:
        return [_signed(payload)]
    out = []
    pos = 0
    while pos < len(payload):
        v, pos = _read_varint(payload, pos)
        out.append(_signed(v))
    return out


@dataclass
class OnnxNode:
    op_type: str
    inputs: list[str]
    outputs: list[str]
    attrs: dict[str, object]
    name: str = ""


@dataclass
class OnnxValueInfo:
    name: str
    shape: tuple
    elem_type: int


@dataclass
class OnnxGraph:
    nodes: list[OnnxNode] = field(default_factory=list)
    initializers: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: list[OnnxValueInfo] = field(default_factory=list)
    outputs: list[OnnxValueInfo] = field(default_factory=list)


@dataclass
class OnnxModel:
    ir_version: int
    opset: int
    graph: OnnxGraph


def _parse_tensor(buf: bytes) -> tuple[str, np.ndarray]:
    dims: list[int] = []
    dtype = None
    raw = None
    floats: list[bytes] = []
    int64s: list[int] = []
    name = ""
    for number, wire, payload in _fields(buf):
        if number == 1:
            dims.extend(_packed_varints(payload, wire))
        elif number == 2:
            dtype = payload
        elif number == 4:
            floats.append(payload if wire == _WIRE_LEN else payload)
        elif number == 7:
            int64s.extend(_packed_varints(payload, wire))
        elif number == 8:
            name = payload.decode("utf-8")
        elif number == 9:
            raw = payload
    if dtype == TENSOR_FLOAT:
        if raw is not None:
            arr = np.frombuffer(raw, dtype="<f4")
        else:
            arr = np.frombuffer(b"".join(floats), dtype="<f4")
    elif dtype == TENSOR_INT64:
        if raw is not None:
            arr = np.frombuffer(raw, dtype="<i8")
        else:
            arr = np.array(int64s, dtype=np.int64)
    else:
        raise OnnxFormatError(f"unsupported tensor data type {dtype} for initializer {name!r}")
    shape = tuple(dims) if dims else (arr.size,)
    if int(np.prod(shape)) != arr.size:
        raise OnnxFormatError(f"initializer {name!r}: {arr.size} values do not fill shape {shape}")
    return name, arr.reshape(shape)


def _parse_attribute(buf: bytes) -> tuple[str, object]:
    name = ""
    value = None
    ints: list[int] = []
    floats: list[float] = []
    for number, wire, payload in _fields(buf):
        if number == 1:
            name = payload.decode("utf-8")
        elif number == 2:
            value = float(np.frombuffer(payload, dtype="<f4")[0])
        elif number == 3:
            value = _signed(payload)
        elif number == 4:
            value = payload.decode("utf-8")
        elif number == 5:
            value = _parse_tensor(payload)[1]
        elif number == 7:
            if wire == _WIRE_I32:
                floats.append(float(np.frombuffer(payload, dtype="<f4")[0]))
            else:
                floats.extend(np.frombuffer(payload, dtype="<f4").tolist())
        elif number == 8:
            ints.extend(_packed_varints(payload, wire))
        elif number in (6, 9, 10, 11):
            raise OnnxFormatError(f"attribute {name!r} has an unsupported kind")
    if ints:
        value = ints
    elif floats:
        value = floats
    return name, value


def _parse_dims(buf: bytes) -> tuple:
    dims = []
    for number, _, payload in _fields(buf):
        if number == 1:  # TensorShapeProto.Dimension
            value = None
            for dnum, dwire, dpayload in _fields(payload):
                if dnum == 1:
                    value = _signed(dpayload)
                elif dnum == 2:
                    value = None  # symbolic dimension
            dims.append(value)
    return tuple(dims)


def _parse_value_info(buf: bytes) -> OnnxValueInfo:
    name = ""
    shape: tuple = ()
    elem = 0
    for number, _, payload in _fields(buf):
        if number == 1:
            name = payload.decode("utf-8")
        elif number == 2:  # TypeProto
            for tnum, _, tpayload in _fields(payload):
                if tnum == 1:  # tensor_type
                    for snum, swire, spayload in _fields(tpayload):
                        if snum == 1:
                            elem = spayload if isinstance(spayload, int) else 0
                        elif snum == 2:
                            shape = _parse_dims(spayload)
    return OnnxValueInfo(name=name, shape=shape, elem_type=elem)


def _parse_node(buf: bytes) -> OnnxNode:
    inputs: list[str] = []
    outputs: list[str] = []
    attrs: dict[str, object] = {}
    op_type = ""
    name = ""
    for number, _, payload in _fields(buf):
        if number == 1:
            inputs.append(payload.decode("utf-8"))
        elif number == 2:
            outputs.append(payload.decode("utf-8"))
        elif number == 3:
            name = payload.decode("utf-8")
        elif number == 4:
            op_type = payload.decode("utf-8")
        elif number == 5:
            attr_name, attr_value = _parse_attribute(payload)
            attrs[attr_name] = attr_value
    return OnnxNode(op_type=op_type, inputs=inputs, outputs=outputs, attrs=attrs, name=name)


def _parse_graph(buf: bytes) -> OnnxGraph:
    graph = OnnxGraph()
    for number, _, payload in _fields(buf):
        if number == 1:
            graph.nodes.append(_parse_node(payload))
        elif number == 5:
            name, arr = _parse_tensor(payload)
            graph.initializers[name] = arr
        elif number == 11:
            graph.inputs.append(_parse_value_info(payload))
        elif number == 12:
            graph.outputs.append(_parse_value_info(payload))
    return graph


def read_model_bytes(buf: bytes) -> OnnxModel:
    ir_version = 0
    opset = 0
    graph = None
    for number, _, payload in _fields(buf):
        if number == 1:
            ir_version = _signed(payload)
        elif number == 7:
            graph = _parse_graph(payload)
        elif number == 8:
            domain = ""
            version = 0
            for onum, _, opayload in _fields(payload):
                if onum == 1:
                    domain = opayload.decode("utf-8")
                elif onum == 2:
                    version = _signed(opayload)
            if domain == "":
                opset = max(opset, version)
    if graph is None:
        raise OnnxFormatError("file contains no graph")
    return OnnxModel(ir_version=ir_version, opset=opset, graph=graph)


def read_model(path) -> OnnxModel:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OnnxFormatError(f"cannot read model file {path}: {exc}") from exc
    try:
        return read_model_bytes(buf)
    except OnnxFormatError:
        raise
    except Exception as exc:
        raise OnnxFormatError(f"malformed model file {path}: {exc}") from exc
