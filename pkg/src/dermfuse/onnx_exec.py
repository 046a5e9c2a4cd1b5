"""Pure-numpy executor for the small ONNX op subset used by the CNN backends.

Used when onnxruntime is not installed. Supports the ops a plain feed-forward
classifier needs (Conv, Relu, MaxPool, AveragePool, Gemm, Flatten, Reshape,
Identity) in NCHW float32. Nodes must appear in topological order, which
every exporter this project reads produces.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError
from .onnx_io import OnnxGraph


class UnsupportedOperatorError(ValidationError):
    pass


def _pair(attrs, key, default):
    value = attrs.get(key, default)
    return [int(v) for v in value]


def _pool_windows(x, kernel, strides, pads):
    kh, kw = kernel
    sh, sw = strides
    pt, pl, pb, pr = pads
    if (pt, pl, pb, pr) != (0, 0, 0, 0):
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), mode="constant", constant_values=-np.inf)
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return windows[:, :, ::sh, ::sw]


def _conv(x, w, b, attrs):
    if int(attrs.get("group", 1)) != 1:
        raise UnsupportedOperatorError("grouped convolution is not supported")
    if any(int(d) != 1 for d in attrs.get("dilations", [1, 1])):
        raise UnsupportedOperatorError("dilated convolution is not supported")
    kh, kw = _pair(attrs, "kernel_shape", w.shape[2:])
    sh, sw = _pair(attrs, "strides", [1, 1])
    pt, pl, pb, pr = _pair(attrs, "pads", [0, 0, 0, 0])
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    n, cin, oh, ow = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cin * kh * kw)
    wmat = w.reshape(w.shape[0], cin * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        out += b
    return out.reshape(n, oh, ow, w.shape[0]).transpose(0, 3, 1, 2)


def _gemm(a, b, c, attrs):
    alpha = float(attrs.get("alpha", 1.0))
    beta = float(attrs.get("beta", 1.0))
    if int(attrs.get("transA", 0)):
        a = a.T
    if int(attrs.get("transB", 0)):
        b = b.T
    out = alpha * (a @ b)
    if c is not None:
        out = out + beta * c
    return out


class NumpyExecutor:
    def __init__(self, graph: OnnxGraph):
        self.graph = graph

    def run(self, output_names, feeds) -> list[np.ndarray]:
        env: dict[str, np.ndarray] = dict(self.graph.initializers)
        for name, value in feeds.items():
            env[name] = np.asarray(value, dtype=np.float32)
        for node in self.graph.nodes:
            args = [env[name] if name else None for name in node.inputs]
            op = node.op_type
            if op == "Conv":
                result = _conv(args[0], args[1], args[2] if len(args) > 2 else None, node.attrs)
            elif op == "Relu":
                result = np.maximum(args[0], 0.0)
            elif op == "MaxPool":
                windows = _pool_windows(
                    args[0],
                    _pair(node.attrs, "kernel_shape", None),
                    _pair(node.attrs, "strides", [1, 1]),
                    _pair(node.attrs, "pads", [0, 0, 0, 0]),
                )
                result = windows.max(axis=(-2, -1))
            elif op == "AveragePool":
                if any(_pair(node.attrs, "pads", [0, 0, 0, 0])):
                    raise UnsupportedOperatorError("padded AveragePool is not supported")
                windows = _pool_windows(
                    args[0],
                    _pair(node.attrs, "kernel_shape", None),
                    _pair(node.attrs, "strides", [1, 1]),
                    [0, 0, 0, 0],
                )
                result = windows.mean(axis=(-2, -1))
            elif op == "Gemm":
                result = _gemm(args[0], args[1], args[2] if len(args) > 2 else None, node.attrs)
            elif op == "Flatten":
                axis = int(node.attrs.get("axis", 1))
                a = args[0]
                result = a.reshape(int(np.prod(a.shape[:axis])), -1)
            elif op == "Reshape":
                shape = [int(v) for v in args[1]]
                result = args[0].reshape(shape)
            elif op == "Identity":
                result = args[0]
            else:
                raise UnsupportedOperatorError(
                    f"node {node.name!r}: operator {op!r} is not supported by the numpy engine "
                    "(install onnxruntime for full coverage)"
                )
            if isinstance(result, np.ndarray) and result.dtype != np.float32:
                result = result.astype(np.float32)
            env[node.outputs[0]] = result
        missing = [name for name in output_names if name not in env]
        if missing:
            raise ValidationError(f"graph did not produce outputs {missing}")
        return [env[name] for name in output_names]
