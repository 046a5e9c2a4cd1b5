"""Convert torchvision AlexNet / VGG-16 into fc6/fc7/fc8 ONNX feature extractors.

The exported graph takes a single mean-centered RGB tensor named ``input``
(1x3x227x227 for AlexNet, 1x3x224x224 for VGG-16) and declares three outputs:
``fc6`` and ``fc7`` post-activation (4096 each) and ``fc8`` as raw logits
(1000). Dropout layers are dropped (inference mode), and the adaptive average
pool is a no-op at these input sides, so the op set is just Conv, Relu,
MaxPool, Flatten and Gemm.

A parity sidecar is written next to the model: one fixed test tensor plus the
reference fc6/fc7/fc8 vectors computed with the torch weights. Any consumer
can replay the tensor through the exported file and compare.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torchvision import models

from . import onnx_writer as ow

log = logging.getLogger(__name__)

NETWORK_SIDES = {"alexnet": 227, "vgg16": 224}
LAYER_DIMS = {"fc6": 4096, "fc7": 4096, "fc8": 1000}
PARITY_MAGIC = "dermfuse-parity 1"


class ExportError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExportSpec:
    network: str
    out_path: str
    opset: int = 13
    weights: str = "pretrained"  # or "random"
    seed: int = 0

    def __post_init__(self):
        if self.network not in NETWORK_SIDES:
            raise ExportError(f"network must be one of {sorted(NETWORK_SIDES)}, got {self.network!r}")
        if self.opset < 11:
            raise ExportError(f"opset must be >= 11, got {self.opset}")
        if self.weights not in ("pretrained", "random"):
            raise ExportError(f"weights must be 'pretrained' or 'random', got {self.weights!r}")

    @property
    def side(self) -> int:
        return NETWORK_SIDES[self.network]


def _build_model(spec: ExportSpec) -> nn.Module:
    torch.manual_seed(spec.seed)
    ctor = models.alexnet if spec.network == "alexnet" else models.vgg16
    if spec.weights == "pretrained":
        try:
            net = ctor(weights="IMAGENET1K_V1")
        except Exception as exc:
            raise ExportError(
                f"could not obtain pre-trained {spec.network} weights ({exc}); "
                "pass --weights random for an untrained export"
            ) from exc
    else:
        net = ctor(weights=None)
    return net.eval()


def _pair(value):
    return (value, value) if isinstance(value, int) else tuple(value)


def _conv_out(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


class _GraphBuilder:
    def __init__(self, side: int):
        self.nodes = []
        self.inits = []
        self.current = "input"
        self.size = side
        self.channels = 3
        self.counter = 0

    def _next_name(self, op):
        self.counter += 1
        return f"{op.lower()}_{self.counter}"

    def add_conv(self, mod: nn.Conv2d):
        kh, kw = _pair(mod.kernel_size)
        sh, sw = _pair(mod.stride)
        ph, pw = _pair(mod.padding)
        if _pair(mod.dilation) != (1, 1) or mod.groups != 1:
            raise ExportError("only dense stride/pad convolutions are supported")
        out = self._next_name("conv")
        w_name, b_name = out + "_w", out + "_b"
        self.inits.append(ow.tensor(w_name, mod.weight.detach().numpy()))
        self.inits.append(ow.tensor(b_name, mod.bias.detach().numpy()))
        attrs = [
            ow.attr_ints("kernel_shape", [kh, kw]),
            ow.attr_ints("strides", [sh, sw]),
            ow.attr_ints("pads", [ph, pw, ph, pw]),
            ow.attr_ints("dilations", [1, 1]),
            ow.attr_int("group", 1),
        ]
        self.nodes.append(ow.node("Conv", [self.current, w_name, b_name], [out], attrs, name=out))
        self.size = _conv_out(self.size, kh, sh, ph)
        self.channels = mod.out_channels
        self.current = out

    def add_relu(self, output: str | None = None):
        out = output or self._next_name("relu")
        self.nodes.append(ow.node("Relu", [self.current], [out], name=out))
        self.current = out

    def add_maxpool(self, mod: nn.MaxPool2d):
        kh, kw = _pair(mod.kernel_size)
        sh, sw = _pair(mod.stride if mod.stride is not None else mod.kernel_size)
        if _pair(mod.padding) != (0, 0) or mod.ceil_mode:
            raise ExportError("only zero-padded floor-mode max pools are supported")
        out = self._next_name("pool")
        attrs = [ow.attr_ints("kernel_shape", [kh, kw]), ow.attr_ints("strides", [sh, sw])]
        self.nodes.append(ow.node("MaxPool", [self.current], [out], attrs, name=out))
        self.size = _conv_out(self.size, kh, sh, 0)
        self.current = out

    def add_adaptive_avgpool(self, mod: nn.AdaptiveAvgPool2d):
        target = _pair(mod.output_size)
        if target == (self.size, self.size):
            return  # identity at the canonical input side
        raise ExportError(
            f"adaptive pool from {self.size}x{self.size} to {target} is not the identity; "
            "only the canonical input sides are supported"
        )

    def add_flatten(self):
        out = self._next_name("flat")
        self.nodes.append(ow.node("Flatten", [self.current], [out], [ow.attr_int("axis", 1)], name=out))
        self.current = out

    def add_linear(self, mod: nn.Linear, output: str):
        w_name, b_name = output + "_w", output + "_b"
        self.inits.append(ow.tensor(w_name, mod.weight.detach().numpy()))
        self.inits.append(ow.tensor(b_name, mod.bias.detach().numpy()))
        self.nodes.append(
            ow.node("Gemm", [self.current, w_name, b_name], [output],
                    [ow.attr_int("transB", 1), ow.attr_int("alpha", 1), ow.attr_int("beta", 1)],
                    name=output)
        )
        self.current = output


def _walk(net: nn.Module, side: int) -> _GraphBuilder:
    builder = _GraphBuilder(side)
    for mod in net.features:
        if isinstance(mod, nn.Conv2d):
            builder.add_conv(mod)
        elif isinstance(mod, nn.ReLU):
            builder.add_relu()
        elif isinstance(mod, nn.MaxPool2d):
            builder.add_maxpool(mod)
        else:
            raise ExportError(f"unexpected feature module {type(mod).__name__}")
    builder.add_adaptive_avgpool(net.avgpool)
    builder.add_flatten()

    linears = [m for m in net.classifier if isinstance(m, nn.Linear)]
    if len(linears) != 3:
        raise ExportError(f"expected 3 classifier linears, found {len(linears)}")
    flat_dim = builder.channels * builder.size * builder.size
    if linears[0].in_features != flat_dim:
        raise ExportError(
            f"flattened feature size {flat_dim} does not match the first linear "
            f"({linears[0].in_features}); wrong input side?"
        )
    for (name, dim), linear in zip((("fc6", 4096), ("fc7", 4096), ("fc8", 1000)), linears):
        if linear.out_features != dim:
            raise ExportError(f"{name} must have {dim} outputs, found {linear.out_features}")

    builder.add_linear(linears[0], "fc6_pre")
    builder.add_relu("fc6")
    builder.add_linear(linears[1], "fc7_pre")
    builder.add_relu("fc7")
    builder.add_linear(linears[2], "fc8")
    return builder


def _torch_reference(net: nn.Module, x: torch.Tensor) -> dict[str, np.ndarray]:
    """Reference fc6/fc7/fc8 with the same tap points the graph declares."""
    with torch.no_grad():
        h = net.avgpool(net.features(x))
        h = torch.flatten(h, 1)
        linears = [m for m in net.classifier if isinstance(m, nn.Linear)]
        fc6 = torch.relu(linears[0](h))
        fc7 = torch.relu(linears[1](fc6))
        fc8 = linears[2](fc7)
    return {
        "fc6": fc6.numpy().reshape(-1),
        "fc7": fc7.numpy().reshape(-1),
        "fc8": fc8.numpy().reshape(-1),
    }


def write_parity_file(path, network: str, side: int, tensor_chw: np.ndarray,
                      outputs: dict[str, np.ndarray]) -> None:
    """Binary sidecar: magic line, network line, then shape-headed float32 blocks."""
    with open(path, "wb") as fh:
        fh.write((PARITY_MAGIC + "\n").encode("ascii"))
        fh.write(f"{network} {side}\n".encode("ascii"))
        blocks = [("input", tensor_chw)] + [(k, outputs[k]) for k in ("fc6", "fc7", "fc8")]
        for name, arr in blocks:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim} {dims}\n".encode("ascii"))
            fh.write(arr.tobytes())


def read_parity_file(path):
    with open(path, "rb") as fh:
        if fh.readline().decode("ascii").strip() != PARITY_MAGIC:
            raise ExportError(f"{path} is not a parity sidecar")
        network, side = fh.readline().decode("ascii").split()
        blocks = {}
        while True:
            header = fh.readline()
            if not header:
                break
            parts = header.decode("ascii").split()
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(v) for v in parts[2 : 2 + ndim])
            count = int(np.prod(shape))
            blocks[name] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return network, int(side), blocks


def parity_path(model_path) -> Path:
    return Path(str(model_path) + ".parity")


def export(spec: ExportSpec) -> Path:
    """Write the ONNX file and its parity sidecar; returns the model path."""
    net = _build_model(spec)
    builder = _walk(net, spec.side)

    inputs = [ow.value_info("input", (1, 3, spec.side, spec.side))]
    outputs = [ow.value_info(name, (1, LAYER_DIMS[name])) for name in ("fc6", "fc7", "fc8")]
    blob = ow.model(builder.nodes, inputs, outputs, builder.inits, opset=spec.opset)

    rng = np.random.default_rng(spec.seed)
    probe = rng.normal(scale=40.0, size=(1, 3, spec.side, spec.side)).astype(np.float32)
    reference = _torch_reference(net, torch.from_numpy(probe))
    for name, dim in LAYER_DIMS.items():
        if reference[name].shape != (dim,):
            raise ExportError(f"reference {name} has shape {reference[name].shape}, expected ({dim},)")

    out_path = Path(spec.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(out_path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, out_path)
        write_parity_file(parity_path(out_path), spec.network, spec.side, probe, reference)
    except BaseException:
        for p in (tmp, out_path, parity_path(out_path)):
            try:
                os.unlink(p)
            except OSError:
                pass
        raise
    log.info("exported %s (%d bytes) with parity sidecar", out_path, out_path.stat().st_size)
    return out_path
