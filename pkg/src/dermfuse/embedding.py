"""Feature extraction from fully-connected layers of pre-trained CNN backends.

Backends are pluggable: the ONNX backend wraps an exported network (run via
onnxruntime when installed, else the bundled numpy executor), and the mock
backend produces cheap deterministic pseudo-embeddings for tests and the
synthetic end-to-end suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .onnx_exec import NumpyExecutor
from .onnx_io import read_model
from .preprocess import AugmentTag

log = logging.getLogger(__name__)


class NetworkId(Enum):
    ALEXNET = "alexnet"
    VGG16 = "vgg16"

    @property
    def input_side(self) -> int:
        return 227 if self is NetworkId.ALEXNET else 224


class LayerId(Enum):
    FC6 = "fc6"
    FC7 = "fc7"
    FC8 = "fc8"

    @property
    def dim(self) -> int:
        return 1000 if self is LayerId.FC8 else 4096


LAYER_ORDER = (LayerId.FC6, LayerId.FC7, LayerId.FC8)


class SideMismatchError(ValidationError):
    pass


class MissingLayerError(ValidationError):
    def __init__(self, layer_name):
        super().__init__(f"backend does not expose layer {layer_name!r}")
        self.layer_name = layer_name


class DimensionMismatchError(ValidationError):
    pass


class BackendLoadError(ValidationError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    network: NetworkId
    layer: LayerId
    source_id: str
    variant: AugmentTag

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.layer.dim:
            raise ValidationError(
                f"{self.layer.value} feature for {self.source_id!r} has length {v.shape}, expected {self.layer.dim}"
            )
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"feature vector for {self.source_id!r} contains non-finite entries")
        object.__setattr__(self, "values", v)


def _check_tensor(tensor: np.ndarray, side: int):
    t = np.asarray(tensor, dtype=np.float64)
    if t.shape != (side, side, 3):
        raise ValidationError(f"expected a {side}x{side}x3 tensor, got shape {t.shape}")
    return t


class MockBackend:
    """Deterministic pseudo-embedding: block-pool the tensor, then a fixed
    seeded random projection per layer followed by tanh."""

    _POOL = 8

    def __init__(self, network: NetworkId, seed: int):
        self.network = network
        self.input_side = network.input_side
        self.layer_dims = {layer: layer.dim for layer in LAYER_ORDER}
        self.seed = seed
        self._proj: dict[LayerId, tuple[np.ndarray, np.ndarray]] = {}

    def _projection(self, layer: LayerId):
        cached = self._proj.get(layer)
        if cached is None:
            net_code = list(NetworkId).index(self.network)
            layer_code = list(LayerId).index(layer)
            seq = np.random.SeedSequence([self.seed & (2**63 - 1), net_code, layer_code])
            rng = np.random.default_rng(seq)
            w = rng.standard_normal((layer.dim, 3 * self._POOL**2))
            b = rng.standard_normal(layer.dim)
            cached = self._proj[layer] = (w, b)
        return cached

    def _pool(self, t: np.ndarray) -> np.ndarray:
        g = self._POOL
        bounds = (np.arange(g + 1) * t.shape[0]) // g
        sums = np.add.reduceat(np.add.reduceat(t, bounds[:-1], axis=0), bounds[:-1], axis=1)
        lens = np.diff(bounds).astype(np.float64)
        return (sums / (lens[:, None, None] * lens[None, :, None])).ravel()

    def embed(self, tensor: np.ndarray) -> dict[LayerId, np.ndarray]:
        t = _check_tensor(tensor, self.input_side)
        pooled = self._pool(t)
        out = {}
        for layer in LAYER_ORDER:
            w, b = self._projection(layer)
            z = (w @ pooled) * (0.02 / np.sqrt(pooled.size)) + 0.2 * b
            out[layer] = np.tanh(z)
        return out


def mock_backend(network: NetworkId, seed: int) -> MockBackend:
    return MockBackend(network, seed)


def _declared_dim(shape) -> int | None:
    known = [d for d in shape if d is not None and d != 1]
    if not known and () != shape:
        return None if any(d is None for d in shape) else 1
    if len(known) != 1:
        return None
    return int(known[0])


class OnnxBackend:
    """Embedding backend over an exported ONNX graph with fc6/fc7/fc8 outputs."""

    def __init__(self, model_path, network: NetworkId):
        self.network = network
        self.input_side = network.input_side
        self.model_path = str(model_path)

        model = read_model(model_path)
        declared = {out.name: out for out in model.graph.outputs}
        self.layer_dims: dict[LayerId, int] = {}
        for layer in LAYER_ORDER:
            if layer.value not in declared:
                raise MissingLayerError(layer.value)
            dim = _declared_dim(declared[layer.value].shape)
            if dim != layer.dim:
                raise DimensionMismatchError(
                    f"output {layer.value!r} declares dimension {dim}, expected {layer.dim}"
                )
            self.layer_dims[layer] = dim

        graph_inputs = [vi for vi in model.graph.inputs if vi.name not in model.graph.initializers]
        if [vi.name for vi in graph_inputs] != ["input"]:
            raise BackendLoadError(
                f"graph must take a single input named 'input', got {[vi.name for vi in graph_inputs]}"
            )
        in_shape = graph_inputs[0].shape
        expected = (1, 3, self.input_side, self.input_side)
        if tuple(in_shape) != expected:
            raise BackendLoadError(
                f"graph input shape {in_shape} does not match {network.value} ({expected})"
            )

        self._session = None
        try:
            import onnxruntime  # optional accelerator

            self._session = onnxruntime.InferenceSession(
                str(model_path), providers=["CPUExecutionProvider"]
            )
            log.info("loaded %s with onnxruntime", Path(model_path).name)
        except ImportError:
            self._executor = NumpyExecutor(model.graph)
            log.info("loaded %s with the numpy executor (onnxruntime not installed)", Path(model_path).name)

    def embed(self, tensor: np.ndarray) -> dict[LayerId, np.ndarray]:
        t = _check_tensor(tensor, self.input_side)
        x = np.ascontiguousarray(t.transpose(2, 0, 1)[None], dtype=np.float32)
        names = [layer.value for layer in LAYER_ORDER]
        if self._session is not None:
            results = self._session.run(names, {"input": x})
        else:
            results = self._executor.run(names, {"input": x})
        return {
            layer: np.asarray(res, dtype=np.float64).reshape(-1)
            for layer, res in zip(LAYER_ORDER, results)
        }


def load_onnx_backend(model_path, network: NetworkId) -> OnnxBackend:
    return OnnxBackend(model_path, network)


def extract_features(backend, images, layers) -> list[FeatureVector]:
    """Embed every image; output order is image-major, layer-minor (fc6..fc8)."""
    wanted = [layer for layer in LAYER_ORDER if layer in set(layers)]
    if not wanted:
        raise ValidationError("no layers requested")
    out: list[FeatureVector] = []
    for image in images:
        if image.side != backend.input_side:
            raise SideMismatchError(
                f"image {image.source_id!r} has side {image.side}, "
                f"backend {backend.network.value} expects {backend.input_side}"
            )
        embedded = backend.embed(image.tensor)
        for layer in wanted:
            out.append(
                FeatureVector(
                    values=embedded[layer],
                    network=backend.network,
                    layer=layer,
                    source_id=image.source_id,
                    variant=image.variant,
                )
            )
    return out
