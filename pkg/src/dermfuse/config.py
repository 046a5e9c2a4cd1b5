"""Experiment configuration: one JSON file drives every pipeline stage.

Keys are flat; CLI flags (--seed, --out) override the corresponding keys.
The sha256 of the resolved config is embedded in every output file together
with the seed, so results can always be traced to the exact run settings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataset import SPLIT_UNIT_IMAGE, SPLIT_UNIT_INSTANCE
from .ensemble import COMBINE_AVERAGE, COMBINE_CONCAT
from .errors import ValidationError

_KNOWN_KEYS = {
    "train_manifest", "train_images", "test_manifest", "test_images",
    "backend", "mock_seed", "model_paths", "networks", "layers", "combine",
    "kernel", "C", "tol", "split_fraction", "split_seed", "split_unit",
    "stratified", "calib_fraction", "augment_train", "out_dir", "workers",
}


@dataclass
class ExperimentConfig:
    train_manifest: str | None = None
    train_images: str | None = None
    test_manifest: str | None = None
    test_images: str | None = None
    backend: str = "mock"
    mock_seed: int = 0
    model_paths: dict = field(default_factory=dict)  # network name -> onnx path
    networks: list = field(default_factory=lambda: ["alexnet", "vgg16"])
    layers: list = field(default_factory=lambda: ["fc6", "fc7", "fc8"])
    combine: str = COMBINE_AVERAGE
    kernel: dict = field(default_factory=lambda: {"kind": "rbf", "gamma": "auto"})
    C: object = 1.0  # scalar or list for grid search
    tol: float = 1e-3
    split_fraction: float = 0.8
    split_seed: int = 0
    split_unit: str = SPLIT_UNIT_IMAGE
    stratified: bool = False
    calib_fraction: float = 0.2
    augment_train: bool = True
    out_dir: str = "out"
    workers: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - _KNOWN_KEYS
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def validate(self, require_train=False, require_test=False, require_backend=False) -> None:
        for frac, name in (
            (self.split_fraction, "split_fraction"),
            (self.calib_fraction, "calib_fraction"),
        ):
            if not 0.0 < frac < 1.0:
                raise ValidationError(f"{name} must lie in (0,1), got {frac}")
        if self.backend not in ("mock", "onnx"):
            raise ValidationError(f"backend must be 'mock' or 'onnx', got {self.backend!r}")
        if self.combine not in (COMBINE_AVERAGE, COMBINE_CONCAT):
            raise ValidationError(f"combine must be {COMBINE_AVERAGE!r} or {COMBINE_CONCAT!r}")
        if self.split_unit not in (SPLIT_UNIT_IMAGE, SPLIT_UNIT_INSTANCE):
            raise ValidationError(f"unknown split_unit {self.split_unit!r}")
        if not self.networks:
            raise ValidationError("at least one network must be configured")
        if require_train:
            self._check_path(self.train_manifest, "train_manifest")
            self._check_path(self.train_images, "train_images", directory=True)
        if require_test:
            self._check_path(self.test_manifest, "test_manifest")
            self._check_path(self.test_images, "test_images", directory=True)
        if require_backend and self.backend == "onnx":
            for network in self.networks:
                path = self.model_paths.get(network)
                if path is None:
                    raise ValidationError(f"backend 'onnx' needs model_paths[{network!r}]")
                self._check_path(path, f"model_paths[{network!r}]")

    @staticmethod
    def _check_path(value, name, directory=False):
        if value is None:
            raise ValidationError(f"config key {name} is required for this command")
        p = Path(value)
        ok = p.is_dir() if directory else p.is_file()
        if not ok:
            raise ValidationError(f"{name} does not exist: {value}")

    def config_hash(self) -> str:
        """Digest of everything that shapes the results.

        out_dir and workers only change where files land and how fast, so they
        are excluded: the same experiment hashes the same wherever it runs.
        """
        payload = asdict(self)
        payload.pop("out_dir")
        payload.pop("workers")
        canon = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    def provenance(self) -> str:
        return f"dermfuse config={self.config_hash()} seed={self.split_seed}"
