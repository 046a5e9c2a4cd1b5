"""Fusion of calibrated per-(network, layer) classifiers into final scores.

Each ensemble member turns one sample's features into a normalized 3-class
probability triple; members are averaged, and the melanoma / seborrheic
keratosis entries of the fused triple are the two binary task scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import LesionClass
from .embedding import LAYER_ORDER, LayerId, MissingLayerError, NetworkId
from .errors import ValidationError
from .svm import MultiClassSvm, multiclass_arrays, multiclass_from_arrays

COMBINE_AVERAGE = "average-layer-classifiers"
COMBINE_CONCAT = "concat-features"


@dataclass(frozen=True)
class ProbTriple:
    p: np.ndarray  # indexed by CLASS_ORDER

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.shape != (3,):
            raise ValidationError(f"probability triple must have 3 entries, got shape {p.shape}")
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValidationError(f"probabilities must lie in [0,1], got {p}")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValidationError(f"probabilities sum to {float(p.sum())!r}, expected 1 within 1e-9")
        object.__setattr__(self, "p", p)

    def __getitem__(self, cls: LesionClass) -> float:
        return float(self.p[cls.value])

    @classmethod
    def from_scores(cls, q) -> "ProbTriple":
        q = np.asarray(q, dtype=np.float64)
        total = float(q.sum())
        if not total > 0.0 or np.any(q < 0.0):
            raise ValidationError(f"class scores must be nonnegative with positive sum, got {q}")
        return cls(q / total)


@dataclass(frozen=True)
class BinaryScores:
    melanoma_score: float
    sk_score: float

    def __post_init__(self):
        for name, v in (("melanoma_score", self.melanoma_score), ("sk_score", self.sk_score)):
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0,1], got {v}")


@dataclass
class EnsembleMember:
    """One network's classifier stack over a set of FC layers."""

    network: NetworkId
    layers: tuple
    combine: str = COMBINE_AVERAGE
    classifiers: dict = field(default_factory=dict)  # LayerId -> MultiClassSvm (average mode)
    concat_classifier: MultiClassSvm | None = None  # concat mode

    def __post_init__(self):
        self.layers = tuple(layer for layer in LAYER_ORDER if layer in set(self.layers))
        if not self.layers:
            raise ValidationError("ensemble member needs at least one layer")
        if self.combine == COMBINE_AVERAGE:
            if set(self.classifiers) != set(self.layers):
                raise ValidationError("average mode needs one classifier per layer")
        elif self.combine == COMBINE_CONCAT:
            if self.concat_classifier is None:
                raise ValidationError("concat mode needs the concatenated-feature classifier")
        else:
            raise ValidationError(f"unknown combine mode {self.combine!r}")


def _normalize_rows(q: np.ndarray) -> np.ndarray:
    totals = q.sum(axis=1, keepdims=True)
    if np.any(totals <= 0.0):
        raise ValidationError("class scores must have positive sums")
    return q / totals


def member_probability_matrix(member: EnsembleMember, features) -> np.ndarray:
    """Fused per-sample triples (n x 3) for a batch of per-layer feature matrices."""
    for layer in member.layers:
        if layer not in features:
            raise MissingLayerError(layer.value)
    if member.combine == COMBINE_CONCAT:
        x = np.hstack([np.atleast_2d(features[layer]) for layer in member.layers])
        return _normalize_rows(member.concat_classifier.calibrated_scores(x))
    per_layer = [
        _normalize_rows(member.classifiers[layer].calibrated_scores(np.atleast_2d(features[layer])))
        for layer in member.layers
    ]
    return _normalize_rows(np.mean(per_layer, axis=0))


def member_probabilities(member: EnsembleMember, features) -> ProbTriple:
    """Triple for a single sample given its per-layer feature vectors."""
    batch = {layer: np.atleast_2d(vec) for layer, vec in features.items()}
    return ProbTriple(member_probability_matrix(member, batch)[0])


def fuse(triples) -> ProbTriple:
    """Arithmetic mean of the members' triples."""
    triples = list(triples)
    if not triples:
        raise ValidationError("cannot fuse an empty member list")
    return ProbTriple(np.mean([t.p for t in triples], axis=0))


def binary_scores(triple: ProbTriple) -> BinaryScores:
    return BinaryScores(
        melanoma_score=triple[LesionClass.MELANOMA],
        sk_score=triple[LesionClass.SEBORRHEIC_KERATOSIS],
    )


# ---------------------------------------------------------------------------
# persistence: one .npz per member

_FORMAT = "dermfuse-member/1"


def save_member(member: EnsembleMember, path, extra_meta: dict | None = None) -> None:
    meta = {
        "format": _FORMAT,
        "network": member.network.value,
        "layers": [layer.value for layer in member.layers],
        "combine": member.combine,
        "models": {},
    }
    if extra_meta:
        meta["extra"] = extra_meta
    arrays: dict[str, np.ndarray] = {}
    if member.combine == COMBINE_AVERAGE:
        for layer in member.layers:
            sub_meta, sub_arrays = multiclass_arrays(member.classifiers[layer], prefix=layer.value + "/")
            meta["models"][layer.value] = sub_meta
            arrays.update(sub_arrays)
    else:
        sub_meta, sub_arrays = multiclass_arrays(member.concat_classifier, prefix="concat/")
        meta["models"]["concat"] = sub_meta
        arrays.update(sub_arrays)
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_member(path) -> EnsembleMember:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != "meta"}
    if meta.get("format") != _FORMAT:
        raise ValidationError(f"unsupported member format {meta.get('format')!r}")
    network = NetworkId(meta["network"])
    layers = tuple(LayerId(name) for name in meta["layers"])
    if meta["combine"] == COMBINE_AVERAGE:
        classifiers = {
            layer: multiclass_from_arrays(meta["models"][layer.value], arrays, prefix=layer.value + "/")
            for layer in layers
        }
        return EnsembleMember(network=network, layers=layers, combine=COMBINE_AVERAGE, classifiers=classifiers)
    concat = multiclass_from_arrays(meta["models"]["concat"], arrays, prefix="concat/")
    return EnsembleMember(network=network, layers=layers, combine=COMBINE_CONCAT, concat_classifier=concat)


def member_meta(path) -> dict:
    with np.load(path) as data:
        return json.loads(bytes(data["meta"]).decode("utf-8"))
