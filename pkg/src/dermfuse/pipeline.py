"""Batch orchestration: extract -> train -> predict -> evaluate.

Every stage reads/writes files under the configured output directory and is
deterministic for a fixed config and seed; the prediction CSVs of two runs
with identical inputs are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import ensemble as ens
from . import features as fc
from .config import ExperimentConfig
from .embedding import LAYER_ORDER, LayerId, NetworkId, load_onnx_backend, mock_backend
from .errors import ValidationError
from .metrics import build_report, roc_curve, write_roc_csv
from .preprocess import (
    ALL_TAGS,
    IDENTITY_TAG,
    PreprocessedImage,
    apply_tag,
    center_rgb,
    dump_tensor,
    resize_bicubic,
)
from .svm import KERNEL_LINEAR, KERNEL_RBF, KernelSpec, train_one_vs_rest

log = logging.getLogger(__name__)

MEMBER_CONFIGS = (
    ("alexnet_fc8", "alexnet", ("fc8",)),
    ("alexnet_allfc", "alexnet", None),  # None means the configured layer set
    ("vgg16_fc8", "vgg16", ("fc8",)),
    ("vgg16_allfc", "vgg16", None),
)


def _member_rows(cfg: ExperimentConfig):
    for key, network, layers in MEMBER_CONFIGS:
        if network in cfg.networks:
            yield key, network, tuple(layers or cfg.layers)


def _backend_for(cfg: ExperimentConfig, network: NetworkId):
    if cfg.backend == "mock":
        return mock_backend(network, cfg.mock_seed)
    return load_onnx_backend(cfg.model_paths[network.value], network)


def _backend_fingerprint(cfg: ExperimentConfig, network: NetworkId) -> str:
    if cfg.backend == "mock":
        return f"mock:{cfg.mock_seed}"
    digest = hashlib.sha256()
    with open(cfg.model_paths[network.value], "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return f"onnx:{digest.hexdigest()[:16]}"


def _input_hash(cfg: ExperimentConfig, manifest_path, image_dir, network: NetworkId, augmented: bool) -> str:
    """Content hash of everything an extraction depends on."""
    digest = hashlib.sha256()
    with open(manifest_path, "rb") as fh:
        digest.update(fh.read())
    labels = ds.load_labels(manifest_path)
    for image_id in labels:
        path = ds._find_image_file(Path(image_dir), image_id)
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                digest.update(chunk)
    digest.update(
        json.dumps(
            {
                "layers": cfg.layers,
                "augmented": augmented,
                "backend": _backend_fingerprint(cfg, network),
                "network": network.value,
            },
            sort_keys=True,
        ).encode("utf-8")
    )
    return digest.hexdigest()


def _map_ordered(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _embed_rows(image: ds.LabeledImage, backend, layers, augmented: bool, dump_dir=None):
    tensor = resize_bicubic(center_rgb(image.pixels), backend.input_side)
    tags = ALL_TAGS if augmented else (IDENTITY_TAG,)
    rows = []
    for tag in tags:
        pre = PreprocessedImage(tensor=apply_tag(tensor, tag), source_id=image.id, variant=tag)
        if dump_dir is not None:
            dump_tensor(
                Path(dump_dir) / f"{image.id}_{tag.variant_id}_{backend.network.value}.bin", pre.tensor
            )
        embedded = backend.embed(pre.tensor)
        rows.append((image.id, tag, np.concatenate([embedded[layer] for layer in layers])))
    return rows


def _cache_base(cfg: ExperimentConfig, dataset_name: str, network: NetworkId) -> Path:
    return Path(cfg.out_dir) / "features" / f"{dataset_name}_{network.value}"


def run_extract(cfg: ExperimentConfig, dump_dir=None) -> list[Path]:
    """Embed both datasets with every configured network, skipping fresh caches.

    dump_dir, when given, receives every preprocessed tensor as a flat binary
    debug file (shape header line + little-endian float32).
    """
    cfg.validate(require_train=cfg.train_manifest is not None,
                 require_test=cfg.test_manifest is not None,
                 require_backend=True)
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    jobs = []
    if cfg.train_manifest:
        jobs.append(("train", cfg.train_manifest, cfg.train_images, cfg.augment_train))
    if cfg.test_manifest:
        jobs.append(("test", cfg.test_manifest, cfg.test_images, False))
    if not jobs:
        raise ValidationError("config names neither a train nor a test dataset")

    layers = [layer for layer in LAYER_ORDER if layer.value in set(cfg.layers)]
    if not layers:
        raise ValidationError(f"no recognized layers in {cfg.layers!r}")
    written = []
    for dataset_name, manifest, image_dir, augmented in jobs:
        dataset = None
        for network_name in cfg.networks:
            network = NetworkId(network_name)
            base = _cache_base(cfg, dataset_name, network)
            fresh = _input_hash(cfg, manifest, image_dir, network, augmented)
            if fc.cache_hash(base) == fresh:
                log.info("feature cache %s is current; skipping", base)
                continue
            if dataset is None:
                dataset = ds.load_manifest(manifest, image_dir)
                if len(dataset) == 0:
                    raise ValidationError(f"dataset {dataset_name!r} is empty")
            backend = _backend_for(cfg, network)
            per_image = _map_ordered(
                lambda img: _embed_rows(img, backend, layers, augmented, dump_dir=dump_dir),
                dataset.images,
                cfg.workers,
            )
            rows = [(sid, tag) for image_rows in per_image for sid, tag, _ in image_rows]
            matrix = np.vstack([vec for image_rows in per_image for _, _, vec in image_rows])
            fc.write_feature_cache(
                base, matrix, rows, fc.layer_offsets(layers),
                {
                    "network": network.value,
                    "dataset": dataset_name,
                    "input_hash": fresh,
                    "config_hash": cfg.config_hash(),
                    "seed": cfg.split_seed,
                },
            )
            log.info("wrote %d feature rows to %s", matrix.shape[0], base)
            written.append(base)
    return written


def _kernel_from_config(cfg: ExperimentConfig):
    kind = cfg.kernel.get("kind", KERNEL_RBF)
    gamma = cfg.kernel.get("gamma", "auto")
    if kind == KERNEL_LINEAR:
        return KernelSpec(KERNEL_LINEAR)
    if kind != KERNEL_RBF:
        raise ValidationError(f"unknown kernel kind {kind!r}")
    if gamma == "auto" or gamma is None:
        return "auto"
    return KernelSpec(KERNEL_RBF, float(gamma))


def _training_row_mask(index, split: ds.DatasetSplit) -> np.ndarray:
    tags = fc.row_tags(index)
    if split.unit == ds.SPLIT_UNIT_IMAGE:
        chosen = set(split.train_ids)
        return np.array([sid in chosen for sid, _ in tags])
    chosen = set(split.train_ids)
    return np.array([f"{sid}::{tag.variant_id}" in chosen for sid, tag in tags])


def _models_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "models"


def run_train(cfg: ExperimentConfig) -> list[Path]:
    """Train the per-configuration classifiers from the cached train features."""
    cfg.validate(require_train=True)
    labels = ds.load_labels(cfg.train_manifest)
    if any(lbl is None for lbl in labels.values()):
        raise ValidationError("training manifest must be labeled")

    split = ds.split_ids(
        list(labels), cfg.split_fraction, cfg.split_seed,
        unit=cfg.split_unit, stratified=cfg.stratified, labels=labels,
    )
    models_dir = _models_dir(cfg)
    models_dir.mkdir(parents=True, exist_ok=True)
    ds.save_split(split, models_dir / "split.txt")

    kernel = _kernel_from_config(cfg)
    written = []
    allfc_members = []
    for key, network_name, layer_names in _member_rows(cfg):
        network = NetworkId(network_name)
        matrix, index = fc.read_feature_cache(_cache_base(cfg, "train", network))
        mask = _training_row_mask(index, split)
        if not np.any(mask):
            raise ValidationError("the training split selects no feature rows")
        row_labels = [labels[sid] for (sid, _), keep in zip(fc.row_tags(index), mask) if keep]
        layers = tuple(LayerId(name) for name in layer_names)

        if cfg.combine == ens.COMBINE_AVERAGE:
            classifiers = {}
            for layer in layers:
                x = matrix[mask][:, fc.layer_slice(index, layer)].astype(np.float64)
                classifiers[layer] = train_one_vs_rest(
                    x, row_labels, C=cfg.C, kernel=kernel, tol=cfg.tol,
                    calib_fraction=cfg.calib_fraction, seed=cfg.split_seed,
                )
            member = ens.EnsembleMember(
                network=network, layers=layers, combine=ens.COMBINE_AVERAGE, classifiers=classifiers
            )
            chosen_c = {layer.value: classifiers[layer].C for layer in layers}
        else:
            x = np.hstack([matrix[mask][:, fc.layer_slice(index, layer)] for layer in layers]).astype(np.float64)
            concat = train_one_vs_rest(
                x, row_labels, C=cfg.C, kernel=kernel, tol=cfg.tol,
                calib_fraction=cfg.calib_fraction, seed=cfg.split_seed,
            )
            member = ens.EnsembleMember(
                network=network, layers=layers, combine=ens.COMBINE_CONCAT, concat_classifier=concat
            )
            chosen_c = {"concat": concat.C}

        path = models_dir / f"member_{key}.npz"
        ens.save_member(
            member, path,
            extra_meta={
                "config_hash": cfg.config_hash(),
                "seed": cfg.split_seed,
                "tol": cfg.tol,
                "chosen_C": chosen_c,
            },
        )
        log.info("trained %s (%s on %s)", key, network.value, ",".join(l.value for l in layers))
        written.append(path)
        if key.endswith("_allfc"):
            allfc_members.append(key)

    fusion = {
        "format": "dermfuse-fusion/1",
        "members": allfc_members,
        "config_hash": cfg.config_hash(),
        "seed": cfg.split_seed,
    }
    fusion_path = models_dir / "fusion.json"
    with open(fusion_path, "w", encoding="utf-8") as fh:
        json.dump(fusion, fh, indent=2)
    written.append(fusion_path)
    return written


def _identity_features(cfg: ExperimentConfig, network: NetworkId):
    matrix, index = fc.read_feature_cache(_cache_base(cfg, "test", network))
    tags = fc.row_tags(index)
    keep = [i for i, (_, tag) in enumerate(tags) if tag == IDENTITY_TAG]
    ids = [tags[i][0] for i in keep]
    return ids, matrix[keep], index


def run_predict(cfg: ExperimentConfig) -> list[Path]:
    """Score the test set with every trained configuration, plus the fusion."""
    cfg.validate(require_test=True)
    models_dir = _models_dir(cfg)
    pred_dir = Path(cfg.out_dir) / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)

    member_keys = [key for key, _, _ in _member_rows(cfg)]
    if not ds.load_labels(cfg.test_manifest):
        log.warning("test manifest %s lists no images; writing header-only CSVs", cfg.test_manifest)
        written = []
        for key in member_keys + ["fusion"]:
            path = pred_dir / f"{key}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                fh.write(f"# {cfg.provenance()}\n")
                fh.write("image_id,melanoma_score,sk_score\n")
            written.append(path)
        return written
    triples: dict[str, np.ndarray] = {}
    ids_ref: list[str] | None = None
    for key in member_keys:
        member = ens.load_member(models_dir / f"member_{key}.npz")
        ids, matrix, index = _identity_features(cfg, member.network)
        if ids_ref is None:
            ids_ref = ids
        elif ids != ids_ref:
            raise ValidationError("test feature caches disagree on the image list; re-run extract")
        features = {
            layer: matrix[:, fc.layer_slice(index, layer)].astype(np.float64) for layer in member.layers
        }
        if ids:
            triples[key] = ens.member_probability_matrix(member, features)
        else:
            triples[key] = np.zeros((0, 3))

    fusion_path = models_dir / "fusion.json"
    if fusion_path.is_file():
        with open(fusion_path, encoding="utf-8") as fh:
            fusion_members = json.load(fh)["members"]
        if fusion_members:
            triples["fusion"] = np.mean([triples[k] for k in fusion_members], axis=0)

    written = []
    for key, probs in triples.items():
        path = pred_dir / f"{key}.csv"
        if probs.size and (np.any(probs < 0.0) or np.any(probs > 1.0)):
            raise ValidationError(f"configuration {key!r} produced scores outside [0,1]")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {cfg.provenance()}\n")
            fh.write("image_id,melanoma_score,sk_score\n")
            for image_id, row in zip(ids_ref, probs):
                fh.write(f"{image_id},{row[0]:.9f},{row[1]:.9f}\n")
        if not ids_ref:
            log.warning("test manifest is empty; wrote header-only CSV %s", path)
        written.append(path)
    return written


def read_predictions_csv(path) -> dict[str, tuple[float, float]]:
    out: dict[str, tuple[float, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        header = next(reader, None)
        if header != ["image_id", "melanoma_score", "sk_score"]:
            raise ValidationError(f"unexpected prediction CSV header in {path}: {header}")
        for row in reader:
            if not row:
                continue
            out[row[0]] = (float(row[1]), float(row[2]))
    return out


def run_evaluate(cfg: ExperimentConfig) -> Path:
    """Compare prediction CSVs against the labeled test manifest."""
    cfg.validate(require_test=True)
    truth = ds.load_labels(cfg.test_manifest)
    if any(lbl is None for lbl in truth.values()):
        raise ValidationError("evaluation needs a labeled test manifest")

    pred_dir = Path(cfg.out_dir) / "predictions"
    configured = [key for key, _, _ in _member_rows(cfg)] + ["fusion"]
    predictions = {}
    for key in configured:
        path = pred_dir / f"{key}.csv"
        if path.is_file():
            predictions[key] = read_predictions_csv(path)
    if not predictions:
        raise ValidationError(f"no prediction CSVs found under {pred_dir} (run 'dermfuse predict' first)")

    report = build_report(predictions, truth)
    out_dir = Path(cfg.out_dir)
    report_json = out_dir / "report.json"
    payload = json.loads(report.to_json())
    payload["provenance"] = cfg.provenance()
    with open(report_json, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    with open(out_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(f"# {cfg.provenance()}\n")
        fh.write(report.render_text() + "\n")

    roc_dir = out_dir / "roc"
    roc_dir.mkdir(parents=True, exist_ok=True)
    ids = list(truth)
    for key, scored in predictions.items():
        mel = [scored[i][0] for i in ids]
        sk = [scored[i][1] for i in ids]
        mel_labels = [1 if truth[i] is ds.LesionClass.MELANOMA else 0 for i in ids]
        sk_labels = [1 if truth[i] is ds.LesionClass.SEBORRHEIC_KERATOSIS else 0 for i in ids]
        write_roc_csv(roc_dir / f"{key}_melanoma.csv", roc_curve(mel, mel_labels), cfg.provenance())
        write_roc_csv(roc_dir / f"{key}_keratosis.csv", roc_curve(sk, sk_labels), cfg.provenance())
    return report_json
