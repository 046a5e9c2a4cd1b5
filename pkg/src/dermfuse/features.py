"""Feature cache container: one matrix file + JSON row index per (dataset, network).

Layout (documented contract):
  <base>.npy         float32 matrix, C order, one row per (image, variant);
                     columns are the requested layers concatenated in
                     fc6, fc7, fc8 order
  <base>.index.json  {"format": "dermfuse-features/1", "network": ...,
                      "layer_offsets": {"fc6": [start, stop], ...},
                      "rows": [[source_id, rotation, flipped], ...],
                      "input_hash": ..., "config_hash": ..., "seed": ...}
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .embedding import LAYER_ORDER, LayerId
from .errors import ValidationError
from .preprocess import AugmentTag


def layer_offsets(layers) -> dict[str, tuple[int, int]]:
    wanted = [layer for layer in LAYER_ORDER if layer in set(layers)]
    offsets = {}
    start = 0
    for layer in wanted:
        offsets[layer.value] = (start, start + layer.dim)
        start += layer.dim
    return offsets


def matrix_path(base) -> Path:
    return Path(str(base) + ".npy")


def index_path(base) -> Path:
    return Path(str(base) + ".index.json")


def write_feature_cache(base, matrix: np.ndarray, rows, offsets, meta: dict) -> None:
    """Atomically write matrix + index; partial files are removed on failure."""
    mpath, ipath = matrix_path(base), index_path(base)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    tmp_m = mpath.with_suffix(".npy.tmp")
    tmp_i = ipath.with_suffix(".json.tmp")
    try:
        with open(tmp_m, "wb") as fh:
            np.save(fh, np.ascontiguousarray(matrix, dtype=np.float32))
        index = dict(meta)
        index["format"] = "dermfuse-features/1"
        index["layer_offsets"] = {k: list(v) for k, v in offsets.items()}
        index["rows"] = [[sid, tag.rotation, tag.flipped] for sid, tag in rows]
        with open(tmp_i, "w", encoding="utf-8") as fh:
            json.dump(index, fh)
        os.replace(tmp_m, mpath)
        os.replace(tmp_i, ipath)
    except BaseException:
        for p in (tmp_m, tmp_i, mpath, ipath):
            try:
                os.unlink(p)
            except OSError:
                pass
        raise


def read_feature_cache(base) -> tuple[np.ndarray, dict]:
    mpath, ipath = matrix_path(base), index_path(base)
    if not mpath.is_file() or not ipath.is_file():
        raise ValidationError(f"feature cache not found: {mpath} (run 'dermfuse extract' first)")
    with open(ipath, encoding="utf-8") as fh:
        index = json.load(fh)
    if index.get("format") != "dermfuse-features/1":
        raise ValidationError(f"unsupported feature cache format in {ipath}")
    matrix = np.load(mpath)
    if matrix.shape[0] != len(index["rows"]):
        raise ValidationError(f"feature cache {mpath} row count disagrees with its index")
    return matrix, index


def cache_hash(base) -> str | None:
    """The recorded input hash, or None when the cache does not exist."""
    ipath = index_path(base)
    if not ipath.is_file():
        return None
    try:
        with open(ipath, encoding="utf-8") as fh:
            return json.load(fh).get("input_hash")
    except (OSError, json.JSONDecodeError):
        return None


def row_tags(index) -> list[tuple[str, AugmentTag]]:
    return [(sid, AugmentTag(int(rot), bool(flip))) for sid, rot, flip in index["rows"]]


def layer_slice(index, layer: LayerId) -> slice:
    if layer.value not in index["layer_offsets"]:
        raise ValidationError(f"feature cache does not contain layer {layer.value}")
    start, stop = index["layer_offsets"][layer.value]
    return slice(int(start), int(stop))
