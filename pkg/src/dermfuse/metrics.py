"""Binary-task evaluation: tie-aware ROC/AUC, thresholded accuracy, report table.

AUC is the Mann-Whitney statistic: wins and ties over positive/negative pairs
are counted in exact integer arithmetic (one pass over the sorted scores), so
the result is bit-identical to a brute-force pairwise count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import LesionClass
from .errors import ValidationError

# the five report configurations, in table order
CONFIG_ROWS = (
    ("alexnet_fc8", "AlexNet", "FC8"),
    ("alexnet_allfc", "AlexNet", "All FC"),
    ("vgg16_fc8", "VGG-16", "FC8"),
    ("vgg16_allfc", "VGG-16", "All FC"),
    ("fusion", "Fusion", "All FC"),
)
METRIC_KEYS = ("m_acc", "sk_acc", "m_auc", "sk_auc", "avg_auc")


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValidationError(f"scores and labels must be equal-length vectors, got {s.shape} vs {y.shape}")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores contain non-finite values")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0/1")
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("both classes must be present")
    return s, y.astype(np.int64), n_pos, n_neg


def _win_tie_counts(s: np.ndarray, y: np.ndarray) -> tuple[int, int]:
    """Integer counts of (positive strictly above negative, tied) pairs."""
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    wins = ties = 0
    neg_below = 0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        group_pos = int(np.count_nonzero(y_sorted[i:j]))
        group_neg = (j - i) - group_pos
        wins += group_pos * neg_below
        ties += group_pos * group_neg
        neg_below += group_neg
        i = j
    return wins, ties


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties count half."""
    s, y, n_pos, n_neg = _check_binary(scores, labels)
    wins, ties = _win_tie_counts(s, y)
    return (wins + 0.5 * ties) / (n_pos * n_neg)


@dataclass
class RocCurve:
    points: list[tuple[float, float]]  # (fpr, tpr), one per distinct threshold

    def __post_init__(self):
        pts = self.points
        if not pts or pts[0] != (0.0, 0.0) or pts[-1] != (1.0, 1.0):
            raise ValidationError("ROC curve must run from (0,0) to (1,1)")
        for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
            if f1 < f0 or t1 < t0:
                raise ValidationError("ROC coordinates must be nondecreasing")

    @property
    def area(self) -> float:
        total = 0.0
        for (f0, t0), (f1, t1) in zip(self.points, self.points[1:]):
            total += (f1 - f0) * (t1 + t0) / 2.0
        return total


def roc_curve(scores, labels) -> RocCurve:
    """Tie-grouped ROC: one operating point per distinct threshold, descending."""
    s, y, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int(np.count_nonzero(y_sorted[i:j]))
        fp += (j - i) - int(np.count_nonzero(y_sorted[i:j]))
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return RocCurve(points)


def accuracy_at(scores, labels, threshold: float = 0.5) -> float:
    """Fraction predicted correctly; a score exactly at the threshold is positive."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size == 0:
        raise ValidationError("cannot compute accuracy of an empty sample")
    if s.shape != y.shape:
        raise ValidationError("scores and labels must be equal-length vectors")
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise ValidationError("scores must lie in [0,1]")
    predicted = (s >= threshold).astype(np.int64)
    return float(np.mean(predicted == np.asarray(y).astype(np.int64)))


@dataclass
class EvalReport:
    """Per-configuration metrics in percent, full precision."""

    rows: dict[str, dict[str, float]]

    def __post_init__(self):
        for key, row in self.rows.items():
            missing = set(METRIC_KEYS) - set(row)
            if missing:
                raise ValidationError(f"report row {key!r} is missing {sorted(missing)}")
            expected = (row["m_auc"] + row["sk_auc"]) / 2.0
            if abs(row["avg_auc"] - expected) > 1e-9:
                raise ValidationError(f"report row {key!r}: avg_auc is not the mean of the two AUC columns")

    def to_json(self) -> str:
        return json.dumps({"unit": "percent", "rows": self.rows}, indent=2, sort_keys=True)

    def render_text(self) -> str:
        labels = {key: (net, layer) for key, net, layer in CONFIG_ROWS}
        header = f"{'Network':<10} {'Feature Layer':<14} {'M-ACC':>7} {'SK-ACC':>7} {'M-AUC':>7} {'SK-AUC':>7} {'Avg AUC':>8}"
        lines = [header, "-" * len(header)]
        for key, row in self.rows.items():
            net, layer = labels.get(key, (key, ""))
            lines.append(
                f"{net:<10} {layer:<14} "
                f"{row['m_acc']:>7.1f} {row['sk_acc']:>7.1f} "
                f"{row['m_auc']:>7.1f} {row['sk_auc']:>7.1f} {row['avg_auc']:>8.1f}"
            )
        return "\n".join(lines)


def build_report(predictions, truth) -> EvalReport:
    """Assemble the report from per-configuration scores and ground truth.

    predictions maps configuration key -> {image_id: (melanoma_score, sk_score)};
    truth maps image_id -> LesionClass. Every configuration must cover every
    ground-truth id.
    """
    ids = list(truth)
    if not ids:
        raise ValidationError("ground truth is empty")
    mel_labels = np.array([1 if truth[i] is LesionClass.MELANOMA else 0 for i in ids])
    sk_labels = np.array([1 if truth[i] is LesionClass.SEBORRHEIC_KERATOSIS else 0 for i in ids])

    known_order = [key for key, _, _ in CONFIG_ROWS if key in predictions]
    extras = [key for key in predictions if key not in known_order]
    rows = {}
    for key in known_order + extras:
        scored = predictions[key]
        for i in ids:
            if i not in scored:
                raise ValidationError(f"configuration {key!r} is missing a prediction for id {i!r}")
        mel = np.array([scored[i][0] for i in ids], dtype=np.float64)
        sk = np.array([scored[i][1] for i in ids], dtype=np.float64)
        m_auc = 100.0 * auc(mel, mel_labels)
        sk_auc = 100.0 * auc(sk, sk_labels)
        rows[key] = {
            "m_acc": 100.0 * accuracy_at(mel, mel_labels),
            "sk_acc": 100.0 * accuracy_at(sk, sk_labels),
            "m_auc": m_auc,
            "sk_auc": sk_auc,
            "avg_auc": (m_auc + sk_auc) / 2.0,
        }
    return EvalReport(rows)


def write_roc_csv(path, curve: RocCurve, provenance: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        fh.write("fpr,tpr\n")
        for fpr, tpr in curve.points:
            fh.write(f"{fpr:.9f},{tpr:.9f}\n")
