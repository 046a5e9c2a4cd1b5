"""Soft-margin kernel SVM trained by sequential minimal optimization.

The solver minimizes the standard dual

    (1/2) a' Q a - sum(a)   s.t.  0 <= a_i <= C,  sum(a_i * y_i) = 0,

with Q_ij = y_i y_j K(x_i, x_j), picking the maximal-violating pair each
iteration. Writing crit_t = y_t - f_nb(x_t) (f_nb is the decision value
without bias), optimality is m - M <= tol with

    m = max{ crit_t : t in I_up },   M = min{ crit_t : t in I_low },

and the bias (m + M)/2 then satisfies every KKT condition within tol/2.
Kernel rows are computed on demand and held in a bounded LRU cache; the total
number of kernel evaluations is capped and exceeding the cap is an error.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .calibration import PlattCalibrator, apply_platt, fit_platt
from .dataset import CLASS_ORDER, LesionClass
from .errors import ConvergenceError, ValidationError
from .rng import SplitMix64

log = logging.getLogger(__name__)

KERNEL_RBF = "rbf"
KERNEL_LINEAR = "linear"

DEFAULT_KERNEL_EVAL_CAP = 10_000_000
DEFAULT_CACHE_ROWS = 1024
# below this row count the Gram matrix is materialized up front
_FULL_GRAM_LIMIT = 3000


class MissingClassError(ValidationError):
    def __init__(self, cls):
        super().__init__(f"training data contains no {cls.key} examples")
        self.lesion_class = cls


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    gamma: float | None = None

    def __post_init__(self):
        if self.kind == KERNEL_RBF:
            if self.gamma is None or not self.gamma > 0:
                raise ValidationError(f"RBF kernel needs gamma > 0, got {self.gamma}")
        elif self.kind == KERNEL_LINEAR:
            if self.gamma is not None:
                raise ValidationError("linear kernel takes no gamma")
        else:
            raise ValidationError(f"unknown kernel kind {self.kind!r}")


def kernel_eval(spec: KernelSpec, x, z) -> float:
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ValidationError(f"kernel arguments differ in dimension: {x.shape} vs {z.shape}")
    if spec.kind == KERNEL_LINEAR:
        return float(np.dot(x, z))
    diff = x - z
    return float(np.exp(-spec.gamma * np.dot(diff, diff)))


def kernel_matrix(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All pairwise kernel values between the rows of a and rows of b."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"kernel arguments differ in dimension: {a.shape[1]} vs {b.shape[1]}")
    prod = a @ b.T
    if spec.kind == KERNEL_LINEAR:
        return prod
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * prod
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-spec.gamma * sq)


def auto_gamma(x: np.ndarray) -> float:
    """Scale-aware RBF width default: 1 / (d * mean per-dimension variance)."""
    x = np.asarray(x, dtype=np.float64)
    var = float(np.mean(np.var(x, axis=0)))
    if var <= 0.0:
        var = 1.0
    return 1.0 / (x.shape[1] * var)


@dataclass
class KernelSvmModel:
    support_vectors: np.ndarray  # m x d
    dual_coeffs: np.ndarray  # m, holds alpha_i * y_i
    bias: float
    kernel: KernelSpec
    C: float
    sv_index: np.ndarray = field(default=None)  # positions in the training set, for audits

    def __post_init__(self):
        sv = np.asarray(self.support_vectors, dtype=np.float64)
        dc = np.asarray(self.dual_coeffs, dtype=np.float64)
        if sv.ndim != 2 or dc.ndim != 1 or sv.shape[0] != dc.shape[0]:
            raise ValidationError("support vectors and dual coefficients disagree in length")
        mag = np.abs(dc)
        if dc.size and (np.any(mag <= 0.0) or np.any(mag > self.C * (1.0 + 1e-9))):
            raise ValidationError("dual coefficients must satisfy 0 < |a_i| <= C")
        if abs(float(np.sum(dc))) > 1e-8:
            raise ValidationError(f"sum of dual coefficients is {float(np.sum(dc)):.3e}, expected 0 within 1e-8")
        self.support_vectors = sv
        self.dual_coeffs = dc
        if self.sv_index is not None:
            self.sv_index = np.asarray(self.sv_index, dtype=np.int64)

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]


class _RowCache:
    """LRU cache of kernel rows with a global evaluation budget."""

    def __init__(self, spec, x, max_rows, eval_cap, gram=None):
        self.spec = spec
        self.x = x
        self.max_rows = max(2, max_rows)
        self.evals = 0 if gram is None else x.shape[0] ** 2
        self.eval_cap = eval_cap
        self.gram = gram
        self.rows: OrderedDict[int, np.ndarray] = OrderedDict()

    def row(self, i: int) -> np.ndarray:
        if self.gram is not None:
            return self.gram[i]
        cached = self.rows.get(i)
        if cached is not None:
            self.rows.move_to_end(i)
            return cached
        self.evals += self.x.shape[0]
        if self.evals > self.eval_cap:
            raise _BudgetExceeded()
        row = kernel_matrix(self.spec, self.x[i : i + 1], self.x)[0]
        self.rows[i] = row
        if len(self.rows) > self.max_rows:
            self.rows.popitem(last=False)
        return row


class _BudgetExceeded(Exception):
    pass


def smo_train(
    x: np.ndarray,
    y: np.ndarray,
    C: float,
    kernel: KernelSpec,
    tol: float = 1e-3,
    max_kernel_evals: int = DEFAULT_KERNEL_EVAL_CAP,
    cache_rows: int = DEFAULT_CACHE_ROWS,
    gram: np.ndarray | None = None,
) -> KernelSvmModel:
    """Train a binary SVM; deterministic for a fixed input order.

    gram, when given, must be the full kernel matrix of x against itself and
    is used instead of on-demand rows (the caller pays its n^2 evaluations
    against the budget up front).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError("need at least two training rows")
    if y.shape != (x.shape[0],) or not np.all(np.abs(y) == 1.0):
        raise ValidationError("labels must be a vector of -1/+1 matching the rows of x")
    if not np.all(np.isfinite(x)):
        raise ValidationError("training features contain non-finite values")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValidationError("both classes must be present")
    if not 1e-6 <= tol <= 1e-2:
        raise ValidationError(f"tol must lie in [1e-6, 1e-2], got {tol}")
    if not C > 0:
        raise ValidationError(f"C must be positive, got {C}")

    n = x.shape[0]
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of the dual objective being minimized
    cache = _RowCache(kernel, x, cache_rows, max_kernel_evals, gram=gram)
    pos = y > 0

    # each iteration touches at most 2 rows, so this cap only triggers when
    # the cache makes row lookups free and the eval budget cannot
    max_iter = max(1000, 4 * (max_kernel_evals // n))

    m_val = M_val = None
    try:
        for _ in range(max_iter):
            crit = -y * grad  # equals y_t - f_nb(x_t)
            up = (pos & (alpha < C)) | (~pos & (alpha > 0))
            low = (pos & (alpha > 0)) | (~pos & (alpha < C))
            m_val = np.max(crit[up]) if np.any(up) else None
            M_val = np.min(crit[low]) if np.any(low) else None
            if m_val is None or M_val is None or m_val - M_val <= tol:
                break

            i = int(np.flatnonzero(up)[np.argmax(crit[up])])
            j = int(np.flatnonzero(low)[np.argmin(crit[low])])

            row_i = cache.row(i)
            row_j = cache.row(j)
            quad = max(row_i[i] + row_j[j] - 2.0 * row_i[j], 1e-12)
            step = (crit[i] - crit[j]) / quad
            cap_i = (C - alpha[i]) if y[i] > 0 else alpha[i]
            cap_j = alpha[j] if y[j] > 0 else (C - alpha[j])
            step = min(step, cap_i, cap_j)
            if step <= 0.0:
                raise ConvergenceError(
                    f"SMO stalled with violating pair gap {m_val - M_val:.3e}",
                    residual=m_val - M_val,
                )
            alpha[i] = min(max(alpha[i] + y[i] * step, 0.0), C)
            alpha[j] = min(max(alpha[j] - y[j] * step, 0.0), C)
            grad += y * step * (row_i - row_j)
        else:
            raise ConvergenceError(
                f"SMO hit the iteration cap with violating pair gap {m_val - M_val:.3e}",
                residual=m_val - M_val,
            )
    except _BudgetExceeded:
        gap = (m_val - M_val) if m_val is not None and M_val is not None else None
        raise ConvergenceError(
            f"SMO exceeded the kernel evaluation budget ({max_kernel_evals}); "
            f"remaining KKT violation {gap}",
            residual=gap,
        ) from None

    if m_val is None:
        bias = float(M_val)
    elif M_val is None:
        bias = float(m_val)
    else:
        bias = float(m_val + M_val) / 2.0

    alpha, bias = _polish(x, y, alpha, bias, C, kernel, cache)

    keep = alpha > 1e-12 * C
    return KernelSvmModel(
        support_vectors=x[keep].copy(),
        dual_coeffs=(alpha * y)[keep],
        bias=bias,
        kernel=kernel,
        C=C,
        sv_index=np.flatnonzero(keep),
    )


def _kkt_worst(yf: np.ndarray, alpha: np.ndarray, C: float) -> float:
    at_zero = alpha == 0.0
    at_c = alpha >= C * (1.0 - 1e-12)
    free = ~at_zero & ~at_c
    worst = 0.0
    if np.any(at_zero):
        worst = max(worst, float(np.max(1.0 - yf[at_zero])))
    if np.any(free):
        worst = max(worst, float(np.max(np.abs(yf[free] - 1.0))))
    if np.any(at_c):
        worst = max(worst, float(np.max(yf[at_c] - 1.0)))
    return max(worst, 0.0)


def _polish(x, y, alpha, bias, C, kernel, cache):
    """Exact solve of the stationarity system on the converged free set.

    SMO stops as soon as the violating-pair gap is below tol, which leaves the
    free coefficients with path-dependent error of that order. Re-solving the
    equality-constrained subproblem on the identified free set (bound rows
    pinned at C) lands on the face optimum, making the result independent of
    the training-row order. The polished point is kept only if it stays in the
    box and does not worsen the KKT certificate.
    """
    lo = 1e-12 * C
    hi = C * (1.0 - 1e-12)
    free = (alpha > lo) & (alpha < hi)
    sv = alpha > lo
    n_free = int(np.count_nonzero(free))
    if n_free == 0:
        return alpha, bias
    if cache.gram is None:
        needed = x.shape[0] * (int(np.count_nonzero(sv)) + n_free)
        if cache.evals + needed > cache.eval_cap:
            return alpha, bias
        cache.evals += needed
        k_sv = kernel_matrix(kernel, x, x[sv])
    else:
        k_sv = cache.gram[:, sv]

    free_in_sv = free[sv]
    y_sv = y[sv]
    q_ff = (np.outer(y[free], y[free])) * k_sv[free][:, free_in_sv]
    bound = sv & ~free
    rhs_top = np.ones(n_free)
    if np.any(bound):
        k_fb = k_sv[free][:, ~free_in_sv]
        rhs_top -= y[free] * (k_fb @ (C * y[bound]))
        rhs_bot = -float(np.sum(C * y[bound]))
    else:
        rhs_bot = 0.0
    system = np.zeros((n_free + 1, n_free + 1))
    system[:n_free, :n_free] = q_ff
    system[:n_free, n_free] = y[free]
    system[n_free, :n_free] = y[free]
    rhs = np.append(rhs_top, rhs_bot)
    try:
        solution, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    except np.linalg.LinAlgError:
        return alpha, bias
    alpha_free = solution[:n_free]
    new_bias = float(solution[n_free])
    if not np.all(np.isfinite(solution)) or np.any(alpha_free < -1e-9) or np.any(alpha_free > C + 1e-9):
        return alpha, bias

    candidate = alpha.copy()
    candidate[free] = np.clip(alpha_free, 0.0, C)
    if abs(float(np.dot(y, candidate))) > 1e-9:
        return alpha, bias
    f_nb = k_sv @ (candidate[sv] * y_sv)
    old_f_nb = k_sv @ (alpha[sv] * y_sv)
    if _kkt_worst(y * (f_nb + new_bias), candidate, C) <= _kkt_worst(y * (old_f_nb + bias), alpha, C):
        return candidate, new_bias
    return alpha, bias


def decision_values(model: KernelSvmModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.dim:
        raise ValidationError(f"expected {model.dim}-dimensional inputs, got {x.shape[1]}")
    k = kernel_matrix(model.kernel, x, model.support_vectors)
    return k @ model.dual_coeffs + model.bias


def decision_value(model: KernelSvmModel, x) -> float:
    return float(decision_values(model, np.asarray(x, dtype=np.float64)[None, :])[0])


def dual_objective(model: KernelSvmModel) -> float:
    """Dual objective at the trained point (non-support rows contribute 0)."""
    dc = model.dual_coeffs
    k = kernel_matrix(model.kernel, model.support_vectors, model.support_vectors)
    return float(np.sum(np.abs(dc)) - 0.5 * dc @ k @ dc)


def kkt_violation(model: KernelSvmModel, x: np.ndarray, y: np.ndarray) -> float:
    """Largest violation of the KKT conditions over the full training set.

    Rows absent from the support set are treated as alpha = 0; support rows
    at C (within 1e-9 relative) as bound, anything else as free.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    alpha = np.zeros(x.shape[0])
    if model.sv_index is None:
        raise ValidationError("model carries no support-vector index; cannot audit KKT on training rows")
    alpha[model.sv_index] = np.abs(model.dual_coeffs)
    yf = y * decision_values(model, x)
    at_zero = alpha == 0.0
    at_c = alpha >= model.C * (1.0 - 1e-9)
    free = ~at_zero & ~at_c
    worst = 0.0
    if np.any(at_zero):
        worst = max(worst, float(np.max(1.0 - yf[at_zero])))
    if np.any(free):
        worst = max(worst, float(np.max(np.abs(yf[free] - 1.0))))
    if np.any(at_c):
        worst = max(worst, float(np.max(yf[at_c] - 1.0)))
    return max(worst, 0.0)


@dataclass
class MultiClassSvm:
    """One-vs-rest bundle: per-class binary machine plus its calibrator."""

    binary: dict[LesionClass, tuple[KernelSvmModel, PlattCalibrator]]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    kernel: KernelSpec
    C: float

    def __post_init__(self):
        if set(self.binary) != set(CLASS_ORDER):
            raise ValidationError("multi-class model must hold exactly one machine per lesion class")
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_std = np.asarray(self.feature_std, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.feature_mean.shape[0]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValidationError(f"expected {self.dim}-dimensional features, got {x.shape[1]}")
        return (x - self.feature_mean) / self.feature_std

    def decision_matrix(self, x: np.ndarray) -> np.ndarray:
        xs = self.standardize(x)
        return np.column_stack([decision_values(self.binary[c][0], xs) for c in CLASS_ORDER])

    def calibrated_scores(self, x: np.ndarray) -> np.ndarray:
        """Per-class calibrated probabilities q_c (not normalized across classes)."""
        xs = self.standardize(x)
        cols = []
        for c in CLASS_ORDER:
            model, cal = self.binary[c]
            cols.append(apply_platt(cal, decision_values(model, xs)))
        return np.column_stack(cols)


def _calibration_split(xs: np.ndarray, labels: np.ndarray, calib_fraction: float, seed: int):
    """Stratified row split that is independent of the input row order.

    Rows are ranked canonically (lexicographically by feature vector), the
    seeded shuffle runs over that ranking, and each side keeps canonical
    order, so permuting the training rows moves no sample across the split.
    """
    if not 0.0 < calib_fraction < 1.0:
        raise ValidationError(f"calib_fraction must be in (0,1), got {calib_fraction}")
    canonical = np.lexsort(xs.T[::-1])
    rank = np.empty(len(canonical), dtype=np.int64)
    rank[canonical] = np.arange(len(canonical))
    rng = SplitMix64(seed)
    inner, calib = [], []
    for cls in CLASS_ORDER:
        idx = [int(i) for i in canonical if labels[i] == cls.value]
        if len(idx) < 2:
            raise ValidationError(
                f"class {cls.key} has {len(idx)} rows; the calibration split would leave a side empty"
            )
        rng.shuffle(idx)
        n_cal = int(np.floor(calib_fraction * len(idx) + 0.5))
        n_cal = min(max(n_cal, 1), len(idx) - 1)
        calib.extend(idx[:n_cal])
        inner.extend(idx[n_cal:])
    inner.sort(key=lambda i: rank[i])
    calib.sort(key=lambda i: rank[i])
    return np.array(inner), np.array(calib)


def train_one_vs_rest(
    features: np.ndarray,
    labels,
    C=1.0,
    kernel: KernelSpec | str = "auto",
    tol: float = 1e-3,
    calib_fraction: float = 0.2,
    seed: int = 0,
    max_kernel_evals: int = DEFAULT_KERNEL_EVAL_CAP,
    cache_rows: int = DEFAULT_CACHE_ROWS,
) -> MultiClassSvm:
    """Train the 3-class one-vs-rest classifier with held-out Platt calibration.

    The rows are standardized (statistics stored with the model), a stratified
    calib_fraction of them is held out, each class machine is trained on the
    remainder, and each calibrator is fitted on the held-out margins only.
    C may be a single value or a list to grid-search by calibration accuracy.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray([cls.value if isinstance(cls, LesionClass) else int(cls) for cls in labels])
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValidationError("features and labels disagree in length")
    for cls in CLASS_ORDER:
        if not np.any(y == cls.value):
            raise MissingClassError(cls)

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    xs = (x - mean) / std

    if kernel == "auto":
        spec = KernelSpec(KERNEL_RBF, auto_gamma(xs))
    elif isinstance(kernel, KernelSpec):
        spec = kernel
        if spec.kind == KERNEL_RBF and spec.gamma is None:
            spec = KernelSpec(KERNEL_RBF, auto_gamma(xs))
    else:
        raise ValidationError(f"kernel must be 'auto' or a KernelSpec, got {kernel!r}")

    inner_idx, calib_idx = _calibration_split(xs, y, calib_fraction, seed)
    x_inner, y_inner = xs[inner_idx], y[inner_idx]
    x_calib, y_calib = xs[calib_idx], y[calib_idx]

    gram = None
    if x_inner.shape[0] <= _FULL_GRAM_LIMIT:
        gram = kernel_matrix(spec, x_inner, x_inner)

    candidates = [float(c) for c in (C if isinstance(C, (list, tuple)) else [C])]
    best = None
    for c_val in sorted(candidates):
        machines = {}
        for cls in CLASS_ORDER:
            sign = np.where(y_inner == cls.value, 1.0, -1.0)
            if not (np.any(sign > 0) and np.any(sign < 0)):
                raise ValidationError(f"inner split left class {cls.key} one-sided")
            machines[cls] = smo_train(
                x_inner, sign, c_val, spec, tol=tol,
                max_kernel_evals=max_kernel_evals, cache_rows=cache_rows, gram=gram,
            )
        if len(candidates) == 1:
            best = (c_val, machines)
            break
        margins = np.column_stack([decision_values(machines[c], x_calib) for c in CLASS_ORDER])
        predicted = np.argmax(margins, axis=1)
        acc = float(np.mean(predicted == y_calib))
        if best is None or acc > best[2]:
            best = (c_val, machines, acc)
    c_val, machines = best[0], best[1]
    if len(candidates) > 1:
        log.info("grid search over C=%s picked C=%g", sorted(candidates), c_val)

    binary = {}
    for cls in CLASS_ORDER:
        sign = np.where(y_calib == cls.value, 1.0, -1.0)
        margins = decision_values(machines[cls], x_calib)
        binary[cls] = (machines[cls], fit_platt(margins, sign))

    return MultiClassSvm(binary=binary, feature_mean=mean, feature_std=std, kernel=spec, C=c_val)


# ---------------------------------------------------------------------------
# persistence: one .npz per MultiClassSvm with a versioned JSON header entry

_FORMAT = "dermfuse-svm/1"


def _kernel_to_dict(spec: KernelSpec) -> dict:
    return {"kind": spec.kind, "gamma": spec.gamma}


def _kernel_from_dict(d: dict) -> KernelSpec:
    return KernelSpec(d["kind"], d.get("gamma"))


def multiclass_arrays(msvm: MultiClassSvm, prefix: str = "") -> tuple[dict, dict]:
    """Flatten a model into (meta, arrays) for embedding in an .npz container."""
    meta = {
        "format": _FORMAT,
        "kernel": _kernel_to_dict(msvm.kernel),
        "C": msvm.C,
        "classes": [c.key for c in CLASS_ORDER],
        "platt": {},
        "bias": {},
    }
    arrays = {
        prefix + "feature_mean": msvm.feature_mean,
        prefix + "feature_std": msvm.feature_std,
    }
    for cls in CLASS_ORDER:
        model, cal = msvm.binary[cls]
        arrays[prefix + cls.key + "/support_vectors"] = model.support_vectors
        arrays[prefix + cls.key + "/dual_coeffs"] = model.dual_coeffs
        arrays[prefix + cls.key + "/sv_index"] = model.sv_index
        meta["platt"][cls.key] = [cal.A, cal.B]
        meta["bias"][cls.key] = model.bias
    return meta, arrays


def multiclass_from_arrays(meta: dict, arrays, prefix: str = "") -> MultiClassSvm:
    if meta.get("format") != _FORMAT:
        raise ValidationError(f"unsupported model format {meta.get('format')!r}")
    spec = _kernel_from_dict(meta["kernel"])
    binary = {}
    for cls in CLASS_ORDER:
        model = KernelSvmModel(
            support_vectors=arrays[prefix + cls.key + "/support_vectors"],
            dual_coeffs=arrays[prefix + cls.key + "/dual_coeffs"],
            bias=float(meta["bias"][cls.key]),
            kernel=spec,
            C=float(meta["C"]),
            sv_index=arrays[prefix + cls.key + "/sv_index"],
        )
        a, b = meta["platt"][cls.key]
        binary[cls] = (model, PlattCalibrator(float(a), float(b)))
    return MultiClassSvm(
        binary=binary,
        feature_mean=arrays[prefix + "feature_mean"],
        feature_std=arrays[prefix + "feature_std"],
        kernel=spec,
        C=float(meta["C"]),
    )


def save_multiclass(msvm: MultiClassSvm, path) -> None:
    meta, arrays = multiclass_arrays(msvm)
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_multiclass(path) -> MultiClassSvm:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != "meta"}
    return multiclass_from_arrays(meta, arrays)
