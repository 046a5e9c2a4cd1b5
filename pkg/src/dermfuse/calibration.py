"""Sigmoid calibration of SVM margins to probabilities.

Fits p(f) = 1 / (1 + exp(A*f + B)) by penalized maximum likelihood with
smoothed targets, using Newton's method with backtracking line search. The
likelihood is evaluated in log-space and sigmoid arguments are clipped, so
fitting stays finite even on perfectly separated scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ValidationError

_GRAD_TOL = 1e-8
_MAX_ITER = 200
_CLIP = 35.0


@dataclass(frozen=True)
class PlattCalibrator:
    A: float
    B: float

    def __post_init__(self):
        if not (math.isfinite(self.A) and math.isfinite(self.B)):
            raise ValidationError(f"calibrator parameters must be finite, got A={self.A}, B={self.B}")


def apply_platt(cal: PlattCalibrator, f):
    """Map margin(s) f to probability 1/(1+exp(A*f+B)), strictly inside (0,1)."""
    z = np.clip(cal.A * np.asarray(f, dtype=np.float64) + cal.B, -_CLIP, _CLIP)
    p = 1.0 / (1.0 + np.exp(z))
    if np.ndim(f) == 0:
        return float(p)
    return p


def _nll(a: float, b: float, scores: np.ndarray, targets: np.ndarray) -> float:
    z = a * scores + b
    # sum of t*(-log p) + (1-t)*(-log(1-p)) = logaddexp(0,z) - (1-t)*z
    return float(np.sum(np.logaddexp(0.0, z) - (1.0 - targets) * z))


def fit_platt(scores, labels) -> PlattCalibrator:
    """Fit sigmoid parameters to margins and +-1 labels.

    Targets are smoothed to (N+ + 1)/(N+ + 2) and 1/(N- + 2), which keeps the
    maximum-likelihood solution finite even when the classes are separable.
    Raises ConvergenceError (carrying the final gradient norm) if the gradient
    infinity-norm is still >= 1e-8 after 200 Newton iterations.
    """
    f = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if f.ndim != 1 or f.shape != y.shape:
        raise ValidationError(f"scores and labels must be equal-length vectors, got {f.shape} vs {y.shape}")
    if not np.all(np.isfinite(f)):
        raise ValidationError("scores contain non-finite values")
    pos = y > 0
    n_pos = int(np.count_nonzero(pos))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("calibration needs at least one example of each sign")

    t = np.where(pos, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    a = 0.0
    b = math.log((n_neg + 1.0) / (n_pos + 1.0))
    value = _nll(a, b, f, t)

    grad_norm = math.inf
    for _ in range(_MAX_ITER):
        z = np.clip(a * f + b, -_CLIP, _CLIP)
        p = 1.0 / (1.0 + np.exp(z))
        d = t - p
        g_a = float(np.dot(d, f))
        g_b = float(np.sum(d))
        grad_norm = max(abs(g_a), abs(g_b))
        if grad_norm < _GRAD_TOL:
            return PlattCalibrator(a, b)

        w = p * (1.0 - p)
        h_aa = float(np.dot(w, f * f)) + 1e-12
        h_bb = float(np.sum(w)) + 1e-12
        h_ab = float(np.dot(w, f))
        det = h_aa * h_bb - h_ab * h_ab
        while det <= 0.0:
            h_aa += 1e-10
            h_bb += 1e-10
            det = h_aa * h_bb - h_ab * h_ab
        step_a = (h_ab * g_b - h_bb * g_a) / det
        step_b = (h_ab * g_a - h_aa * g_b) / det
        descent = g_a * step_a + g_b * step_b  # negative for a descent direction

        stepsize = 1.0
        while stepsize >= 1e-10:
            new_value = _nll(a + stepsize * step_a, b + stepsize * step_b, f, t)
            if new_value <= value + 1e-4 * stepsize * descent:
                a += stepsize * step_a
                b += stepsize * step_b
                value = new_value
                break
            stepsize *= 0.5
        else:
            break  # line search stalled; fall through to the convergence check

    z = np.clip(a * f + b, -_CLIP, _CLIP)
    p = 1.0 / (1.0 + np.exp(z))
    grad_norm = max(abs(float(np.dot(t - p, f))), abs(float(np.sum(t - p))))
    if grad_norm < _GRAD_TOL:
        return PlattCalibrator(a, b)
    raise ConvergenceError(
        f"sigmoid fit did not converge: gradient inf-norm {grad_norm:.3e} after {_MAX_ITER} iterations",
        residual=grad_norm,
    )
