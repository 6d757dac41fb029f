"""Third-order polynomial score calibration with a monotonicity guard.

A cubic y = a0 + a1*x + a2*x^2 + a3*x^3 is fit by least squares via the
normal equations on a column-scaled Vandermonde system. If the
unconstrained fit is not monotone non-decreasing over the fitted
prediction range, the quadratic and cubic coefficients are shrunk
toward zero on a fixed grid, refitting intercept and slope at each
step, and the first monotone candidate wins; the final fallback is the
constant map at the mean rating. Applied outputs are clipped to [1, 5].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quality import SCORE_MAX, SCORE_MIN

MONOTONE_GRID_POINTS = 1001
SHRINK_STEPS = 201


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationMap:
    coefficients: tuple[float, float, float, float]  # a0, a1, a2, a3
    fit_domain: tuple[float, float]
    clip_range: tuple[float, float] = (SCORE_MIN, SCORE_MAX)

    def poly(self, x: np.ndarray) -> np.ndarray:
        a0, a1, a2, a3 = self.coefficients
        x = np.asarray(x, dtype=np.float64)
        return a0 + x * (a1 + x * (a2 + x * a3))

    def is_monotone(self) -> bool:
        return _monotone_on(self.coefficients, self.fit_domain)


def _monotone_on(coeffs, domain) -> bool:
    """Derivative >= 0 on an evenly spaced grid over the domain."""
    _, a1, a2, a3 = coeffs
    lo, hi = domain
    grid = np.linspace(lo, hi, MONOTONE_GRID_POINTS)
    deriv = a1 + 2.0 * a2 * grid + 3.0 * a3 * grid * grid
    return bool((deriv >= -1e-12).all())


def _solve_scaled_normal(design: np.ndarray, target: np.ndarray) -> np.ndarray:
    scales = np.abs(design).max(axis=0)
    scales[scales == 0.0] = 1.0
    scaled = design / scales
    gram = scaled.T @ scaled
    try:
        coeffs = np.linalg.solve(gram, scaled.T @ target)
    except np.linalg.LinAlgError as exc:
        raise CalibrationError(f"rank-deficient calibration system: {exc}") from exc
    return coeffs / scales


def fit_calibration(pred, subj) -> CalibrationMap:
    """Least-squares cubic from predictions to subjective scores."""
    pred = np.asarray(pred, dtype=np.float64)
    subj = np.asarray(subj, dtype=np.float64)
    if pred.shape != subj.shape or pred.ndim != 1:
        raise CalibrationError("pred and subj must be equal-length vectors")
    if len(pred) < 4:
        raise CalibrationError(f"need at least 4 points, got {len(pred)}")
    if float(pred.std()) < 1e-9:
        raise CalibrationError("predictions are (nearly) constant; cannot calibrate")

    domain = (float(pred.min()), float(pred.max()))
    vander = np.stack([np.ones_like(pred), pred, pred**2, pred**3], axis=1)
    full = _solve_scaled_normal(vander, subj)
    if _monotone_on(full, domain):
        return CalibrationMap(tuple(float(c) for c in full), domain)

    linear_design = vander[:, :2]
    for s in np.linspace(1.0, 0.0, SHRINK_STEPS)[1:]:
        a2, a3 = s * full[2], s * full[3]
        residual = subj - (a2 * pred**2 + a3 * pred**3)
        a0, a1 = _solve_scaled_normal(linear_design, residual)
        candidate = (float(a0), float(a1), float(a2), float(a3))
        if _monotone_on(candidate, domain):
            return CalibrationMap(candidate, domain)

    # Even the plain linear fit slopes downward: fall back to a constant.
    return CalibrationMap((float(subj.mean()), 0.0, 0.0, 0.0), domain)


def apply_calibration(mapping: CalibrationMap, pred) -> np.ndarray:
    """Evaluate the polynomial per element, then clip to the score range."""
    lo, hi = mapping.clip_range
    return np.clip(mapping.poly(pred), lo, hi)


# ------------------------------------------------------------ persistence
#
# Text format, one mapping per line: group key, dimension, the four
# coefficients at full precision, then the fit domain bounds.

_HEADER = ["group", "dim", "a0", "a1", "a2", "a3", "domain_lo", "domain_hi"]


def save_calibration_maps(path, maps: dict[tuple[str, str], CalibrationMap]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HEADER)
        for (group, dim), mapping in sorted(maps.items()):
            a0, a1, a2, a3 = mapping.coefficients
            lo, hi = mapping.fit_domain
            writer.writerow([group, dim, repr(a0), repr(a1), repr(a2), repr(a3), repr(lo), repr(hi)])


def load_calibration_maps(path) -> dict[tuple[str, str], CalibrationMap]:
    maps: dict[tuple[str, str], CalibrationMap] = {}
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _HEADER:
            raise CalibrationError(f"{path}: unexpected calibration header {header}")
        for row in reader:
            if not row:
                continue
            group, dim, a0, a1, a2, a3, lo, hi = row
            maps[(group, dim)] = CalibrationMap(
                (float(a0), float(a1), float(a2), float(a3)), (float(lo), float(hi))
            )
    return maps
