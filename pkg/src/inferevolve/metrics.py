"""Ground-truth evaluation metrics and the scalarized search scores.

All functions are pure. Aggregation over replicates happens in the
executor; this module works on single vectors or replicate-level lists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ITEMetrics

TARGET_COVERAGE = 0.9


@dataclass(frozen=True)
class IntervalEstimate:
    """Point estimate of a replicate-level effect with a 90% interval."""

    tau_hat: float
    lb: float
    ub: float
    method: str = ""

    def __post_init__(self) -> None:
        vals = (self.tau_hat, self.lb, self.ub)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("interval estimate must be finite")
        if self.lb > self.ub:
            raise ValueError(f"lb {self.lb} > ub {self.ub}")

    @property
    def width(self) -> float:
        return self.ub - self.lb


@dataclass(frozen=True)
class ITEEstimate:
    """Per-unit treatment effect estimates plus their average."""

    ite_hat: np.ndarray
    ate_hat: float
    method: str = ""

    def __post_init__(self) -> None:
        arr = np.asarray(self.ite_hat, dtype=float)
        object.__setattr__(self, "ite_hat", arr)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("ite_hat must be a nonempty 1-D vector")
        if not (np.isfinite(arr).all() and math.isfinite(self.ate_hat)):
            raise ValueError("ITE estimate must be finite")


def _check_pair(tau_hat, tau_true) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(tau_hat, dtype=float)
    b = np.asarray(tau_true, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty input")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("non-finite input")
    return a, b


def sqrt_pehe(tau_hat, tau_true) -> float:
    """Unit-level RMSE of treatment effect estimates."""
    a, b = _check_pair(tau_hat, tau_true)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def abs_ate_error(tau_hat, tau_true) -> float:
    """Absolute difference between estimated and true average effects."""
    a, b = _check_pair(tau_hat, tau_true)
    return float(abs(a.mean() - b.mean()))


def satt_rmse_coverage(
    estimates: list[IntervalEstimate], truths: list[float]
) -> dict[str, float]:
    """Replicate-level RMSE, 90%-interval coverage, and mean interval width."""
    if len(estimates) == 0 or len(estimates) != len(truths):
        raise ValueError("estimates and truths must be equal-length and nonempty")
    tau = np.array([e.tau_hat for e in estimates])
    truth = np.asarray(truths, dtype=float)
    covered = np.array([e.lb <= t <= e.ub for e, t in zip(estimates, truths)])
    return {
        "rmse": float(np.sqrt(np.mean((tau - truth) ** 2))),
        "coverage": float(covered.mean()),
        "mean_width": float(np.mean([e.width for e in estimates])),
    }


def phi(x: float) -> float:
    """Monotone normalization log(1+x)/(1+log(1+x)), mapping [0,inf) to [0,1)."""
    if not (math.isfinite(x) and x >= 0):
        raise ValueError(f"phi requires finite x >= 0, got {x}")
    lx = math.log1p(x)
    return lx / (1.0 + lx)


def score_ite(mean_sqrt_pehe: float, mean_abs_ate: float, lam: float) -> float:
    """Scalarized cross-sectional search score in (0, 1]."""
    if mean_sqrt_pehe < 0 or mean_abs_ate < 0:
        raise ValueError("error metrics must be nonnegative")
    return 1.0 / (1.0 + math.log1p(mean_sqrt_pehe) + lam * math.log1p(mean_abs_ate))


def score_acic(rmse: float, coverage: float, lam: float) -> float:
    """Scalarized panel search score in (0, 1], peaking at 90% coverage."""
    if rmse < 0:
        raise ValueError("rmse must be nonnegative")
    if not (0.0 <= coverage <= 1.0):
        raise ValueError(f"coverage {coverage} outside [0, 1]")
    gap = abs(coverage - TARGET_COVERAGE) / TARGET_COVERAGE
    return 1.0 / (1.0 + math.log1p(rmse) + lam * math.log1p(gap))


def true_satt(replicate) -> float:
    """Patient-weighted true SATT of a panel replicate.

    Uses the truth record's explicit SATT when present, otherwise the
    patient-count-weighted treated-unit mean of Y(1)-Y(0) over post
    periods.
    """
    truth = replicate.truth_record()
    if truth is None:
        raise ValueError(f"replicate {replicate.replicate_id} has no truth record")
    if truth.satt_true is not None:
        return float(truth.satt_true)
    rows = replicate.rows
    mask = (rows["Z"].to_numpy() == 1) & (rows["post"].to_numpy() == 1)
    if not mask.any():
        raise ValueError("no treated post-period rows")
    n = rows.loc[mask, "n.patients"].to_numpy(dtype=float)
    if np.any(n < 1):
        raise ValueError("missing patient counts")
    effect = truth.y1[mask] - truth.y0[mask]
    return float(np.sum(n * effect) / np.sum(n))


def normalize_ite_metrics(bundle: ITEMetrics, pooled_ite_sd: float) -> ITEMetrics:
    """Divide both cross-sectional metrics by the pooled true-ITE sd."""
    if not (math.isfinite(pooled_ite_sd) and pooled_ite_sd > 0):
        raise ValueError(f"pooled_ite_sd must be positive, got {pooled_ite_sd}")
    return ITEMetrics(
        mean_sqrt_pehe=bundle.mean_sqrt_pehe / pooled_ite_sd,
        mean_abs_ate_err=bundle.mean_abs_ate_err / pooled_ite_sd,
    )
