"""Observed-data proxy objectives for search without counterfactual truth.

Cross-sectional benchmarks get doubly robust pseudo-outcomes from
two-fold cross-fitted nuisances (ridge and boosted outcome families,
averaged); panel benchmarks get a doubly robust
difference-in-differences pseudo-target per replicate. Both feed
composite losses mapped to scores via 1/(1+loss).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .bench_data import (
    CrossSectionalReplicate,
    PanelReplicate,
    PANEL_V_COLUMNS,
    PANEL_X_COLUMNS,
)
from .metrics import IntervalEstimate, phi
from .nuisance import PROPENSITY_CLIP, fit_boosted, fit_logistic, fit_ridge, predict

Z_95 = 1.6448536269514722

RIDGE_ALPHA = 1.0
ITE_WEIGHTS = (0.5, 0.3, 0.2)  # pseudo-outcome fit, ATE gap, R-loss
PANEL_WEIGHTS = (0.6, 0.25, 0.15)  # target gap, coverage term, width
HIT_RATE_BLEND = (0.7, 0.3)  # hit-rate centering vs width calibration
CALIBRATION_MIN_REPLICATES = 20  # strictly more required


@dataclass
class PseudoOutcomeSet:
    """Cross-fitted DR pseudo-outcomes and the nuisances behind them."""

    tau_tilde: np.ndarray
    ate_aipw: float
    mhat: np.ndarray
    ehat: np.ndarray
    fold_assignment: np.ndarray
    mu1: Optional[np.ndarray] = None
    mu0: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if abs(self.ate_aipw - float(np.mean(self.tau_tilde))) > 1e-12:
            raise ValueError("ate_aipw must equal mean(tau_tilde)")
        lo, hi = PROPENSITY_CLIP
        if self.ehat.min() < lo - 1e-12 or self.ehat.max() > hi + 1e-12:
            raise ValueError("ehat outside the overlap clip range")


@dataclass
class DRDIDTarget:
    """Per-replicate DR-DID pseudo-targets with cross-replicate spread."""

    per_replicate_target: np.ndarray
    sd_targets: Optional[float]
    nominal_width: Optional[float]

    def __post_init__(self) -> None:
        if self.sd_targets is None:
            if self.nominal_width is not None:
                raise ValueError("nominal_width requires sd_targets")
        elif abs(self.nominal_width - 2.0 * Z_95 * self.sd_targets) > 1e-9:
            raise ValueError("nominal_width must be 2 * z_0.95 * sd_targets")


def encode_features(df: pd.DataFrame) -> np.ndarray:
    """Numeric matrix for nuisance fits; text columns are one-hot encoded."""
    blocks = []
    for col in df.columns:
        s = df[col]
        if s.dtype == object or str(s.dtype) == "category":
            dummies = pd.get_dummies(s.astype(str), prefix=col, dtype=float)
            dummies = dummies[sorted(dummies.columns)]
            blocks.append(dummies.to_numpy())
        else:
            blocks.append(s.to_numpy(dtype=float).reshape(-1, 1))
    return np.hstack(blocks)


def dr_transform(
    mu1: np.ndarray, mu0: np.ndarray, ehat: np.ndarray, T: np.ndarray, Y: np.ndarray
) -> np.ndarray:
    """Per-unit doubly robust pseudo-outcome given fitted nuisances."""
    return (
        mu1
        - mu0
        + T * (Y - mu1) / ehat
        - (1.0 - T) * (Y - mu0) / (1.0 - ehat)
    )


def _fit_outcome(X: np.ndarray, y: np.ndarray, family: str):
    if family == "ridge":
        return fit_ridge(X, y, alpha=RIDGE_ALPHA)
    if family == "boosted":
        if len(y) < 10:
            # too few rows to grow trees; ridge keeps the fold usable
            return fit_ridge(X, y, alpha=RIDGE_ALPHA)
        return fit_boosted(X, y)
    raise ValueError(f"unknown outcome family {family!r}")


def dr_pseudo_outcomes(
    X,
    T,
    Y,
    seed: int,
    families: Sequence[str] = ("ridge", "boosted"),
) -> PseudoOutcomeSet:
    """Two-fold cross-fitted DR pseudo-outcomes, averaged across outcome families.

    Each fold's units get nuisance predictions from models trained only
    on the other fold: per-arm outcome models for every family, a
    clipped logistic propensity, and a ridge main-effect regression for
    the R-loss term.
    """
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = len(Y)
    if X.shape[0] != n or T.shape[0] != n:
        raise ValueError("X, T, Y length mismatch")
    if not np.isfinite(Y).all():
        raise ValueError("non-finite outcomes")
    if (T == 1).sum() < 5 or (T == 0).sum() < 5:
        raise ValueError("need at least 5 units in each arm")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    fold = np.empty(n, dtype=np.int64)
    fold[perm[: n // 2]] = 0
    fold[perm[n // 2 :]] = 1

    mu1 = {f: np.empty(n) for f in families}
    mu0 = {f: np.empty(n) for f in families}
    ehat = np.empty(n)
    mhat = np.empty(n)
    for k in (0, 1):
        test = fold == k
        train = ~test
        t_train = T[train]
        if (t_train == 1).sum() == 0 or (t_train == 0).sum() == 0:
            raise ValueError(f"training complement of fold {k} is missing an arm")
        X_tr, Y_tr = X[train], Y[train]
        treated = t_train == 1
        for fam in families:
            m1 = _fit_outcome(X_tr[treated], Y_tr[treated], fam)
            m0 = _fit_outcome(X_tr[~treated], Y_tr[~treated], fam)
            mu1[fam][test] = predict(m1, X[test])
            mu0[fam][test] = predict(m0, X[test])
        prop = fit_logistic(X_tr, t_train)
        ehat[test] = predict(prop, X[test])
        main = fit_ridge(X_tr, Y_tr, alpha=RIDGE_ALPHA)
        mhat[test] = predict(main, X[test])

    per_family = [dr_transform(mu1[f], mu0[f], ehat, T, Y) for f in families]
    tau_tilde = np.mean(per_family, axis=0)
    mu1_avg = np.mean([mu1[f] for f in families], axis=0)
    mu0_avg = np.mean([mu0[f] for f in families], axis=0)
    return PseudoOutcomeSet(
        tau_tilde=tau_tilde,
        ate_aipw=float(np.mean(tau_tilde)),
        mhat=mhat,
        ehat=ehat,
        fold_assignment=fold,
        mu1=mu1_avg,
        mu0=mu0_avg,
    )


def pseudo_outcomes_for(rep: CrossSectionalReplicate, seed: int) -> PseudoOutcomeSet:
    """Pseudo-outcomes for one replicate, from candidate-visible columns only."""
    X = encode_features(rep.covariates)
    return dr_pseudo_outcomes(X, rep.treatment, rep.y_factual, seed=seed)


def proxy_pehe(tau_hat, pseudo: PseudoOutcomeSet) -> float:
    """RMSE of ITE predictions against the DR pseudo-outcomes."""
    tau_hat = np.asarray(tau_hat, dtype=float)
    if tau_hat.shape != pseudo.tau_tilde.shape:
        raise ValueError("tau_hat length differs from pseudo-outcomes")
    return float(np.sqrt(np.mean((tau_hat - pseudo.tau_tilde) ** 2)))


def r_loss_norm(Y, pseudo: PseudoOutcomeSet, T, tau_hat) -> float:
    """Residual-on-residual squared loss, normalized by Var(Y) + 1e-8."""
    Y = np.asarray(Y, dtype=float)
    T = np.asarray(T, dtype=float)
    tau_hat = np.asarray(tau_hat, dtype=float)
    if not (len(Y) == len(T) == len(tau_hat) == len(pseudo.mhat)):
        raise ValueError("length mismatch")
    resid = Y - pseudo.mhat - (T - pseudo.ehat) * tau_hat
    return float(np.mean(resid**2) / (np.var(Y) + 1e-8))


def ite_proxy_loss(
    mean_proxy_pehe: float,
    mean_abs_ate_gap: float,
    mean_rloss: float,
    lambda_ate: float,
) -> dict[str, float]:
    """Weighted cross-sectional proxy loss and its score 1/(1+loss)."""
    for v in (mean_proxy_pehe, mean_abs_ate_gap, mean_rloss):
        if not (math.isfinite(v) and v >= 0):
            raise ValueError(f"proxy components must be finite and >= 0, got {v}")
    w_pehe, w_ate, w_r = ITE_WEIGHTS
    loss = (
        w_pehe * phi(mean_proxy_pehe)
        + w_ate * lambda_ate * phi(mean_abs_ate_gap)
        + w_r * phi(mean_rloss)
    )
    return {"loss": loss, "score": 1.0 / (1.0 + loss)}


# ---------------------------------------------------------------------------
# Panel proxy: DR difference-in-differences pseudo-target
# ---------------------------------------------------------------------------


def practice_table(rep: PanelReplicate) -> pd.DataFrame:
    rows = rep.rows
    if rows["post"].nunique() < 2:
        raise ValueError(f"{rep.replicate_id}: need both pre and post periods")

    def weighted_mean(grp: pd.DataFrame) -> float:
        w = grp["n.patients"].to_numpy(dtype=float)
        return float(np.sum(w * grp["Y"].to_numpy(dtype=float)) / np.sum(w))

    records = []
    for practice, grp in rows.groupby("id.practice"):
        pre = grp[grp["post"] == 0]
        post = grp[grp["post"] == 1]
        if len(pre) == 0 or len(post) == 0:
            raise ValueError(
                f"{rep.replicate_id}: practice {practice} missing a period"
            )
        rec = {
            "practice": practice,
            "z": int(grp["Z"].iloc[0]),
            "delta": weighted_mean(post) - weighted_mean(pre),
            "n_post": float(post["n.patients"].sum()),
        }
        for c in PANEL_X_COLUMNS:
            rec[c] = float(grp[c].iloc[0])
        for c in PANEL_V_COLUMNS:
            rec[c] = float(grp[c].mean())
        records.append(rec)
    return pd.DataFrame(records)


def drdid_target_for(rep: PanelReplicate) -> float:
    """DR-DID pseudo-target for one replicate.

    Regression-adjusted treated mean of practice-level pre/post changes
    minus the propensity-odds-weighted control mean of the same
    adjusted changes, all patient-weighted.
    """
    table = practice_table(rep)
    z = table["z"].to_numpy(dtype=float)
    if (z == 1).sum() < 2 or (z == 0).sum() < 2:
        raise ValueError(f"{rep.replicate_id}: need >= 2 practices per arm")
    feats = table[PANEL_X_COLUMNS + PANEL_V_COLUMNS].to_numpy(dtype=float)
    delta = table["delta"].to_numpy(dtype=float)
    n_post = table["n_post"].to_numpy(dtype=float)

    controls = z == 0
    outcome_model = fit_ridge(feats[controls], delta[controls], alpha=RIDGE_ALPHA)
    adjusted = delta - predict(outcome_model, feats)
    ehat = predict(fit_logistic(feats, z), feats)

    treated = ~controls
    treated_mean = float(
        np.sum(n_post[treated] * adjusted[treated]) / np.sum(n_post[treated])
    )
    odds = n_post[controls] * ehat[controls] / (1.0 - ehat[controls])
    control_mean = float(np.sum(odds * adjusted[controls]) / np.sum(odds))
    return treated_mean - control_mean


def drdid_targets(replicates: Sequence[PanelReplicate], seed: int = 0) -> DRDIDTarget:
    """Per-replicate DR-DID targets plus the cross-replicate width scale.

    The nuisance fits are deterministic, so the seed is accepted only
    for interface symmetry with the cross-sectional proxy.
    """
    if len(replicates) == 0:
        raise ValueError("need at least one replicate")
    targets = np.array([drdid_target_for(rep) for rep in replicates])
    if len(targets) >= 2:
        sd = float(np.std(targets, ddof=1))
        width = 2.0 * Z_95 * sd
    else:
        sd = None
        width = None
    return DRDIDTarget(per_replicate_target=targets, sd_targets=sd, nominal_width=width)


def acic_proxy_loss(
    estimates: Sequence[IntervalEstimate],
    targets: DRDIDTarget,
    lambda_cov: float,
) -> dict:
    """Panel proxy loss: target gap, hit-rate centering, width regularization.

    The width-calibration blend only activates with more than 20
    replicates and an available cross-replicate sd.
    """
    if len(estimates) == 0:
        raise ValueError("empty estimates")
    t = targets.per_replicate_target
    if len(estimates) != len(t):
        raise ValueError("estimates do not align with targets")
    tau = np.array([e.tau_hat for e in estimates])
    widths = np.array([e.width for e in estimates])
    hit = float(np.mean([e.lb <= v <= e.ub for e, v in zip(estimates, t)]))
    mean_gap = float(np.mean(np.abs(tau - t)))
    mean_width = float(np.mean(widths))

    hit_term = phi(abs(hit - 0.9) / 0.9)
    g_width = None
    calibrated = (
        len(estimates) > CALIBRATION_MIN_REPLICATES
        and targets.nominal_width is not None
        and targets.nominal_width > 0
    )
    if calibrated:
        g_width = abs(mean_width - targets.nominal_width) / targets.nominal_width
        c_tilde = HIT_RATE_BLEND[0] * hit_term + HIT_RATE_BLEND[1] * phi(g_width)
    else:
        c_tilde = hit_term

    w_tau, w_cov, w_width = PANEL_WEIGHTS
    loss = w_tau * phi(mean_gap) + w_cov * lambda_cov * c_tilde + w_width * phi(mean_width)
    return {
        "loss": loss,
        "score": 1.0 / (1.0 + loss),
        "components": {
            "mean_abs_target_gap": mean_gap,
            "hit_rate": hit,
            "mean_width": mean_width,
            "g_width": g_width,
        },
    }
