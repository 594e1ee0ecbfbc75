"""Native statistical learners and cross-fitting machinery.

Everything here is deterministic given its inputs (plus a seed where one
is accepted) and built on numpy only, so out-of-fold predictions are
reproducible across machines and worker counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

PROPENSITY_CLIP = (0.05, 0.95)


@dataclass
class DesignMatrix:
    """Numeric feature matrix with column standardization statistics.

    Zero-variance columns get sd 1 so standardization never divides by
    zero.
    """

    values: np.ndarray
    column_means: np.ndarray
    column_sds: np.ndarray

    @classmethod
    def from_array(cls, values) -> "DesignMatrix":
        arr = np.asarray(values, dtype=float)
        if arr.ndim != 2:
            raise ValueError("design matrix must be 2-D")
        if not np.isfinite(arr).all():
            raise ValueError("design matrix contains non-finite values")
        means = arr.mean(axis=0)
        sds = arr.std(axis=0)
        sds = np.where(sds > 0, sds, 1.0)
        return cls(values=arr, column_means=means, column_sds=sds)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def standardized(self) -> np.ndarray:
        return (self.values - self.column_means) / self.column_sds


def _as_design(X) -> DesignMatrix:
    return X if isinstance(X, DesignMatrix) else DesignMatrix.from_array(X)


def _sigmoid(logits: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.where(
            logits >= 0,
            1.0 / (1.0 + np.exp(-logits)),
            np.exp(np.minimum(logits, 0)) / (1.0 + np.exp(np.minimum(logits, 0))),
        )


@dataclass
class LinearModel:
    """Ridge fit in original feature space: yhat = X @ weights + intercept."""

    weights: np.ndarray
    intercept: float


@dataclass
class ProbModel:
    """Logistic fit whose predictions are clipped to enforce overlap."""

    weights: np.ndarray
    intercept: float
    clip_lo: float = PROPENSITY_CLIP[0]
    clip_hi: float = PROPENSITY_CLIP[1]
    converged: bool = True

    def predict_raw(self, X) -> np.ndarray:
        """Unclipped probabilities (used for diagnostics only)."""
        values = _as_design(X).values
        logits = values @ self.weights + self.intercept
        return _sigmoid(logits)


def fit_ridge(X, y, alpha: float) -> LinearModel:
    """Least squares with an L2 penalty on standardized weights.

    The intercept is unpenalized; the system is solved by normal
    equations on centered, scaled features.
    """
    dm = _as_design(X)
    y = np.asarray(y, dtype=float)
    if dm.rows < 2 or dm.rows != y.size:
        raise ValueError(f"need n >= 2 rows matching y, got {dm.rows} vs {y.size}")
    if not np.isfinite(y).all():
        raise ValueError("y contains non-finite values")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    Xs = dm.standardized()
    ybar = y.mean()
    gram = Xs.T @ Xs + alpha * np.eye(dm.cols)
    w_std = np.linalg.solve(gram, Xs.T @ (y - ybar))
    weights = w_std / dm.column_sds
    intercept = ybar - float(weights @ dm.column_means)
    return LinearModel(weights=weights, intercept=intercept)


def _irls(Xs: np.ndarray, t: np.ndarray, damping: float, max_iter: int, tol: float):
    n, p = Xs.shape
    Z = np.hstack([np.ones((n, 1)), Xs])
    beta = np.zeros(p + 1)
    penalty = np.full(p + 1, damping)
    penalty[0] = 0.0  # unpenalized intercept
    converged = False
    for _ in range(max_iter):
        eta = Z @ beta
        prob = _sigmoid(eta)
        w = np.maximum(prob * (1.0 - prob), 1e-12)
        grad = Z.T @ (t - prob) - penalty * beta
        hess = (Z * w[:, None]).T @ Z + np.diag(penalty + damping)
        delta = np.linalg.solve(hess, grad)
        beta = beta + delta
        if np.max(np.abs(delta)) < tol:
            converged = True
            break
    return beta, converged


def fit_logistic(X, t, max_iter: int = 100, damping: float = 1e-6) -> ProbModel:
    """Maximum-likelihood logistic regression via damped IRLS.

    Predictions are clipped to [0.05, 0.95]. On separable data IRLS may
    hit the iteration cap; the best iterate is returned with
    converged=False, which the clipping makes harmless downstream.
    """
    dm = _as_design(X)
    t = np.asarray(t, dtype=float)
    if dm.rows != t.size:
        raise ValueError("X and t length mismatch")
    if dm.rows < 4:
        raise ValueError("need n >= 4 for a logistic fit")
    classes = np.unique(t)
    if not np.array_equal(np.sort(classes), [0.0, 1.0]):
        raise ValueError("t must contain both classes, coded 0/1")
    Xs = dm.standardized()
    beta, converged = _irls(Xs, t, damping=damping, max_iter=max_iter, tol=1e-8)
    w_std = beta[1:]
    weights = w_std / dm.column_sds
    intercept = float(beta[0] - weights @ dm.column_means)
    return ProbModel(weights=weights, intercept=intercept, converged=converged)


# ---------------------------------------------------------------------------
# Histogram gradient boosting
# ---------------------------------------------------------------------------

BOOSTED_DEFAULTS = {
    "n_trees": 100,
    "max_depth": 3,
    "learning_rate": 0.1,
    "n_bins": 255,
}


@dataclass
class _Tree:
    # arrays indexed level-wise; feature -1 marks a leaf that routes left
    features: list[np.ndarray]
    thresholds: list[np.ndarray]
    leaf_values: np.ndarray


@dataclass
class BoostedTrees:
    """Gradient boosting on squared loss over histogram-binned features."""

    trees: list[_Tree]
    learning_rate: float
    base_score: float
    seed: int
    bin_edges: list[np.ndarray] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)

    def _bin(self, values: np.ndarray) -> np.ndarray:
        n, p = values.shape
        binned = np.empty((n, p), dtype=np.int32)
        for j in range(p):
            binned[:, j] = np.searchsorted(self.bin_edges[j], values[:, j], side="right")
        return binned

    def predict(self, X) -> np.ndarray:
        values = _as_design(X).values
        if values.shape[1] != len(self.bin_edges):
            raise ValueError("feature count differs from fit")
        binned = self._bin(values)
        out = np.full(values.shape[0], self.base_score)
        for tree in self.trees:
            node = np.zeros(values.shape[0], dtype=np.int64)
            for feats, thrs in zip(tree.features, tree.thresholds):
                f = feats[node]
                go_right = np.zeros(node.size, dtype=np.int64)
                split_mask = f >= 0
                if split_mask.any():
                    rows = np.nonzero(split_mask)[0]
                    go_right[rows] = (
                        binned[rows, f[rows]] > thrs[node[rows]]
                    ).astype(np.int64)
                node = 2 * node + go_right
            out += tree.leaf_values[node]
        return out


def _make_bin_edges(values: np.ndarray, n_bins: int) -> list[np.ndarray]:
    edges = []
    qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    for j in range(values.shape[1]):
        e = np.unique(np.quantile(values[:, j], qs))
        edges.append(e)
    return edges


def _grow_tree(
    binned: np.ndarray, grad: np.ndarray, max_depth: int, n_bins: int
) -> _Tree:
    n, p = binned.shape
    node = np.zeros(n, dtype=np.int64)
    features: list[np.ndarray] = []
    thresholds: list[np.ndarray] = []
    grad_rep = np.repeat(grad, p)
    cols = np.arange(p, dtype=np.int64)

    for depth in range(max_depth):
        n_nodes = 1 << depth
        size = n_nodes * p * n_bins
        idx = ((node[:, None] * p + cols[None, :]) * n_bins + binned).ravel()
        sum_g = np.bincount(idx, weights=grad_rep, minlength=size).reshape(
            n_nodes, p, n_bins
        )
        cnt = np.bincount(idx, minlength=size).reshape(n_nodes, p, n_bins)

        cs_g = np.cumsum(sum_g, axis=2)[:, :, :-1]
        cs_c = np.cumsum(cnt, axis=2)[:, :, :-1]
        tot_g = sum_g.sum(axis=2)[:, :, None]
        tot_c = cnt.sum(axis=2)[:, :, None]
        right_g = tot_g - cs_g
        right_c = tot_c - cs_c
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = (
                cs_g**2 / cs_c
                + right_g**2 / right_c
                - np.where(tot_c > 0, tot_g**2 / np.maximum(tot_c, 1), 0.0)
            )
        gain = np.where((cs_c > 0) & (right_c > 0), gain, -np.inf)

        flat = gain.reshape(n_nodes, -1)
        best = flat.argmax(axis=1)
        best_gain = flat[np.arange(n_nodes), best]
        feat = (best // (n_bins - 1)).astype(np.int64)
        thr = (best % (n_bins - 1)).astype(np.int64)
        is_leaf = ~np.isfinite(best_gain) | (best_gain <= 1e-12)
        feat[is_leaf] = -1

        features.append(feat)
        thresholds.append(thr)

        f = feat[node]
        go_right = np.zeros(n, dtype=np.int64)
        split_mask = f >= 0
        if split_mask.any():
            rows = np.nonzero(split_mask)[0]
            go_right[rows] = (binned[rows, f[rows]] > thr[node[rows]]).astype(np.int64)
        node = 2 * node + go_right

    n_leaves = 1 << max_depth
    leaf_sum = np.bincount(node, weights=grad, minlength=n_leaves)
    leaf_cnt = np.bincount(node, minlength=n_leaves)
    leaf_values = np.where(leaf_cnt > 0, leaf_sum / np.maximum(leaf_cnt, 1), 0.0)
    return _Tree(features=features, thresholds=thresholds, leaf_values=leaf_values)


def fit_boosted(X, y, params: Optional[dict] = None) -> BoostedTrees:
    """Gradient boosting on squared loss; deterministic under a fixed seed."""
    dm = _as_design(X)
    y = np.asarray(y, dtype=float)
    if dm.rows < 10:
        raise ValueError("need n >= 10 for boosting")
    if dm.rows != y.size:
        raise ValueError("X and y length mismatch")
    if not np.isfinite(y).all():
        raise ValueError("y contains non-finite values")
    p = dict(BOOSTED_DEFAULTS, **(params or {}))
    n_bins = int(p["n_bins"])
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    seed = int(p.get("seed", 0))

    model = BoostedTrees(
        trees=[],
        learning_rate=float(p["learning_rate"]),
        base_score=float(y.mean()),
        seed=seed,
        bin_edges=_make_bin_edges(dm.values, n_bins),
    )
    binned = model._bin(dm.values)
    pred = np.full(dm.rows, model.base_score)
    for _ in range(int(p["n_trees"])):
        resid = y - pred
        tree = _grow_tree(binned, resid, int(p["max_depth"]), n_bins)
        tree.leaf_values = tree.leaf_values * model.learning_rate
        model.trees.append(tree)

        node = np.zeros(dm.rows, dtype=np.int64)
        for feats, thrs in zip(tree.features, tree.thresholds):
            f = feats[node]
            go_right = np.zeros(dm.rows, dtype=np.int64)
            split_mask = f >= 0
            if split_mask.any():
                rows = np.nonzero(split_mask)[0]
                go_right[rows] = (binned[rows, f[rows]] > thrs[node[rows]]).astype(
                    np.int64
                )
            node = 2 * node + go_right
        pred += tree.leaf_values[node]
        model.train_losses.append(float(np.mean((y - pred) ** 2)))
    return model


def predict(model, X) -> np.ndarray:
    """Model-specific prediction; ProbModel output is clipped."""
    values = _as_design(X).values
    if isinstance(model, LinearModel):
        if values.shape[1] != model.weights.size:
            raise ValueError("feature count differs from fit")
        return values @ model.weights + model.intercept
    if isinstance(model, ProbModel):
        if values.shape[1] != model.weights.size:
            raise ValueError("feature count differs from fit")
        logits = values @ model.weights + model.intercept
        return np.clip(_sigmoid(logits), model.clip_lo, model.clip_hi)
    if isinstance(model, BoostedTrees):
        return model.predict(values)
    raise TypeError(f"unknown model type {type(model)!r}")


def crossfit(
    X,
    targets,
    n_folds: int,
    seed: int,
    fitter: Callable[[np.ndarray, np.ndarray], object],
) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-fold predictions with a seeded contiguous-block fold split.

    Unit i's prediction comes from a model trained only on the folds it
    does not belong to. Returns (predictions, fold_assignment).
    """
    dm = _as_design(X)
    targets = np.asarray(targets, dtype=float)
    n = dm.rows
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if n_folds > n:
        raise ValueError(f"cannot split {n} rows into {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    fold = np.empty(n, dtype=np.int64)
    sizes = np.full(n_folds, n // n_folds)
    sizes[: n % n_folds] += 1
    start = 0
    for k, s in enumerate(sizes):
        fold[perm[start : start + s]] = k
        start += s

    out = np.empty(n, dtype=float)
    for k in range(n_folds):
        test = fold == k
        train = ~test
        model = fitter(dm.values[train], targets[train])
        out[test] = predict(model, dm.values[test])
    return out, fold
