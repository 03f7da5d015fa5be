"""Regressors from feature vectors to marginal probabilities.

Two model families: linear least squares (closed form through a Cholesky
factor of the regularised Gram matrix, or iteratively by conjugate
gradients / SGD) and gradient-boosted oblivious regression trees.

Feature matrices are stored one example per row, ``X`` of shape ``(N, D)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

CLAMP_LOW = 1e-9


class SingularGramError(np.linalg.LinAlgError):
    """Unregularised Gram matrix is singular; retry with ``lam > 0``."""


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class RegressionDataset:
    features: np.ndarray
    targets: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if X.ndim != 2 or y.shape != (len(X),):
            raise ValueError("features must be (N, D) with one target per row")
        if len(X) < 1:
            raise ValueError("dataset is empty")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        if y.min() < 0 or y.max() > 1:
            raise ValueError("targets must lie in [0, 1]")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != y.shape or np.any(w < 0):
                raise ValueError("weights must be non-negative, one per example")
            object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return len(self.targets)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class LinearModel:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).ravel()
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite weights")
        object.__setattr__(self, "w", w)

    @property
    def dim(self) -> int:
        return len(self.w)


@dataclass(frozen=True, eq=False)
class ObliviousTree:
    """Depth-``d`` tree with one ``(feature, threshold)`` split per level.

    An example goes right at level ``l`` when ``x[features[l]] > thresholds[l]``;
    the leaf index reads the level decisions as bits, first level most
    significant.
    """

    features: np.ndarray
    thresholds: np.ndarray
    leaves: np.ndarray

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(len(X), dtype=np.int64)
        for f, thr in zip(self.features.tolist(), self.thresholds.tolist()):
            idx = 2 * idx + (X[:, f] > thr)
        return idx


@dataclass(frozen=True, eq=False)
class TreeEnsemble:
    trees: tuple
    learning_rate: float
    base_score: float
    depth: int
    dim: int


Regressor = Union[LinearModel, TreeEnsemble]


@dataclass(frozen=True, eq=False)
class RidgeFactor:
    """Cholesky factor of ``X^T W X + lam I``."""

    cho: tuple
    lam: float

    @property
    def dim(self) -> int:
        return self.cho[0].shape[0]

    def gram(self) -> np.ndarray:
        c, lower = self.cho
        L = np.tril(c) if lower else np.triu(c).T
        return L @ L.T


def _weighted(X, weights):
    return X if weights is None else X * weights[:, None]


def gram_matrix(X: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    return _weighted(X, weights).T @ X


def factorize_gram(G: np.ndarray, lam: float = 0.0) -> RidgeFactor:
    """Factor a precomputed Gram matrix plus ``lam I``."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    D = G.shape[0]
    A = G + lam * np.eye(D)
    try:
        cho = cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        raise SingularGramError("Gram matrix is not positive definite") from None
    d = np.abs(np.diag(cho[0]))
    if lam == 0 and D and d.min() <= 1e-7 * d.max():
        raise SingularGramError("Gram matrix is numerically singular")
    return RidgeFactor(cho, float(lam))


def ridge_factorize(features, lam: float = 0.0,
                    weights: Optional[np.ndarray] = None) -> RidgeFactor:
    """Factor ``X^T X + lam I`` once for reuse across many target vectors.

    Raises :class:`SingularGramError` when ``lam == 0`` and the Gram matrix
    is singular.
    """
    X = np.asarray(features, dtype=np.float64)
    return factorize_gram(gram_matrix(X, weights), lam)


def fallback_lambda(G: np.ndarray) -> float:
    """Regulariser used when the unregularised system is singular."""
    D = G.shape[0]
    tr = float(np.trace(G))
    return 1e-6 * tr / D if tr > 0 else 1e-6


def ridge_factorize_auto(G: np.ndarray, lam: float = 0.0) -> RidgeFactor:
    """:func:`factorize_gram` with the automatic singularity fallback."""
    try:
        return factorize_gram(G, lam)
    except SingularGramError:
        if lam > 0:
            raise
        return factorize_gram(G, fallback_lambda(G))


def ridge_solve_rhs(factor: RidgeFactor, rhs: np.ndarray) -> LinearModel:
    return LinearModel(cho_solve(factor.cho, rhs, check_finite=False))


def ridge_solve(factor: RidgeFactor, features, targets,
                weights: Optional[np.ndarray] = None) -> LinearModel:
    """``w = (X^T X + lam I)^{-1} X^T y`` using a precomputed factor."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != factor.dim or y.shape != (len(X),):
        raise ValueError("feature/target dimensions do not match the factor")
    return ridge_solve_rhs(factor, _weighted(X, weights).T @ y)


def ridge_fit(dataset: RegressionDataset, lam: float = 0.0) -> LinearModel:
    """Closed-form ridge regression, falling back to a small ``lam`` when singular."""
    G = gram_matrix(dataset.features, dataset.weights)
    factor = ridge_factorize_auto(G, lam)
    return ridge_solve(factor, dataset.features, dataset.targets, dataset.weights)


def ridge_objective(w, dataset: RegressionDataset, lam: float) -> float:
    res = dataset.features @ np.asarray(w) - dataset.targets
    sq = res * res if dataset.weights is None else dataset.weights * res * res
    return float(lam * np.dot(w, w) + sq.sum())


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    residual: float
    converged: bool


def _cg(dataset: RegressionDataset, lam: float, tol: float, max_iter: int):
    X, y, sw = dataset.features, dataset.targets, dataset.weights

    def A(v):
        xv = X @ v
        if sw is not None:
            xv = sw * xv
        return X.T @ xv + lam * v

    b = _weighted(X, sw).T @ y
    w = np.zeros(X.shape[1])
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    bnorm = np.sqrt(float(b @ b)) or 1.0
    it = 0
    while it < max_iter and np.sqrt(rr) > tol * bnorm:
        Ap = A(p)
        alpha = rr / float(p @ Ap)
        w += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    res = float(np.linalg.norm(b - A(w)) / bnorm)
    return w, SolveInfo(it, res, res <= tol)


def _sgd(dataset: RegressionDataset, lam: float, tol: float, max_iter: int, seed,
         step: float = 0.5, decay: float = 0.1):
    X, y = dataset.features, dataset.targets
    sw = dataset.weights if dataset.weights is not None else np.ones(len(y))
    N = len(y)
    rng = np.random.default_rng(seed)
    bound = float(np.max(np.einsum("ij,ij->i", X, X) * sw)) or 1.0
    Xw = _weighted(X, dataset.weights)
    b = Xw.T @ y
    bnorm = float(np.linalg.norm(b)) or 1.0

    def residual(w):
        return float(np.linalg.norm(X.T @ (Xw @ w) + lam * w - b)) / bnorm

    w = np.zeros(X.shape[1])
    res = residual(w)
    it = 0
    for it in range(1, max_iter + 1):
        eta = step / bound / (1.0 + decay * (it - 1))
        for i in rng.permutation(N):
            g = sw[i] * (X[i] @ w - y[i]) * X[i] + (lam / N) * w
            w -= eta * g
        res = residual(w)
        if res <= tol:
            break
    return w, SolveInfo(it, res, res <= tol)


def ridge_iterative(dataset: RegressionDataset, lam: float = 0.0,
                    method: str = "conjugate_gradient", tol: float = 1e-10,
                    max_iter: Optional[int] = None, seed=0,
                    return_info: bool = False):
    """Minimise the ridge objective without forming the Gram matrix.

    ``method="conjugate_gradient"`` runs CG on the normal equations;
    ``"sgd"`` makes shuffled passes; pass ``k`` uses step
    ``0.5 / (1 + 0.1 (k - 1))`` divided by the largest squared feature norm
    (``max_iter`` counts passes, default one). Both stop once the relative
    normal-equation residual is at most ``tol``. A warning carrying the achieved relative residual is issued when
    the tolerance is not met.
    """
    if method in ("conjugate_gradient", "cg"):
        if max_iter is None:
            max_iter = 10 * dataset.dim
        w, info = _cg(dataset, lam, tol, max_iter)
    elif method == "sgd":
        if max_iter is None:
            max_iter = 1
        w, info = _sgd(dataset, lam, tol, max_iter, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not info.converged:
        warnings.warn(f"{method} stopped after {info.iterations} iterations with "
                      f"relative residual {info.residual:.3g}", ConvergenceWarning,
                      stacklevel=2)
    model = LinearModel(w)
    return (model, info) if return_info else model


# -- gradient boosted oblivious trees ---------------------------------------

N_THRESHOLDS = 32


def candidate_thresholds(col: np.ndarray, n: int = N_THRESHOLDS) -> np.ndarray:
    """Split candidates for one feature column.

    Midpoints between distinct values when there are at most ``n`` of them,
    otherwise the ``n - 1`` cut points of the ``n``-quantiles.
    """
    u = np.unique(col)
    if len(u) <= 1:
        return np.zeros(0)
    if len(u) <= n:
        return (u[:-1] + u[1:]) / 2
    q = np.unique(np.quantile(col, np.arange(1, n) / n))
    return q[q < u[-1]]


@dataclass
class _Binned:
    bins: list          # per feature: int array, bin index of each row
    thresholds: list    # per feature: sorted thresholds


def _bin_features(X: np.ndarray) -> _Binned:
    bins, thr = [], []
    for f in range(X.shape[1]):
        t = candidate_thresholds(X[:, f])
        thr.append(t)
        bins.append(np.searchsorted(t, X[:, f], side="left").astype(np.int64))
    return _Binned(bins, thr)


def _best_split(binned: _Binned, leaf: np.ndarray, n_leaves: int,
                res: np.ndarray, wts: np.ndarray):
    """Exhaustive (feature, threshold) search for the next oblivious level.

    Returns ``(feature, threshold_index, gain)``; gain is the increase in
    ``sum_leaf S^2 / W`` over the current partition.
    """
    def score(S, W):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(W > 0, S * S / W, 0.0)

    S0 = np.bincount(leaf, weights=wts * res, minlength=n_leaves)
    W0 = np.bincount(leaf, weights=wts, minlength=n_leaves)
    base = score(S0, W0).sum()
    best = (-1, -1, 0.0)
    for f, (b, t) in enumerate(zip(binned.bins, binned.thresholds)):
        nt = len(t)
        if nt == 0:
            continue
        nb = nt + 1
        key = leaf * nb + b
        S = np.bincount(key, weights=wts * res, minlength=n_leaves * nb).reshape(n_leaves, nb)
        W = np.bincount(key, weights=wts, minlength=n_leaves * nb).reshape(n_leaves, nb)
        # threshold k sends bins <= k left (x <= t[k])
        SL = np.cumsum(S, axis=1)[:, :nt]
        WL = np.cumsum(W, axis=1)[:, :nt]
        SR = S0[:, None] - SL
        WR = W0[:, None] - WL
        gains = (score(SL, WL) + score(SR, WR)).sum(axis=0) - base
        k = int(np.argmax(gains))
        if gains[k] > best[2] + 1e-12 * max(1.0, abs(base)):
            best = (f, k, float(gains[k]))
    return best


def gbt_train(dataset: RegressionDataset, n_trees: int = 500, depth: int = 6,
              learning_rate: float = 0.1, seed=0, subsample: float = 1.0) -> TreeEnsemble:
    """Least-squares gradient boosting with oblivious trees.

    Each tree is grown level by level on the current residuals, choosing the
    split that maximises the squared-error reduction summed over all leaves;
    leaf values are mean residuals. Boosting stops early once no split
    reduces the error.
    """
    if dataset.n < 2:
        raise ValueError("gradient boosting needs at least two examples")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    X, y = dataset.features, dataset.targets
    wts = dataset.weights if dataset.weights is not None else np.ones(len(y))
    wsum = wts.sum()
    base = float((wts * y).sum() / wsum) if wsum > 0 else float(y.mean())
    binned = _bin_features(X)
    rng = np.random.default_rng(seed)
    F = np.full(len(y), base)
    trees = []
    for _ in range(n_trees):
        res = y - F
        tw = wts
        if subsample < 1.0:
            tw = wts * (rng.random(len(y)) < subsample)
        leaf = np.zeros(len(y), dtype=np.int64)
        feats, thrs = [], []
        any_gain = False
        for level in range(depth):
            f, k, gain = _best_split(binned, leaf, 2 ** level, res, tw)
            if f < 0:
                feats.append(0)
                thrs.append(np.inf)
                leaf = 2 * leaf
            else:
                any_gain = True
                t = float(binned.thresholds[f][k])
                feats.append(f)
                thrs.append(t)
                leaf = 2 * leaf + (binned.bins[f] > k)
        if not any_gain:
            break
        n_leaves = 2 ** depth
        S = np.bincount(leaf, weights=tw * res, minlength=n_leaves)
        W = np.bincount(leaf, weights=tw, minlength=n_leaves)
        with np.errstate(divide="ignore", invalid="ignore"):
            values = np.where(W > 0, S / W, 0.0)
        tree = ObliviousTree(np.asarray(feats, dtype=np.int64),
                             np.asarray(thrs, dtype=np.float64), values)
        trees.append(tree)
        F = F + learning_rate * values[leaf]
    return TreeEnsemble(tuple(trees), float(learning_rate), base, int(depth), X.shape[1])


def predict(model: Regressor, features) -> Union[float, np.ndarray]:
    """Raw (unclamped) prediction for one feature vector or a matrix of rows."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.dim:
        raise ValueError(f"feature dimension {X.shape[1]} != model dimension {model.dim}")
    if isinstance(model, LinearModel):
        out = X @ model.w
    elif isinstance(model, TreeEnsemble):
        out = np.full(len(X), model.base_score)
        for t in model.trees:
            out += model.learning_rate * t.leaves[t.leaf_index(X)]
    else:
        raise TypeError(f"not a regressor: {type(model).__name__}")
    return float(out[0]) if single else out


def clamp01(p):
    """Clamp predictions into ``[1e-9, 1]``. NaN is rejected."""
    a = np.asarray(p, dtype=np.float64)
    if np.any(np.isnan(a)):
        raise ValueError("cannot clamp NaN")
    out = np.minimum(np.maximum(a, CLAMP_LOW), 1.0)
    return float(out) if out.ndim == 0 else out


# -- serialisation ----------------------------------------------------------

def regressor_to_dict(model: Regressor) -> dict:
    if isinstance(model, LinearModel):
        return {"kind": "linear", "w": model.w.tolist()}
    if isinstance(model, TreeEnsemble):
        return {
            "kind": "gbt",
            "dim": model.dim,
            "depth": model.depth,
            "learning_rate": model.learning_rate,
            "base_score": model.base_score,
            "trees": [
                {"features": t.features.tolist(),
                 "thresholds": [None if not np.isfinite(v) else v for v in t.thresholds.tolist()],
                 "leaves": t.leaves.tolist()}
                for t in model.trees
            ],
        }
    raise TypeError(f"not a regressor: {type(model).__name__}")


def regressor_from_dict(d: dict) -> Regressor:
    kind = d.get("kind")
    if kind == "linear":
        return LinearModel(np.asarray(d["w"], dtype=np.float64))
    if kind == "gbt":
        trees = tuple(
            ObliviousTree(np.asarray(t["features"], dtype=np.int64),
                          np.asarray([np.inf if v is None else v for v in t["thresholds"]],
                                     dtype=np.float64),
                          np.asarray(t["leaves"], dtype=np.float64))
            for t in d["trees"])
        return TreeEnsemble(trees, float(d["learning_rate"]), float(d["base_score"]),
                            int(d["depth"]), int(d["dim"]))
    raise ValueError(f"unknown regressor kind {kind!r}")


__all__ = [
    "RegressionDataset", "LinearModel", "ObliviousTree", "TreeEnsemble", "RidgeFactor",
    "SingularGramError", "ConvergenceWarning", "SolveInfo", "gram_matrix",
    "factorize_gram", "ridge_factorize", "ridge_factorize_auto", "fallback_lambda",
    "ridge_solve", "ridge_solve_rhs", "ridge_fit", "ridge_objective", "ridge_iterative",
    "gbt_train", "candidate_thresholds", "predict", "clamp01", "regressor_to_dict",
    "regressor_from_dict", "CLAMP_LOW",
]
