"""LS-CRF training: one regression problem per label pair.

Every retained edge ``(s, t)`` of every training graph contributes the
example ``(phi_st, 1[y_s = j and y_t = k])`` to the dataset of pair
``(j, k)``. The ``r*r`` regressors are independent; pairs that occur too
rarely get a constant probability instead. Unary regressors on node
features are only needed for nodes without edges.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .graph import Instance
from .parallel import map_chunks, map_items
from .regress import (
    LinearModel,
    RegressionDataset,
    Regressor,
    TreeEnsemble,
    clamp01,
    gbt_train,
    predict,
    regressor_from_dict,
    regressor_to_dict,
    ridge_factorize_auto,
    ridge_iterative,
    ridge_solve_rhs,
)

RARE_PAIR_CONSTANT = 1e-3
MIN_PAIR_COUNT = 20
CHUNK = 2048


@dataclass(frozen=True)
class SamplingConfig:
    """Subsampling of training examples.

    With ``balance`` on, pair sampling keeps the corpus ratio of same-label
    to different-label edges and spreads each group evenly over its label
    pairs; node sampling spreads evenly over classes.
    """

    unary_fraction: float = 1.0
    pair_fraction: float = 1.0
    balance: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("unary_fraction", "pair_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {v}")


@dataclass(frozen=True)
class GBTParams:
    n_trees: int = 500
    depth: int = 6
    learning_rate: float = 0.1
    seed: int = 0
    subsample: float = 1.0


Entry = Union[Regressor, float]


@dataclass(frozen=True, eq=False)
class PairwiseModel:
    """Trained LS-CRF: ``f_jk`` on edge features, optional ``f_j`` on node features.

    ``pair_regressors[j * r + k]`` is a regressor or a float constant.
    ``pair_regressors`` is ``None`` for a unary-only model.
    """

    r: int
    pair_regressors: Optional[tuple]
    unary_regressors: Optional[tuple]
    edge_dim: int
    node_dim: int
    regressor_kind: str = "linear"
    rare_pair_constant: float = RARE_PAIR_CONSTANT
    label_names: tuple = ()
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    all_constant: bool = False
    config: dict = field(default_factory=dict)

    @property
    def unary_only(self) -> bool:
        return self.pair_regressors is None

    def pair_probs(self, edge_features: np.ndarray) -> np.ndarray:
        """Clamped ``f_jk(phi)`` for each row, shape ``(n, r, r)``."""
        if self.pair_regressors is None:
            raise ValueError("model has no pairwise regressors")
        return _eval_entries(self.pair_regressors, edge_features, self.edge_dim
                             ).reshape(-1, self.r, self.r)

    def unary_probs(self, node_features: np.ndarray) -> np.ndarray:
        """Clamped ``f_j(phi)`` for each row, shape ``(n, r)``."""
        if self.unary_regressors is None:
            raise ValueError("model has no unary regressors")
        return _eval_entries(self.unary_regressors, node_features, self.node_dim)


def _eval_entries(entries, X, dim) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != dim and len(X):
        raise ValueError(f"feature dimension {X.shape[1]} != model dimension {dim}")
    out = np.empty((len(X), len(entries)))
    for i, reg in enumerate(entries):
        if isinstance(reg, float):
            out[:, i] = clamp01(reg)
        else:
            out[:, i] = clamp01(predict(reg, X)) if len(X) else 0.0
    return out


@dataclass(frozen=True, eq=False)
class PairDatasets:
    """The ``r*r`` regression datasets sharing one feature matrix.

    Row ``i`` is an edge whose observed label pair is ``pair_index[i] = j*r + k``;
    its target in dataset ``(j, k)`` is ``1`` exactly there and ``0`` elsewhere.
    """

    features: np.ndarray
    pair_index: np.ndarray
    r: int
    weights: Optional[np.ndarray] = None

    def dataset(self, j: int, k: int) -> RegressionDataset:
        y = (self.pair_index == j * self.r + k).astype(np.float64)
        return RegressionDataset(self.features, y, self.weights)

    def counts(self) -> np.ndarray:
        return np.bincount(self.pair_index, minlength=self.r * self.r).reshape(self.r, self.r)

    def __len__(self):
        return len(self.pair_index)


def _equal_allocation(avail: np.ndarray, total: int) -> np.ndarray:
    """Spread ``total`` draws evenly over groups, capped by availability."""
    avail = np.asarray(avail, dtype=np.int64)
    alloc = np.zeros_like(avail)
    remaining = int(min(total, avail.sum()))
    while remaining > 0:
        open_ = np.flatnonzero(alloc < avail)
        share = remaining // len(open_)
        if share == 0:
            alloc[open_[:remaining]] += 1
            break
        add = np.minimum(share, avail[open_] - alloc[open_])
        alloc[open_] += add
        remaining -= int(add.sum())
    return alloc


def _draw(groups: dict, alloc: dict, rng: np.random.Generator) -> list:
    out = []
    for key in sorted(groups):
        idx = groups[key]
        k = alloc.get(key, 0)
        if k >= len(idx):
            out.append(idx)
        elif k > 0:
            out.append(np.sort(rng.choice(idx, size=k, replace=False)))
    return out


def balanced_sample(label_pairs: np.ndarray, sampling: SamplingConfig) -> np.ndarray:
    """Indices of the edges kept for training.

    ``label_pairs`` is the ``(N, 2)`` array of ground-truth labels at each
    edge's endpoints. Returns sorted indices; deterministic by seed.
    """
    pairs = np.asarray(label_pairs, dtype=np.int64).reshape(-1, 2)
    N = len(pairs)
    f = sampling.pair_fraction
    if f >= 1.0 or N == 0:
        return np.arange(N)
    rng = np.random.default_rng(sampling.seed)
    total = int(round(f * N))
    if not sampling.balance:
        return np.sort(rng.choice(N, size=total, replace=False))
    same = pairs[:, 0] == pairs[:, 1]
    n_same = int(same.sum())
    want_same = min(int(round(f * n_same)), n_same)
    want_diff = min(total - want_same, N - n_same)
    keys = [tuple(p) for p in pairs.tolist()]
    groups: dict = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    groups = {k: np.asarray(v) for k, v in groups.items()}
    alloc = {}
    for want, is_same in ((want_same, True), (want_diff, False)):
        ks = sorted(k for k in groups if (k[0] == k[1]) == is_same)
        if not ks:
            continue
        a = _equal_allocation(np.array([len(groups[k]) for k in ks]), want)
        alloc.update(zip(ks, a.tolist()))
    parts = _draw(groups, alloc, rng)
    return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)


def balanced_node_sample(labels: np.ndarray, fraction: float, balance: bool,
                         seed) -> np.ndarray:
    """Node subset for unary training: uniform, or spread evenly over classes."""
    labels = np.asarray(labels, dtype=np.int64)
    N = len(labels)
    if fraction >= 1.0 or N == 0:
        return np.arange(N)
    rng = np.random.default_rng(seed)
    total = int(round(fraction * N))
    if not balance:
        return np.sort(rng.choice(N, size=total, replace=False))
    classes = np.unique(labels)
    groups = {int(c): np.flatnonzero(labels == c) for c in classes}
    a = _equal_allocation(np.array([len(groups[c]) for c in sorted(groups)]), total)
    parts = _draw(groups, dict(zip(sorted(groups), a.tolist())), rng)
    return np.sort(np.concatenate(parts))


def _check_corpus(instances: Sequence[Instance], r: int):
    if not instances:
        raise ValueError("no training instances")
    de = {i.edge_dim for i in instances if i.graph.n_edges}
    dn = {i.node_dim for i in instances if i.graph.m}
    if len(de) > 1:
        raise ValueError(f"edge feature dimensions differ across instances: {sorted(de)}")
    if len(dn) > 1:
        raise ValueError(f"node feature dimensions differ across instances: {sorted(dn)}")
    for inst in instances:
        if inst.labels is None:
            raise ValueError(f"instance {inst.id!r} has no ground-truth labels")
        if inst.graph.m and inst.labels.max() >= r:
            raise ValueError(f"instance {inst.id!r} has a label outside [0, {r})")
    return (de.pop() if de else 0), (dn.pop() if dn else 0)


def _swap_blocks(X: np.ndarray, node_dim: int) -> np.ndarray:
    if X.shape[1] < 2 * node_dim:
        raise ValueError("symmetric augmentation needs edge features [phi_s, phi_t, ...]")
    out = X.copy()
    out[:, :node_dim] = X[:, node_dim:2 * node_dim]
    out[:, node_dim:2 * node_dim] = X[:, :node_dim]
    return out


@dataclass
class _EdgePool:
    instances: Sequence[Instance]
    edge_offset: np.ndarray
    keep: np.ndarray          # bool mask over the global edge list
    r: int
    dim: int
    node_dim: int
    augment: bool
    weights: Optional[np.ndarray]


def _edge_pool(instances, r, sampling, augment, node_dim, instance_weights):
    n_e = np.array([i.graph.n_edges for i in instances], dtype=np.int64)
    off = np.concatenate([[0], np.cumsum(n_e)])
    pairs = np.concatenate(
        [np.stack([i.labels[i.graph.edges[:, 0]], i.labels[i.graph.edges[:, 1]]], axis=1)
         for i in instances if i.graph.n_edges] or [np.zeros((0, 2), dtype=np.int64)])
    keep = np.zeros(len(pairs), dtype=bool)
    keep[balanced_sample(pairs, sampling)] = True
    dims = [i.edge_dim for i in instances if i.graph.n_edges]
    w = None if instance_weights is None else np.asarray(instance_weights, dtype=np.float64)
    return _EdgePool(instances, off, keep, r, dims[0] if dims else 0, node_dim, augment, w)


def _chunk_rows(pool: _EdgePool, lo: int, hi: int):
    """Kept edge rows of instances ``lo:hi``: features, pair index, weights."""
    Xs, Ps, Ws = [], [], []
    r = pool.r
    for i in range(lo, hi):
        inst = pool.instances[i]
        if not inst.graph.n_edges:
            continue
        m = pool.keep[pool.edge_offset[i]:pool.edge_offset[i + 1]]
        if not m.any():
            continue
        e = inst.graph.edges[m]
        ys, yt = inst.labels[e[:, 0]], inst.labels[e[:, 1]]
        X = inst.edge_features[m]
        Xs.append(X)
        Ps.append(ys * r + yt)
        if pool.augment:
            Xs.append(_swap_blocks(X, pool.node_dim))
            Ps.append(yt * r + ys)
        if pool.weights is not None:
            Ws.append(np.full(len(Ps[-1]) * (2 if pool.augment else 1), pool.weights[i]))
    if not Xs:
        return (np.zeros((0, pool.dim)), np.zeros(0, dtype=np.int64),
                None if pool.weights is None else np.zeros(0))
    W = np.concatenate(Ws) if pool.weights is not None else None
    return np.concatenate(Xs), np.concatenate(Ps), W


def _chunk_normal_eq(pool: _EdgePool, lo: int, hi: int):
    X, P, W = _chunk_rows(pool, lo, hi)
    r2 = pool.r * pool.r
    Xw = X if W is None else X * W[:, None]
    G = Xw.T @ X
    onehot = np.zeros((len(P), r2))
    onehot[np.arange(len(P)), P] = 1.0
    B = Xw.T @ onehot
    return G, B, np.bincount(P, minlength=r2)


def assemble_pair_datasets(instances: Sequence[Instance], r: int,
                           sampling: Optional[SamplingConfig] = None,
                           augment_symmetric: bool = False,
                           instance_weights=None, jobs: int = 1) -> PairDatasets:
    """Build the shared edge-feature matrix and label-pair index (see :class:`PairDatasets`)."""
    sampling = sampling or SamplingConfig()
    de, dn = _check_corpus(instances, r)
    pool = _edge_pool(instances, r, sampling, augment_symmetric, dn, instance_weights)
    parts = map_chunks(_chunk_rows, pool, len(instances), jobs=jobs, chunk=CHUNK)
    X = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, de))
    P = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, dtype=np.int64)
    W = np.concatenate([p[2] for p in parts]) if instance_weights is not None else None
    return PairDatasets(X.reshape(len(P), de), P, r, W)


# -- node (unary) datasets --------------------------------------------------

@dataclass
class _NodePool:
    instances: Sequence[Instance]
    node_offset: np.ndarray
    keep: np.ndarray
    r: int
    dim: int
    weights: Optional[np.ndarray]


def _node_pool(instances, r, sampling, node_dim, instance_weights):
    n_v = np.array([i.graph.m for i in instances], dtype=np.int64)
    off = np.concatenate([[0], np.cumsum(n_v)])
    labels = np.concatenate([i.labels for i in instances]) if len(instances) else np.zeros(0)
    keep = np.zeros(len(labels), dtype=bool)
    keep[balanced_node_sample(labels, sampling.unary_fraction, sampling.balance,
                              sampling.seed)] = True
    w = None if instance_weights is None else np.asarray(instance_weights, dtype=np.float64)
    return _NodePool(instances, off, keep, r, node_dim, w)


def _chunk_node_rows(pool: _NodePool, lo: int, hi: int):
    Xs, Ys, Ws = [], [], []
    for i in range(lo, hi):
        inst = pool.instances[i]
        m = pool.keep[pool.node_offset[i]:pool.node_offset[i + 1]]
        if not m.any():
            continue
        Xs.append(inst.node_features[m])
        Ys.append(inst.labels[m])
        if pool.weights is not None:
            Ws.append(np.full(int(m.sum()), pool.weights[i]))
    if not Xs:
        return np.zeros((0, pool.dim)), np.zeros(0, dtype=np.int64), None
    return (np.concatenate(Xs), np.concatenate(Ys),
            np.concatenate(Ws) if pool.weights is not None else None)


def _chunk_node_normal_eq(pool: _NodePool, lo: int, hi: int):
    X, Y, W = _chunk_node_rows(pool, lo, hi)
    Xw = X if W is None else X * W[:, None]
    onehot = np.zeros((len(Y), pool.r))
    onehot[np.arange(len(Y)), Y] = 1.0
    return Xw.T @ X, Xw.T @ onehot, np.bincount(Y, minlength=pool.r)


# -- regressor fitting ------------------------------------------------------

def _reduce(parts):
    G = sum((p[0] for p in parts[1:]), parts[0][0].copy())
    B = sum((p[1] for p in parts[1:]), parts[0][1].copy())
    C = sum((p[2] for p in parts[1:]), parts[0][2].copy())
    return G, B, C


def _fit_linear_closed_form(parts, n_out, lam, min_count, constant):
    G, B, counts = _reduce(parts)
    entries: list = [constant] * n_out
    active = [c for c in range(n_out) if counts[c] >= min_count]
    if active:
        factor = ridge_factorize_auto(G, lam)
        for c in active:
            entries[c] = ridge_solve_rhs(factor, B[:, c])
    return tuple(entries), counts


@dataclass
class _FitTask:
    X: np.ndarray
    index: np.ndarray
    W: Optional[np.ndarray]
    targets: list
    kind: str
    lam: float
    solver: str
    gbt: GBTParams


def _fit_one(task: _FitTask, i: int) -> Regressor:
    c = task.targets[i]
    ds = RegressionDataset(task.X, (task.index == c).astype(np.float64), task.W)
    if task.kind == "gbt":
        g = task.gbt
        return gbt_train(ds, n_trees=g.n_trees, depth=g.depth, learning_rate=g.learning_rate,
                         seed=g.seed + c, subsample=g.subsample)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ridge_iterative(ds, task.lam, method=task.solver, seed=c)


def _fit_materialised(X, index, W, n_out, kind, lam, solver, gbt, min_count, constant, jobs):
    counts = np.bincount(index, minlength=n_out)
    active = [c for c in range(n_out) if counts[c] >= min_count]
    task = _FitTask(X, index, W, active, kind, lam, solver, gbt)
    fitted = map_items(_fit_one, task, len(active), jobs=jobs)
    entries: list = [constant] * n_out
    for c, reg in zip(active, fitted):
        entries[c] = reg
    return tuple(entries), counts


def train_lscrf(instances: Sequence[Instance], r: int, regressor_kind: str = "linear",
                sampling: Optional[SamplingConfig] = None,
                min_pair_count: int = MIN_PAIR_COUNT,
                rare_pair_constant: float = RARE_PAIR_CONSTANT,
                lam: float = 0.0, solver: str = "closed_form",
                gbt: Optional[GBTParams] = None, unary: str = "auto",
                augment_symmetric: bool = False, instance_weights=None,
                label_names: Sequence[str] = (), jobs: int = 1,
                config: Optional[dict] = None) -> PairwiseModel:
    """Train an LS-CRF.

    Args:
        regressor_kind: ``"linear"`` (ridge) or ``"gbt"`` (boosted oblivious trees).
        solver: for linear models, ``"closed_form"``, ``"cg"`` or ``"sgd"``.
        min_pair_count: label pairs (and, for unary regressors, classes) with
            fewer positive examples get the constant ``rare_pair_constant``.
        unary: ``"auto"`` trains node regressors iff some training graph has an
            isolated node; ``"always"`` trains them regardless; ``"only"``
            trains a unary-only model without pairwise regressors; ``"never"``.
        jobs: worker processes for dataset assembly and per-pair fitting. The
            result does not depend on it.
    """
    if regressor_kind not in ("linear", "gbt"):
        raise ValueError(f"unknown regressor kind {regressor_kind!r}")
    if unary not in ("auto", "always", "only", "never"):
        raise ValueError(f"unknown unary mode {unary!r}")
    if not 0 < rare_pair_constant < 1:
        raise ValueError("rare_pair_constant must lie in (0, 1)")
    sampling = sampling or SamplingConfig()
    gbt = gbt or GBTParams()
    de, dn = _check_corpus(instances, r)
    closed = regressor_kind == "linear" and solver == "closed_form"

    pair_entries = None
    if unary != "only":
        pool = _edge_pool(instances, r, sampling, augment_symmetric, dn, instance_weights)
        if closed:
            parts = map_chunks(_chunk_normal_eq, pool, len(instances), jobs=jobs, chunk=CHUNK)
            pair_entries, _ = _fit_linear_closed_form(parts, r * r, lam, min_pair_count,
                                                      rare_pair_constant)
        else:
            ds = assemble_pair_datasets(instances, r, sampling, augment_symmetric,
                                        instance_weights, jobs=jobs)
            pair_entries, _ = _fit_materialised(
                ds.features, ds.pair_index, ds.weights, r * r, regressor_kind, lam,
                solver, gbt, min_pair_count, rare_pair_constant, jobs)

    has_isolated = any(np.any(i.graph.isolated) for i in instances)
    unary_entries = None
    if unary in ("always", "only") or (unary == "auto" and has_isolated):
        npool = _node_pool(instances, r, sampling, dn, instance_weights)
        if closed:
            parts = map_chunks(_chunk_node_normal_eq, npool, len(instances), jobs=jobs,
                               chunk=CHUNK)
            unary_entries, _ = _fit_linear_closed_form(parts, r, lam, min_pair_count,
                                                       rare_pair_constant)
        else:
            parts = map_chunks(_chunk_node_rows, npool, len(instances), jobs=jobs, chunk=CHUNK)
            X = np.concatenate([p[0] for p in parts]).reshape(-1, dn)
            Y = np.concatenate([p[1] for p in parts])
            W = (np.concatenate([p[2] for p in parts])
                 if instance_weights is not None else None)
            unary_entries, _ = _fit_materialised(
                X, Y, W, r, regressor_kind, lam, solver, gbt, min_pair_count,
                rare_pair_constant, jobs)

    entries = [e for e in (pair_entries or ()) + (unary_entries or ())]
    all_constant = bool(entries) and all(isinstance(e, float) for e in entries)
    if all_constant:
        warnings.warn("every label pair is below min_pair_count; the model is constant",
                      stacklevel=2)
    return PairwiseModel(r, pair_entries, unary_entries, de, dn, regressor_kind,
                         float(rare_pair_constant), tuple(label_names), sampling,
                         all_constant, dict(config or {}))


def unary_from_pairwise(model: PairwiseModel, edge_features, side: str = "s") -> np.ndarray:
    """Marginalise the pair predictions of one edge onto an endpoint.

    ``side="s"`` sums over the second label, ``side="t"`` over the first.
    Works on a single feature vector (returns ``(r,)``) or a matrix.
    """
    x = np.asarray(edge_features, dtype=np.float64)
    f = model.pair_probs(x)
    if side == "s":
        u = f.sum(axis=2)
    elif side == "t":
        u = f.sum(axis=1)
    else:
        raise ValueError("side must be 's' or 't'")
    return u[0] if x.ndim == 1 else u


# -- serialisation ----------------------------------------------------------

def _entry_to_dict(e: Entry) -> dict:
    if isinstance(e, float):
        return {"kind": "constant", "value": e}
    return regressor_to_dict(e)


def _entry_from_dict(d: dict) -> Entry:
    if d.get("kind") == "constant":
        return float(d["value"])
    return regressor_from_dict(d)


def pairwise_model_to_dict(model: PairwiseModel) -> dict:
    return {
        "type": "lscrf_pairwise",
        "r": model.r,
        "label_names": list(model.label_names),
        "regressor_kind": model.regressor_kind,
        "edge_dim": model.edge_dim,
        "node_dim": model.node_dim,
        "rare_pair_constant": model.rare_pair_constant,
        "all_constant": model.all_constant,
        "sampling": asdict(model.sampling),
        "config": model.config,
        "pair_regressors": (None if model.pair_regressors is None
                            else [_entry_to_dict(e) for e in model.pair_regressors]),
        "unary_regressors": (None if model.unary_regressors is None
                             else [_entry_to_dict(e) for e in model.unary_regressors]),
    }


def pairwise_model_from_dict(d: dict) -> PairwiseModel:
    if d.get("type") != "lscrf_pairwise":
        raise ValueError(f"not an LS-CRF model: type {d.get('type')!r}")
    pr = d["pair_regressors"]
    ur = d["unary_regressors"]
    return PairwiseModel(
        r=int(d["r"]),
        pair_regressors=None if pr is None else tuple(_entry_from_dict(e) for e in pr),
        unary_regressors=None if ur is None else tuple(_entry_from_dict(e) for e in ur),
        edge_dim=int(d["edge_dim"]),
        node_dim=int(d["node_dim"]),
        regressor_kind=d["regressor_kind"],
        rare_pair_constant=float(d["rare_pair_constant"]),
        label_names=tuple(d.get("label_names", ())),
        sampling=SamplingConfig(**d.get("sampling", {})),
        all_constant=bool(d.get("all_constant", False)),
        config=dict(d.get("config", {})),
    )


__all__ = [
    "SamplingConfig", "GBTParams", "PairwiseModel", "PairDatasets", "RARE_PAIR_CONSTANT",
    "MIN_PAIR_COUNT", "balanced_sample", "balanced_node_sample", "assemble_pair_datasets",
    "train_lscrf", "unary_from_pairwise", "pairwise_model_to_dict",
    "pairwise_model_from_dict", "LinearModel", "TreeEnsemble",
]
