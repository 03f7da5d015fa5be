"""Log-linear CRF baselines trained by likelihood surrogates.

All models share the energy

    E(x, y; w) = sum_s <w_unary[y_s], phi_s> + sum_st <w_pair[y_s * r + y_t], phi_st>

with ``P(y | x) ∝ exp(-E)``. Objectives are summed over every node or edge
of the corpus and regularised by ``lam * ||w||^2``:

* ``logistic``: independent per-node multinomial logistic loss;
* ``pl``: pseudolikelihood, each node conditioned on its true neighbours;
* ``pw``: piecewise, each edge normalised on its own (``r*r``-way softmax),
  plus a node piece for every isolated node;
* ``tree_cll``: exact conditional log-likelihood on forest-structured graphs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from .graph import EnergyFunction, Instance, disjoint_union, is_tree
from .inference import tree_bp_marginals
from .regress import ConvergenceWarning

METHODS = ("logistic", "pl", "pw", "tree_cll")


@dataclass(frozen=True, eq=False)
class LogLinearCRF:
    """Linear energy weights.

    ``unary_scope="isolated"`` restricts unary terms to nodes without
    edges (piecewise models, whose node pieces only cover those).
    """

    w_unary: np.ndarray   # (r, D_node)
    w_pair: np.ndarray    # (r*r, D_edge)
    r: int
    method: str = "pl"
    unary_scope: str = "all"
    config: dict = field(default_factory=dict)

    def energy(self, instance: Instance) -> EnergyFunction:
        g = instance.graph
        r = self.r
        if g.m:
            unary = instance.node_features @ self.w_unary.T
            if self.unary_scope == "isolated":
                unary = np.where(g.isolated[:, None], unary, 0.0)
        else:
            unary = np.zeros((0, r))
        if g.n_edges:
            pair = (instance.edge_features @ self.w_pair.T).reshape(-1, r, r)
        else:
            pair = np.zeros((0, r, r))
        return EnergyFunction(g, unary, pair)


@dataclass
class _Stack:
    """A corpus flattened into one disjoint-union graph."""

    Xn: np.ndarray
    Xe: np.ndarray
    y: np.ndarray
    s: np.ndarray
    t: np.ndarray
    isolated: np.ndarray
    graph: object
    r: int
    dn: int
    de: int


def _stack(instances: Sequence[Instance], r: int) -> _Stack:
    if not instances:
        raise ValueError("no training instances")
    for inst in instances:
        if inst.labels is None:
            raise ValueError(f"instance {inst.id!r} has no labels")
        if inst.graph.m and inst.labels.max() >= r:
            raise ValueError(f"instance {inst.id!r} has a label outside [0, {r})")
    dn = max((i.node_dim for i in instances if i.graph.m), default=0)
    de = max((i.edge_dim for i in instances if i.graph.n_edges), default=0)
    g, _, _ = disjoint_union([i.graph for i in instances])
    Xn = np.concatenate([i.node_features.reshape(i.graph.m, -1) for i in instances
                         if i.graph.m]).reshape(-1, dn)
    edge_blocks = [i.edge_features for i in instances if i.graph.n_edges]
    Xe = np.concatenate(edge_blocks).reshape(-1, de) if edge_blocks else np.zeros((0, de))
    y = np.concatenate([i.labels for i in instances]).astype(np.int64)
    return _Stack(Xn, Xe, y, g.edges[:, 0].copy(), g.edges[:, 1].copy(), g.isolated.copy(),
                  g, r, dn, de)


def _layout(method: str, st: _Stack):
    """Which weight blocks a method optimises: (use_unary, use_pair)."""
    if method == "logistic":
        return True, False
    if method == "pw":
        return bool(st.isolated.any()), st.Xe.shape[0] > 0
    return True, st.Xe.shape[0] > 0


def _unpack(w, st: _Stack, method: str):
    use_u, use_p = _layout(method, st)
    r = st.r
    nu = r * st.dn if use_u else 0
    wu = w[:nu].reshape(r, st.dn) if use_u else np.zeros((r, st.dn))
    wp = w[nu:].reshape(r * r, st.de) if use_p else np.zeros((r * r, st.de))
    return wu, wp


def _pack(gu, gp, st: _Stack, method: str):
    use_u, use_p = _layout(method, st)
    parts = []
    if use_u:
        parts.append(gu.ravel())
    if use_p:
        parts.append(gp.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def n_params(method: str, st: _Stack) -> int:
    use_u, use_p = _layout(method, st)
    return (st.r * st.dn if use_u else 0) + (st.r * st.r * st.de if use_p else 0)


def _softmax_nll(scores: np.ndarray, target: np.ndarray):
    """Sum of ``-log softmax(-scores)[target]`` and its gradient w.r.t. ``scores``."""
    n = len(target)
    val = scores[np.arange(n), target].sum() + logsumexp(-scores, axis=1).sum()
    g = -softmax(-scores, axis=1)
    g[np.arange(n), target] += 1.0
    return float(val), g


def _obj_logistic(w, st, lam):
    wu, _ = _unpack(w, st, "logistic")
    val, G = _softmax_nll(st.Xn @ wu.T, st.y)
    gu = G.T @ st.Xn
    return val + lam * float(w @ w), _pack(gu, None, st, "logistic") + 2 * lam * w


def _obj_pl(w, st, lam):
    wu, wp = _unpack(w, st, "pl")
    r = st.r
    local = st.Xn @ wu.T
    ne = len(st.s)
    if ne:
        th = (st.Xe @ wp.T).reshape(ne, r, r)
        ar = np.arange(ne)
        np.add.at(local, st.s, th[ar, :, st.y[st.t]])
        np.add.at(local, st.t, th[ar, st.y[st.s], :])
    val, G = _softmax_nll(local, st.y)
    gu = G.T @ st.Xn
    gp = np.zeros((r * r, st.de))
    if ne:
        dth = np.zeros((ne, r, r))
        dth[ar, :, st.y[st.t]] = G[st.s]
        dth[ar, st.y[st.s], :] += G[st.t]
        gp = dth.reshape(ne, r * r).T @ st.Xe
    return val + lam * float(w @ w), _pack(gu, gp, st, "pl") + 2 * lam * w


def _obj_pw(w, st, lam):
    wu, wp = _unpack(w, st, "pw")
    r = st.r
    val = 0.0
    gu = np.zeros_like(wu)
    gp = np.zeros_like(wp)
    if len(st.s):
        sc = st.Xe @ wp.T
        v, G = _softmax_nll(sc, st.y[st.s] * r + st.y[st.t])
        val += v
        gp = G.T @ st.Xe
    iso = np.flatnonzero(st.isolated)
    if len(iso):
        v, G = _softmax_nll(st.Xn[iso] @ wu.T, st.y[iso])
        val += v
        gu = G.T @ st.Xn[iso]
    return val + lam * float(w @ w), _pack(gu, gp, st, "pw") + 2 * lam * w


def _obj_tree_cll(w, st, lam):
    wu, wp = _unpack(w, st, "tree_cll")
    r = st.r
    ne = len(st.s)
    unary = st.Xn @ wu.T
    pair = (st.Xe @ wp.T).reshape(ne, r, r) if ne else np.zeros((0, r, r))
    energy = EnergyFunction(st.graph, unary, pair)
    marg, logz = tree_bp_marginals(energy, return_log_partition=True)
    M = len(st.y)
    ar = np.arange(M)
    e_true = unary[ar, st.y].sum()
    du = -marg.unary
    du[ar, st.y] += 1.0
    gu = du.T @ st.Xn
    gp = np.zeros((r * r, st.de))
    if ne:
        are = np.arange(ne)
        e_true += pair[are, st.y[st.s], st.y[st.t]].sum()
        dp = -marg.pairwise
        dp[are, st.y[st.s], st.y[st.t]] += 1.0
        gp = dp.reshape(ne, r * r).T @ st.Xe
    val = float(e_true + logz)
    return val + lam * float(w @ w), _pack(gu, gp, st, "tree_cll") + 2 * lam * w


_OBJECTIVES = {"logistic": _obj_logistic, "pl": _obj_pl, "pw": _obj_pw,
               "tree_cll": _obj_tree_cll}


def make_objective(method: str, instances: Sequence[Instance], r: int, lam: float = 0.0):
    """``(fun, n)`` where ``fun(w) -> (value, gradient)`` over ``n`` parameters."""
    if method not in _OBJECTIVES:
        raise ValueError(f"unknown method {method!r}")
    st = _stack(instances, r)
    if method == "tree_cll" and not is_tree(st.graph):
        raise ValueError("tree_cll requires every training graph to be a forest")
    f = _OBJECTIVES[method]
    return (lambda w: f(np.asarray(w, dtype=np.float64), st, lam)), n_params(method, st)


def _gradient_descent(fun: Callable, w0: np.ndarray, max_iter: int, tol: float):
    w = w0.copy()
    f, g = fun(w)
    step = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        gn = float(g @ g)
        if np.sqrt(gn) <= tol:
            break
        while True:
            w_new = w - step * g
            f_new, g_new = fun(w_new)
            if f_new <= f - 1e-4 * step * gn or step < 1e-20:
                break
            step *= 0.5
        w, f, g = w_new, f_new, g_new
        step *= 2.0
    return w, f, g, it


def _train(method: str, instances, r, lam, max_iter, tol, optimizer, w0=None) -> LogLinearCRF:
    if method not in _OBJECTIVES:
        raise ValueError(f"unknown method {method!r}")
    st = _stack(instances, r)
    if method == "tree_cll" and not is_tree(st.graph):
        raise ValueError("tree_cll requires every training graph to be a forest")
    f = _OBJECTIVES[method]

    def fun(w):
        return f(w, st, lam)

    n = n_params(method, st)
    w0 = np.zeros(n) if w0 is None else np.asarray(w0, dtype=np.float64)
    if optimizer == "lbfgs":
        res = minimize(fun, w0, jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0,
                                "maxcor": 20})
        w, g = res.x, res.jac
    elif optimizer == "gd":
        w, _, g, _ = _gradient_descent(fun, w0, max_iter, tol)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    gnorm = float(np.abs(g).max()) if len(g) else 0.0
    if gnorm > tol:
        warnings.warn(f"{method} training stopped with gradient norm {gnorm:.3g} > {tol:g}",
                      ConvergenceWarning, stacklevel=3)
    wu, wp = _unpack(w, st, method)
    scope = "isolated" if method == "pw" else "all"
    return LogLinearCRF(wu, wp, r, method, scope,
                        {"lam": lam, "max_iter": max_iter, "tol": tol, "optimizer": optimizer})


def logistic_unary_train(instances, r: int, lam: float = 1e-3, max_iter: int = 500,
                         tol: float = 1e-6, optimizer: str = "lbfgs", w0=None) -> LogLinearCRF:
    """Per-node multinomial logistic regression (no pairwise terms)."""
    return _train("logistic", instances, r, lam, max_iter, tol, optimizer, w0)


def pseudolikelihood_train(instances, r: int, lam: float = 1e-3, max_iter: int = 500,
                           tol: float = 1e-6, optimizer: str = "lbfgs", w0=None) -> LogLinearCRF:
    return _train("pl", instances, r, lam, max_iter, tol, optimizer, w0)


def piecewise_train(instances, r: int, lam: float = 1e-3, max_iter: int = 500,
                    tol: float = 1e-6, optimizer: str = "lbfgs", w0=None) -> LogLinearCRF:
    return _train("pw", instances, r, lam, max_iter, tol, optimizer, w0)


def tree_cll_train(instances, r: int, lam: float = 1e-3, max_iter: int = 500,
                   tol: float = 1e-6, optimizer: str = "lbfgs", w0=None) -> LogLinearCRF:
    """Exact conditional likelihood; every training graph must be a forest."""
    return _train("tree_cll", instances, r, lam, max_iter, tol, optimizer, w0)


TRAINERS = {"logistic": logistic_unary_train, "pl": pseudolikelihood_train,
            "pw": piecewise_train, "tree_cll": tree_cll_train}


def loglinear_to_dict(model: LogLinearCRF) -> dict:
    return {
        "type": "loglinear_crf",
        "method": model.method,
        "r": model.r,
        "unary_scope": model.unary_scope,
        "config": model.config,
        "w_unary": model.w_unary.tolist(),
        "w_pair": model.w_pair.tolist(),
    }


def loglinear_from_dict(d: dict) -> LogLinearCRF:
    if d.get("type") != "loglinear_crf":
        raise ValueError(f"not a log-linear CRF: type {d.get('type')!r}")
    r = int(d["r"])
    wu = np.asarray(d["w_unary"], dtype=np.float64).reshape(r, -1)
    wp = np.asarray(d["w_pair"], dtype=np.float64).reshape(r * r, -1)
    return LogLinearCRF(wu, wp, r, d["method"], d.get("unary_scope", "all"),
                        dict(d.get("config", {})))


__all__ = [
    "METHODS", "LogLinearCRF", "make_objective", "logistic_unary_train",
    "pseudolikelihood_train", "piecewise_train", "tree_cll_train", "TRAINERS",
    "loglinear_to_dict", "loglinear_from_dict",
]
