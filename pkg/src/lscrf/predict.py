"""Turning a trained LS-CRF into an energy function for a new graph.

Two composition rules:

* loopy (default): every edge contributes ``-log f_jk(phi_st)``; nodes with
  edges carry no unary term, isolated nodes get ``-log f_j(phi_s)``;
* tree: the closed-form tree parameterisation with node marginals
  recovered from the pair predictions.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .graph import ENERGY_CAP, EnergyFunction, Graph, GraphError, Instance, is_tree
from .inference import exact_map, icm, tree_map, trws_map
from .regress import clamp01
from .train import PairwiseModel

SOLVERS = ("exact", "tree", "trws", "icm")


def _isolated_unaries(model: PairwiseModel, instance: Instance, unary: np.ndarray):
    iso = instance.graph.isolated
    if not iso.any():
        return
    if model.unary_regressors is None:
        raise ValueError(
            "instance has isolated nodes but the model has no unary regressors; "
            "train with unary='always' to get them")
    unary[iso] = -np.log(model.unary_probs(instance.node_features[iso]))


def _unary_only_energy(model: PairwiseModel, instance: Instance) -> EnergyFunction:
    g = instance.graph
    unary = -np.log(model.unary_probs(instance.node_features)) if g.m else np.zeros((0, model.r))
    return EnergyFunction(g, unary, np.zeros((g.n_edges, model.r, model.r)))


def predict_energy_loopy(model: PairwiseModel, instance: Instance) -> EnergyFunction:
    """Edge-decomposition energy: ``theta_st;jk = -log clamp(f_jk(phi_st))``."""
    if model.unary_only:
        return _unary_only_energy(model, instance)
    g = instance.graph
    r = model.r
    pair = (-np.log(model.pair_probs(instance.edge_features)) if g.n_edges
            else np.zeros((0, r, r)))
    unary = np.zeros((g.m, r))
    _isolated_unaries(model, instance, unary)
    return EnergyFunction(g, unary, pair)


def node_marginals_from_pairs(graph: Graph, f: np.ndarray) -> np.ndarray:
    """Per-node ``f_s;j``: pair predictions marginalised onto each endpoint and
    averaged over the node's incident edges. Rows of isolated nodes are 0."""
    r = f.shape[1]
    acc = np.zeros((graph.m, r))
    if graph.n_edges:
        np.add.at(acc, graph.edges[:, 0], f.sum(axis=2))
        np.add.at(acc, graph.edges[:, 1], f.sum(axis=1))
    deg = graph.degree
    return np.divide(acc, deg[:, None], out=np.zeros_like(acc), where=deg[:, None] > 0)


def predict_energy_tree(model: PairwiseModel, instance: Instance) -> EnergyFunction:
    """Closed-form tree composition from predicted marginals.

    ``theta_s;j = -log f_s;j`` and ``theta_st;jk = -log(f_jk / (f_s;j f_t;k))``
    with ``f_s;j`` from :func:`node_marginals_from_pairs`, clamped to
    ``[1e-9, 1]``.
    """
    if model.unary_only:
        return _unary_only_energy(model, instance)
    g = instance.graph
    if not is_tree(g):
        raise GraphError("tree composition requires an acyclic graph")
    r = model.r
    f = model.pair_probs(instance.edge_features) if g.n_edges else np.zeros((0, r, r))
    fu = clamp01(node_marginals_from_pairs(g, f)) if g.m else np.zeros((0, r))
    unary = -np.log(fu) if g.m else fu
    if g.n_edges:
        s, t = g.edges[:, 0], g.edges[:, 1]
        pair = -np.log(f / (fu[s][:, :, None] * fu[t][:, None, :]))
    else:
        pair = np.zeros((0, r, r))
    iso = g.isolated
    if iso.any():
        unary[iso] = 0.0
        _isolated_unaries(model, instance, unary)
    return EnergyFunction(g, unary, pair)


def predict_energy(model: PairwiseModel, instance: Instance,
                   composition: str = "loopy") -> EnergyFunction:
    if composition == "loopy":
        return predict_energy_loopy(model, instance)
    if composition == "tree":
        return predict_energy_tree(model, instance)
    if composition == "auto":
        if is_tree(instance.graph):
            return predict_energy_tree(model, instance)
        return predict_energy_loopy(model, instance)
    raise ValueError(f"unknown composition {composition!r}")


def node_scores(model: PairwiseModel, instance: Instance) -> np.ndarray:
    """Per-node label probabilities: unary regressors where available,
    otherwise pair predictions marginalised onto nodes."""
    g = instance.graph
    if model.unary_only:
        return model.unary_probs(instance.node_features)
    f = model.pair_probs(instance.edge_features) if g.n_edges else np.zeros((0, model.r, model.r))
    sc = node_marginals_from_pairs(g, f)
    if g.isolated.any() and model.unary_regressors is not None:
        sc[g.isolated] = model.unary_probs(instance.node_features[g.isolated])
    return sc


def map_labeling(energy: EnergyFunction, solver: str = "trws",
                 init: Optional[np.ndarray] = None, max_iters: int = 100):
    """Minimise an energy with the named solver; returns an InferenceResult."""
    if solver == "exact":
        return exact_map(energy)
    if solver == "tree":
        return tree_map(energy)
    if solver == "trws":
        return trws_map(energy, max_iters=max_iters)
    if solver == "icm":
        if init is None:
            init = np.argmin(energy.unary, axis=1) if energy.m else np.zeros(0, dtype=np.int64)
        return icm(energy, init, max_sweeps=max_iters)
    raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")


def predict_labeling(model: PairwiseModel, instance: Instance, solver: str = "trws",
                     composition: str = "loopy", max_iters: int = 100) -> np.ndarray:
    """MAP labeling of one instance under the model's predicted energy.

    ICM starts from the per-node argmax of :func:`node_scores`.
    """
    energy = predict_energy(model, instance, composition)
    init = None
    if solver == "icm" and instance.graph.m:
        init = np.argmax(node_scores(model, instance), axis=1)
    return map_labeling(energy, solver, init=init, max_iters=max_iters).labeling


# -- interchange formats ----------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def energy_to_grid_text(energy: EnergyFunction) -> str:
    """Plain-text energy dump.

    Header ``m r n_edges``; then ``m`` lines of ``r`` unary values; then one
    line per edge: ``s t`` followed by the ``r*r`` table row-major.
    """
    lines = [f"{energy.m} {energy.r} {energy.graph.n_edges}"]
    for row in energy.unary:
        lines.append(" ".join(_fmt(v) for v in row))
    for (s, t), tab in zip(energy.graph.edges.tolist(), energy.pairwise):
        lines.append(f"{s} {t} " + " ".join(_fmt(v) for v in tab.ravel()))
    return "\n".join(lines) + "\n"


def energy_from_grid_text(text: str) -> EnergyFunction:
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not rows or len(rows[0]) != 3:
        raise ValueError("missing 'm r n_edges' header")
    m, r, ne = (int(v) for v in rows[0])
    if len(rows) != 1 + m + ne:
        raise ValueError(f"expected {1 + m + ne} lines, found {len(rows)}")
    unary = np.array([[float(v) for v in row] for row in rows[1:1 + m]]).reshape(m, r)
    edges, pair = [], []
    for ln, row in enumerate(rows[1 + m:], start=2 + m):
        if len(row) != 2 + r * r:
            raise ValueError(f"line {ln}: expected {2 + r * r} fields")
        edges.append((int(row[0]), int(row[1])))
        pair.append([float(v) for v in row[2:]])
    g = Graph(m, np.array(edges, dtype=np.int64).reshape(-1, 2))
    return EnergyFunction(g, unary, np.array(pair).reshape(ne, r, r))


def energy_to_uai(energy: EnergyFunction) -> str:
    """UAI ``MARKOV`` network with factor tables ``exp(-theta)``.

    Unary factors come first (one per node), then one factor per edge.
    """
    m, r = energy.m, energy.r
    ne = energy.graph.n_edges
    out = ["MARKOV", str(m), " ".join([str(r)] * m), str(m + ne)]
    out += [f"1 {s}" for s in range(m)]
    out += [f"2 {s} {t}" for s, t in energy.graph.edges.tolist()]
    out.append("")
    for row in energy.unary:
        out += [str(r), " ".join(_fmt(v) for v in np.exp(-row)), ""]
    for tab in energy.pairwise:
        out += [str(r * r)]
        out += [" ".join(_fmt(v) for v in np.exp(-tab[j])) for j in range(r)]
        out.append("")
    return "\n".join(out)


def energy_from_uai(text: str) -> EnergyFunction:
    """Read back a pairwise UAI ``MARKOV`` file (unary and pairwise factors only)."""
    tok = text.split()
    if not tok or tok[0] != "MARKOV":
        raise ValueError("not a UAI MARKOV file")
    pos = 1
    m = int(tok[pos])
    pos += 1
    cards = [int(v) for v in tok[pos:pos + m]]
    pos += m
    if len(set(cards)) > 1:
        raise ValueError("all variables must share one cardinality")
    r = cards[0] if cards else 1
    nf = int(tok[pos])
    pos += 1
    scopes = []
    for _ in range(nf):
        k = int(tok[pos])
        scopes.append([int(v) for v in tok[pos + 1:pos + 1 + k]])
        pos += 1 + k
    unary = np.zeros((m, r))
    edges, tabs = {}, {}
    for sc in scopes:
        n = int(tok[pos])
        vals = np.array([float(v) for v in tok[pos + 1:pos + 1 + n]])
        pos += 1 + n
        with np.errstate(divide="ignore"):
            th = -np.log(vals)
        if len(sc) == 1:
            unary[sc[0]] += th
        elif len(sc) == 2:
            s, t = sc
            th = th.reshape(r, r)
            if s > t:
                s, t, th = t, s, th.T
            tabs[(s, t)] = tabs.get((s, t), 0) + th
            edges[(s, t)] = True
        else:
            raise ValueError("only unary and pairwise factors are supported")
    keys = sorted(edges)
    g = Graph(m, np.array(keys, dtype=np.int64).reshape(-1, 2))
    pair = np.array([tabs[k] for k in keys]).reshape(len(keys), r, r)
    return EnergyFunction(g, np.minimum(unary, ENERGY_CAP),
                          np.minimum(pair, ENERGY_CAP))


__all__ = [
    "SOLVERS", "predict_energy_loopy", "predict_energy_tree", "predict_energy",
    "node_marginals_from_pairs", "node_scores", "map_labeling", "predict_labeling",
    "energy_to_grid_text", "energy_from_grid_text", "energy_to_uai", "energy_from_uai",
]
