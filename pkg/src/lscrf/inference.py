"""MAP labeling, marginals and sampling for pairwise energies.

Tree routines run level by level over a BFS rooting of the forest, so a
disjoint union of many small trees costs about as much Python overhead as
its deepest member.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .graph import (
    EnergyFunction,
    Graph,
    GraphError,
    MarginalTables,
    check_labeling,
    energy_eval,
    energy_eval_batch,
    enumerate_labelings,
)


@dataclass(frozen=True, eq=False)
class InferenceResult:
    labeling: np.ndarray
    energy: float
    lower_bound: Optional[float] = None
    iterations: int = 0
    bound_history: tuple = field(default=(), repr=False)


def _forest(graph: Graph):
    try:
        return graph.rooted
    except GraphError:
        raise GraphError("tree inference requires an acyclic graph") from None


def _child_parent_tables(table: np.ndarray, forest, nodes: np.ndarray) -> np.ndarray:
    """Pairwise tables for ``nodes`` indexed ``[x_child, x_parent]``."""
    t = table[forest.parent_edge[nodes]]
    flip = ~forest.child_first[nodes]
    if flip.any():
        t = t.copy()
        t[flip] = t[flip].transpose(0, 2, 1)
    return t


def _upward_logsum(energy: EnergyFunction, forest):
    """Sum-product pass from leaves to roots in the log domain.

    Returns ``(inmsg, upmsg)``: the summed incoming child messages at each
    node and the message each node sends to its parent.
    """
    psi = -energy.unary
    inmsg = np.zeros_like(psi)
    upmsg = np.zeros_like(psi)
    for nodes in reversed(forest.levels[1:]):
        a = psi[nodes] + inmsg[nodes]
        t = _child_parent_tables(-energy.pairwise, forest, nodes)
        msg = logsumexp(a[:, :, None] + t, axis=1)
        upmsg[nodes] = msg
        np.add.at(inmsg, forest.parent[nodes], msg)
    return inmsg, upmsg


def tree_log_partition(energy: EnergyFunction) -> float:
    """``log Z`` of a forest-structured energy by sum-product."""
    forest = _forest(energy.graph)
    inmsg, _ = _upward_logsum(energy, forest)
    roots = forest.roots
    if not len(roots):
        return 0.0
    return float(logsumexp(-energy.unary[roots] + inmsg[roots], axis=1).sum())


def tree_bp_marginals(energy: EnergyFunction, graph: Optional[Graph] = None,
                      return_log_partition: bool = False):
    """Exact unary and pairwise marginals of ``P ∝ exp(-E)`` on a forest."""
    graph = energy.graph if graph is None else graph
    forest = _forest(graph)
    psi = -energy.unary
    inmsg, upmsg = _upward_logsum(energy, forest)
    downmsg = np.zeros_like(psi)
    pair = np.zeros_like(energy.pairwise)
    for nodes in forest.levels[1:]:
        p = forest.parent[nodes]
        cavity = psi[p] + inmsg[p] + downmsg[p] - upmsg[nodes]
        t = _child_parent_tables(-energy.pairwise, forest, nodes)
        downmsg[nodes] = logsumexp(cavity[:, None, :] + t, axis=2)
        joint = (psi[nodes] + inmsg[nodes])[:, :, None] + t + cavity[:, None, :]
        joint -= logsumexp(joint, axis=(1, 2), keepdims=True)
        joint = np.exp(joint)
        flip = ~forest.child_first[nodes]
        joint[flip] = joint[flip].transpose(0, 2, 1)
        pair[forest.parent_edge[nodes]] = joint
    belief = psi + inmsg + downmsg
    belief -= logsumexp(belief, axis=1, keepdims=True)
    marg = MarginalTables(np.exp(belief), pair)
    if return_log_partition:
        roots = forest.roots
        logz = float(logsumexp(psi[roots] + inmsg[roots], axis=1).sum()) if len(roots) else 0.0
        return marg, logz
    return marg


def tree_map(energy: EnergyFunction, graph: Optional[Graph] = None) -> InferenceResult:
    """Global minimiser on a forest by min-sum dynamic programming."""
    graph = energy.graph if graph is None else graph
    forest = _forest(graph)
    inmin = np.zeros_like(energy.unary)
    back = np.zeros(energy.unary.shape, dtype=np.int64)
    for nodes in reversed(forest.levels[1:]):
        a = energy.unary[nodes] + inmin[nodes]
        t = _child_parent_tables(energy.pairwise, forest, nodes)
        tot = a[:, :, None] + t
        back[nodes] = np.argmin(tot, axis=1)
        np.add.at(inmin, forest.parent[nodes], np.min(tot, axis=1))
    y = np.zeros(energy.m, dtype=np.int64)
    if forest.levels:
        roots = forest.levels[0]
        y[roots] = np.argmin(energy.unary[roots] + inmin[roots], axis=1)
    for nodes in forest.levels[1:]:
        y[nodes] = back[nodes, y[forest.parent[nodes]]]
    return InferenceResult(y, energy_eval(energy, y))


def exact_map(energy: EnergyFunction) -> InferenceResult:
    """Minimiser by enumeration; ties go to the lexicographically smallest."""
    best_e, best_y = np.inf, None
    for Y in enumerate_labelings(energy.m, energy.r):
        en = energy_eval_batch(energy, Y)
        i = int(np.argmin(en))
        if en[i] < best_e:
            best_e, best_y = en[i], Y[i].copy()
    return InferenceResult(best_y, energy_eval(energy, best_y))


def _local_costs(energy: EnergyFunction, y: np.ndarray, s: int, inc) -> np.ndarray:
    c = energy.unary[s].copy()
    for e, v, s_first in inc[s]:
        if s_first:
            c += energy.pairwise[e][:, y[v]]
        else:
            c += energy.pairwise[e][y[v], :]
    return c


def icm(energy: EnergyFunction, init, max_sweeps: int = 100) -> InferenceResult:
    """Iterated conditional modes.

    Nodes are visited in ascending order; a node only moves to a label that
    strictly lowers its local energy, so the total energy never increases.
    """
    y = check_labeling(init, energy.m, energy.r).copy()
    inc = energy.graph.incident
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        changed = False
        for s in range(energy.m):
            c = _local_costs(energy, y, s, inc)
            j = int(np.argmin(c))
            if c[j] < c[y[s]]:
                y[s] = j
                changed = True
        if not changed:
            break
    return InferenceResult(y, energy_eval(energy, y), iterations=sweeps)


def trws_map(energy: EnergyFunction, graph: Optional[Graph] = None,
             max_iters: int = 100, tol: float = 1e-9) -> InferenceResult:
    """Sequential tree-reweighted message passing (TRW-S).

    The graph is decomposed into single-edge trees, so every node is shared
    by ``deg(s)`` trees and gets weight ``1/deg(s)``. Each iteration is a
    forward sweep in ascending node order followed by a backward sweep.
    After every iteration the dual bound (sum over trees of their minimum
    energy) is recorded; a labeling is read off during the forward sweep
    and the best one seen is returned.
    """
    graph = energy.graph if graph is None else graph
    m, r = energy.m, energy.r
    th_u = energy.unary
    th_p = energy.pairwise
    edges = graph.edges
    inc = graph.incident
    deg = graph.degree
    gamma = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    # Messages live in one flat array: row 2e is s -> t (a function of x_t),
    # row 2e + 1 is t -> s.  tab[i] is the edge table with rows indexed by
    # the sender's label, so msg[i] = min over rows of (a[:, None] + tab[i]).
    ne = graph.n_edges
    msg = np.zeros((2 * ne, r))
    tab = np.empty((2 * ne, r, r))
    tab[0::2] = th_p
    tab[1::2] = th_p.transpose(0, 2, 1)
    recv, fwd, bwd, low_msg, low_nbr, up_msg = [], [], [], [], [], []
    for s in range(m):
        rin, f_out, b_out, lo_m, lo_v, up = [], [], [], [], [], []
        for e, v, s_first in inc[s]:
            out_i = 2 * e if s_first else 2 * e + 1
            in_i = out_i ^ 1
            rin.append(in_i)
            (f_out if v > s else b_out).append(out_i)
            if v < s:
                lo_m.append(2 * e)
                lo_v.append(v)
            else:
                up.append(in_i)
        as_arr = lambda a: np.asarray(a, dtype=np.int64)
        recv.append(as_arr(rin))
        fwd.append((as_arr(f_out), as_arr(f_out) ^ 1))
        bwd.append((as_arr(b_out), as_arr(b_out) ^ 1))
        low_msg.append(as_arr(lo_m))
        low_nbr.append(as_arr(lo_v))
        up_msg.append(as_arr(up))

    def send(s, forward: bool):
        out_i, rev_i = fwd[s] if forward else bwd[s]
        if not len(out_i):
            return
        h = th_u[s] + msg[recv[s]].sum(axis=0)
        a = gamma[s] * h - msg[rev_i]
        out = (a[:, :, None] + tab[out_i]).min(axis=1)
        out -= out.min(axis=1, keepdims=True)
        msg[out_i] = out

    def bound() -> float:
        h = th_u.copy()
        if ne:
            np.add.at(h, edges[:, 0], msg[1::2])
            np.add.at(h, edges[:, 1], msg[0::2])
        lb = float(h[deg == 0].min(axis=1).sum()) if np.any(deg == 0) else 0.0
        if ne:
            s, t = edges[:, 0], edges[:, 1]
            tree = (th_p - msg[0::2][:, None, :] - msg[1::2][:, :, None]
                    + (gamma[s][:, None] * h[s])[:, :, None]
                    + (gamma[t][:, None] * h[t])[:, None, :])
            lb += float(tree.min(axis=(1, 2)).sum())
        return lb

    best_y = np.argmin(th_u, axis=1) if m else np.zeros(0, dtype=np.int64)
    best_e = energy_eval(energy, best_y)
    history = [bound()]
    it = 0
    for it in range(1, max_iters + 1):
        y = np.zeros(m, dtype=np.int64)
        for s in range(m):
            c = th_u[s] + msg[up_msg[s]].sum(axis=0)
            if len(low_msg[s]):
                c = c + tab[low_msg[s], y[low_nbr[s]]].sum(axis=0)
            y[s] = int(np.argmin(c))
            send(s, forward=True)
        en = energy_eval(energy, y)
        if en < best_e:
            best_e, best_y = en, y
        for s in range(m - 1, -1, -1):
            send(s, forward=False)
        lb = bound()
        gain = lb - history[-1]
        history.append(lb)
        if best_e - lb <= tol * max(1.0, abs(best_e)) or (it > 1 and abs(gain) <= tol):
            break
    lb = max(history)
    return InferenceResult(best_y, best_e, lower_bound=lb, iterations=it,
                           bound_history=tuple(history))


def _sample_categorical(logits: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw along the last axis given uniforms ``u``."""
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    c = np.cumsum(p, axis=-1)
    c /= c[..., -1:]
    return np.minimum((c < u[..., None]).sum(axis=-1), logits.shape[-1] - 1)


def tree_sample(energy: EnergyFunction, graph: Optional[Graph] = None, n: int = 1,
                seed=0) -> np.ndarray:
    """Exact i.i.d. samples from ``P ∝ exp(-E)`` on a forest.

    Returns an ``(n, m)`` integer array. Ancestral sampling: roots from
    their beliefs, then each child given its parent's sampled label.
    """
    graph = energy.graph if graph is None else graph
    forest = _forest(graph)
    rng = np.random.default_rng(seed)
    psi = -energy.unary
    inmsg, _ = _upward_logsum(energy, forest)
    Y = np.zeros((n, energy.m), dtype=np.int64)
    if not forest.levels:
        return Y
    roots = forest.levels[0]
    Y[:, roots] = _sample_categorical(
        np.broadcast_to(psi[roots] + inmsg[roots], (n, len(roots), energy.r)),
        rng.random((n, len(roots))))
    for nodes in forest.levels[1:]:
        a = psi[nodes] + inmsg[nodes]
        t = _child_parent_tables(-energy.pairwise, forest, nodes)
        py = Y[:, forest.parent[nodes]]                       # (n, k)
        cond = a[None, :, :] + t[np.arange(len(nodes))[None, :], :, py]
        Y[:, nodes] = _sample_categorical(cond, rng.random((n, len(nodes))))
    return Y


def greedy_coloring(graph: Graph) -> np.ndarray:
    """Smallest-available-colour colouring in ascending node order."""
    color = np.full(graph.m, -1, dtype=np.int64)
    inc = graph.incident
    for s in range(graph.m):
        used = {int(color[v]) for _, v, _ in inc[s] if color[v] >= 0}
        c = 0
        while c in used:
            c += 1
        color[s] = c
    return color


def gibbs_sample(energy: EnergyFunction, graph: Optional[Graph] = None, n: int = 1,
                 burn_in: int = 100, thin: int = 1, seed=0,
                 init: Optional[np.ndarray] = None) -> np.ndarray:
    """Single-site Gibbs sampler with a colour-ordered systematic scan.

    Nodes sharing a colour are conditionally independent given the rest, so
    they are resampled together; this is the same chain as visiting them one
    at a time. Returns an ``(n, m)`` array of labelings taken every ``thin``
    sweeps after ``burn_in`` sweeps.
    """
    graph = energy.graph if graph is None else graph
    rng = np.random.default_rng(seed)
    m, r = energy.m, energy.r
    if init is None:
        y = rng.integers(0, r, size=m)
    else:
        y = check_labeling(init, m, r).copy()
    color = greedy_coloring(graph)
    e = graph.edges
    groups = []
    for c in range(int(color.max()) + 1 if m else 0):
        nodes = np.flatnonzero(color == c)
        pos = np.full(m, -1, dtype=np.int64)
        pos[nodes] = np.arange(len(nodes))
        as_first = np.flatnonzero(color[e[:, 0]] == c) if len(e) else np.zeros(0, int)
        as_second = np.flatnonzero(color[e[:, 1]] == c) if len(e) else np.zeros(0, int)
        groups.append((nodes, pos, as_first, as_second))

    def sweep():
        for nodes, pos, f, s2 in groups:
            local = energy.unary[nodes].copy()
            if len(f):
                np.add.at(local, pos[e[f, 0]], energy.pairwise[f, :, y[e[f, 1]]])
            if len(s2):
                np.add.at(local, pos[e[s2, 1]], energy.pairwise[s2, y[e[s2, 0]], :])
            y[nodes] = _sample_categorical(-local, rng.random(len(nodes)))

    for _ in range(burn_in):
        sweep()
    out = np.zeros((n, m), dtype=np.int64)
    for i in range(n):
        for _ in range(max(thin, 1)):
            sweep()
        out[i] = y
    return out


__all__ = [
    "InferenceResult", "tree_bp_marginals", "tree_log_partition", "tree_map",
    "exact_map", "icm", "trws_map", "tree_sample", "gibbs_sample", "greedy_coloring",
]
