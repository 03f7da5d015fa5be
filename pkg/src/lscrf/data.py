"""Corpus files, synthetic corpora, metrics, splits and model files.

Corpus files are line-delimited JSON. The first line is a header::

    {"format": "lscrf-corpus", "version": 1, "label_names": [...],
     "node_dim": Dn, "edge_dim": De, "node_feature_names": [...],
     "edge_feature_names": [...], "meta": {...}}

and every following line is one instance::

    {"id": "...", "m": m, "edges": [[s, t], ...], "node_features": [[...], ...],
     "edge_features": [[...], ...], "labels": [...] | null}
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import softmax

from .graph import EnergyFunction, Graph, Instance, disjoint_union
from .inference import gibbs_sample, tree_sample
from .parallel import map_items
from .regress import clamp01

CORPUS_FORMAT = "lscrf-corpus"
MODEL_FORMAT = "lscrf-model"
LABELINGS_FORMAT = "lscrf-labelings"
VERSION = 1

#: Instances generated per derived seed. Fixed so output never depends on ``jobs``.
GEN_CHUNK = 1000

PathLike = Union[str, Path]


class CorpusFormatError(ValueError):
    """Malformed corpus, labelings or model file."""


@dataclass(eq=False)
class Corpus:
    instances: list
    label_names: list
    node_dim: int
    edge_dim: int
    node_feature_names: list = field(default_factory=list)
    edge_feature_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = set()
        for inst in self.instances:
            self._check(inst)
            if inst.id in ids:
                raise CorpusFormatError(f"duplicate instance id {inst.id!r}")
            ids.add(inst.id)

    def _check(self, inst: Instance):
        if inst.graph.m and inst.node_dim != self.node_dim:
            raise CorpusFormatError(
                f"instance {inst.id!r}: node feature dim {inst.node_dim} != {self.node_dim}")
        if inst.graph.n_edges and inst.edge_dim != self.edge_dim:
            raise CorpusFormatError(
                f"instance {inst.id!r}: edge feature dim {inst.edge_dim} != {self.edge_dim}")
        if inst.labels is not None and inst.graph.m and inst.labels.max() >= self.r:
            raise CorpusFormatError(f"instance {inst.id!r}: label outside [0, {self.r})")

    @property
    def r(self) -> int:
        return len(self.label_names)

    def __len__(self):
        return len(self.instances)

    def subset(self, idx) -> "Corpus":
        return Corpus([self.instances[i] for i in idx], list(self.label_names),
                      self.node_dim, self.edge_dim, list(self.node_feature_names),
                      list(self.edge_feature_names), dict(self.meta))


# -- corpus file format -------------------------------------------------------

def _header(corpus: Corpus) -> dict:
    return {
        "format": CORPUS_FORMAT,
        "version": VERSION,
        "label_names": list(corpus.label_names),
        "node_dim": corpus.node_dim,
        "edge_dim": corpus.edge_dim,
        "node_feature_names": list(corpus.node_feature_names),
        "edge_feature_names": list(corpus.edge_feature_names),
        "meta": corpus.meta,
    }


def instance_to_record(inst: Instance) -> dict:
    return {
        "id": inst.id,
        "m": inst.graph.m,
        "edges": inst.graph.edges.tolist(),
        "node_features": inst.node_features.tolist(),
        "edge_features": inst.edge_features.tolist(),
        "labels": None if inst.labels is None else inst.labels.tolist(),
    }


def instance_from_record(rec: dict, node_dim: int, edge_dim: int) -> Instance:
    m = int(rec["m"])
    edges = np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2)
    g = Graph(m, edges)
    nf = np.asarray(rec["node_features"], dtype=np.float64).reshape(m, node_dim)
    ef = np.asarray(rec["edge_features"], dtype=np.float64).reshape(len(edges), edge_dim)
    labels = rec.get("labels")
    return Instance(g, nf, ef, None if labels is None else np.asarray(labels, dtype=np.int64),
                    str(rec["id"]))


def write_corpus(corpus: Corpus, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header(corpus)) + "\n")
        for inst in corpus.instances:
            fh.write(json.dumps(instance_to_record(inst)) + "\n")


def read_corpus(path: PathLike) -> Corpus:
    """Parse a corpus file; errors name the offending line."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise CorpusFormatError(f"{path}: empty corpus file")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}:1: bad header: {exc.msg}") from None
    if not isinstance(head, dict) or head.get("format") != CORPUS_FORMAT:
        raise CorpusFormatError(f"{path}:1: not a {CORPUS_FORMAT} header")
    if head.get("version") != VERSION:
        raise CorpusFormatError(f"{path}:1: unsupported version {head.get('version')!r}")
    try:
        dn, de = int(head["node_dim"]), int(head["edge_dim"])
        label_names = [str(v) for v in head["label_names"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"{path}:1: incomplete header ({exc})") from None
    corpus = Corpus([], label_names, dn, de, list(head.get("node_feature_names", [])),
                    list(head.get("edge_feature_names", [])), dict(head.get("meta", {})))
    ids = set()
    for ln, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            inst = instance_from_record(json.loads(text), dn, de)
            corpus._check(inst)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}:{ln}: {exc}") from None
        if inst.id in ids:
            raise CorpusFormatError(f"{path}:{ln}: duplicate instance id {inst.id!r}")
        ids.add(inst.id)
        corpus.instances.append(inst)
    return corpus


# -- labelings ----------------------------------------------------------------

def write_labelings(ids: Sequence[str], labelings: Sequence[np.ndarray], path: PathLike,
                    config: Optional[dict] = None) -> None:
    if len(ids) != len(labelings):
        raise ValueError("ids and labelings differ in length")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": LABELINGS_FORMAT, "version": VERSION,
                             "config": config or {}}) + "\n")
        for i, y in zip(ids, labelings):
            fh.write(json.dumps({"id": i, "labels": np.asarray(y).tolist()}) + "\n")


def read_labelings(path: PathLike) -> dict:
    """``{id: labels}`` in file order."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusFormatError(f"{path}: empty labelings file")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError:
        head = None
    if not isinstance(head, dict) or head.get("format") != LABELINGS_FORMAT:
        raise CorpusFormatError(f"{path}:1: not a {LABELINGS_FORMAT} header")
    out = {}
    for ln, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            rec = json.loads(text)
            out[str(rec["id"])] = np.asarray(rec["labels"], dtype=np.int64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}:{ln}: {exc}") from None
    return out


# -- model files --------------------------------------------------------------

def model_to_dict(model) -> dict:
    from .baselines import LogLinearCRF, loglinear_to_dict
    from .train import PairwiseModel, pairwise_model_to_dict
    if isinstance(model, PairwiseModel):
        body = pairwise_model_to_dict(model)
    elif isinstance(model, LogLinearCRF):
        body = loglinear_to_dict(model)
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    return {"format": MODEL_FORMAT, "version": VERSION, "model": body}


def model_from_dict(d: dict):
    from .baselines import loglinear_from_dict
    from .train import pairwise_model_from_dict
    if d.get("format") != MODEL_FORMAT:
        raise CorpusFormatError("not a model file")
    if d.get("version") != VERSION:
        raise CorpusFormatError(f"unsupported model version {d.get('version')!r}")
    body = d["model"]
    kind = body.get("type")
    if kind == "lscrf_pairwise":
        return pairwise_model_from_dict(body)
    if kind == "loglinear_crf":
        return loglinear_from_dict(body)
    raise CorpusFormatError(f"unknown model type {kind!r}")


def save_model(model, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_model(path: PathLike):
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: {exc}") from None
    return model_from_dict(d)


# -- synthetic tree corpora ---------------------------------------------------

TREE_GENERATORS = ("linear", "logistic", "xor")


@dataclass(frozen=True, eq=False)
class PairGenerator:
    """Ground-truth conditional pair distribution ``f*(phi)``.

    * ``linear``: ``(1 + c <w_jk, phi>) / r^2`` with the ``w_jk`` summing to
      zero over pairs, so every ``phi`` in the cube gives a distribution;
    * ``logistic``: ``softmax_jk(<w_jk, phi>)``;
    * ``xor``: all mass on ``(j, k)`` with ``j = [phi_2 > 0]`` and
      ``k = j`` iff ``phi_0 phi_1 > 0`` (otherwise ``k = j + 1 mod r``).

    The family output is mixed with the uniform distribution at weight ``noise``.
    """

    kind: str
    r: int
    weights: np.ndarray   # (r*r, D_edge)
    noise: float

    def __call__(self, phi: np.ndarray) -> np.ndarray:
        phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
        r = self.r
        if self.kind == "linear":
            scale = 0.9 / np.abs(self.weights[:, :-1]).sum(axis=1).max()
            f = (1.0 + scale * phi[:, :-1] @ self.weights[:, :-1].T) / (r * r)
        elif self.kind == "logistic":
            f = softmax(phi @ self.weights.T, axis=1)
        else:
            j = (phi[:, 2] > 0).astype(np.int64) % r
            k = np.where(phi[:, 0] * phi[:, 1] > 0, j, (j + 1) % r)
            f = np.zeros((len(phi), r * r))
            f[np.arange(len(phi)), j * r + k] = 1.0
        f = (1.0 - self.noise) * f + self.noise / (r * r)
        return f.reshape(-1, r, r)


def make_pair_generator(r: int, d_edge: int, kind: str = "logistic", noise: float = 0.1,
                        seed: int = 0) -> PairGenerator:
    if kind not in TREE_GENERATORS:
        raise ValueError(f"unknown generator {kind!r}; expected one of {TREE_GENERATORS}")
    if kind == "xor" and d_edge < 4:
        raise ValueError("the xor generator needs d_edge >= 4")
    if d_edge < 2:
        raise ValueError("d_edge counts the constant feature and must be >= 2")
    if not 0 <= noise <= 1:
        raise ValueError("noise must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0])
    w = rng.normal(size=(r * r, d_edge))
    if kind == "linear":
        w -= w.mean(axis=0)
    else:
        w *= 3.0 / np.sqrt(d_edge)
    return PairGenerator(kind, r, w, float(noise))


def _tree_chunk(args, c: int):
    n, m, r, d_edge, gen, seed = args
    lo, hi = c * GEN_CHUNK, min((c + 1) * GEN_CHUNK, n)
    rng = np.random.default_rng([seed, 1, c])
    graphs, feats = [], []
    for _ in range(lo, hi):
        parents = (rng.random(max(m - 1, 0)) * np.arange(1, m)).astype(np.int64)
        g = Graph(m, np.stack([parents, np.arange(1, m)], axis=1).reshape(-1, 2))
        phi = np.ones((g.n_edges, d_edge))
        phi[:, :-1] = rng.uniform(-1.0, 1.0, size=(g.n_edges, d_edge - 1))
        graphs.append(g)
        feats.append(phi)
    union, noff, _ = disjoint_union(graphs)
    allphi = np.concatenate(feats).reshape(-1, d_edge)
    pair = -np.log(clamp01(gen(allphi))) if len(allphi) else np.zeros((0, r, r))
    energy = EnergyFunction(union, np.zeros((union.m, r)), pair)
    y = tree_sample(energy, n=1, seed=rng)[0]
    out = []
    for i, (g, phi) in enumerate(zip(graphs, feats)):
        out.append(Instance(g, np.ones((m, 1)), phi, y[noff[i]:noff[i] + m], f"t{lo + i:07d}"))
    return out


def synth_tree_corpus(n_instances: int, m: int, r: int, d_edge: int,
                      generator: str = "logistic", noise: float = 0.1, seed: int = 0,
                      jobs: int = 1) -> Corpus:
    """Random trees with exact labels from the CRF ``theta_st = -log f*(phi_st)``.

    ``d_edge`` includes a trailing constant-1 feature; the rest are uniform
    on ``[-1, 1]``. Node features are the single constant 1.
    """
    if min(n_instances, m, r) < 1:
        raise ValueError("n_instances, m and r must be positive")
    gen = make_pair_generator(r, d_edge, generator, noise, seed)
    n_chunks = -(-n_instances // GEN_CHUNK)
    parts = map_items(_tree_chunk, (n_instances, m, r, d_edge, gen, seed), n_chunks, jobs)
    meta = {"generator": "tree", "family": generator, "m": m, "r": r, "d_edge": d_edge,
            "noise": noise, "seed": seed}
    return Corpus([i for p in parts for i in p], [str(j) for j in range(r)], 1, d_edge,
                  ["const"], [f"x{j}" for j in range(d_edge - 1)] + ["const"], meta)


# -- synthetic grid corpora ---------------------------------------------------

GRID_BURN_IN = 100


def _grid_chunk(args, c: int):
    n, h, w, r, coupling, snr, seed = args
    lo, hi = c * GEN_CHUNK, min((c + 1) * GEN_CHUNK, n)
    k = hi - lo
    rng = np.random.default_rng([seed, 2, c])
    g = Graph.grid(h, w)
    union, _, _ = disjoint_union([g] * k)
    unary = -rng.normal(size=(union.m, r))
    pair = np.broadcast_to(-coupling * np.eye(r), (union.n_edges, r, r)).copy()
    energy = EnergyFunction(union, unary, pair)
    y = gibbs_sample(energy, n=1, burn_in=GRID_BURN_IN, seed=rng)[0].reshape(k, g.m)
    noisy = snr * np.eye(r)[y] + rng.normal(size=(k, g.m, r))
    s, t = g.edges[:, 0], g.edges[:, 1]
    out = []
    for i in range(k):
        nf = np.concatenate([noisy[i], np.ones((g.m, 1))], axis=1)
        ef = np.concatenate([noisy[i][s], noisy[i][t], np.ones((g.n_edges, 1))], axis=1)
        out.append(Instance(g, nf, ef, y[i], f"g{lo + i:07d}"))
    return out


def synth_grid_corpus(n_instances: int, h: int, w: int, r: int = 2, coupling: float = 1.0,
                      unary_snr: float = 1.0, seed: int = 0, jobs: int = 1) -> Corpus:
    """4-connected grids labelled by Gibbs sampling a Potts model.

    The sampling energy is ``-coupling [y_s = y_t]`` per edge plus a standard
    normal random field on the unaries. Node features are
    ``unary_snr * onehot(y) + N(0, 1)`` followed by a constant 1; edge features
    concatenate the two endpoints' noisy vectors and a constant 1.
    """
    if min(n_instances, h, w, r) < 1:
        raise ValueError("n_instances, h, w and r must be positive")
    n_chunks = -(-n_instances // GEN_CHUNK)
    parts = map_items(_grid_chunk, (n_instances, h, w, r, coupling, unary_snr, seed),
                      n_chunks, jobs)
    names = [f"u{j}" for j in range(r)]
    meta = {"generator": "grid", "h": h, "w": w, "r": r, "coupling": coupling,
            "unary_snr": unary_snr, "seed": seed}
    return Corpus([i for p in parts for i in p], [str(j) for j in range(r)], r + 1,
                  2 * r + 1, names + ["const"],
                  [f"s_{v}" for v in names] + [f"t_{v}" for v in names] + ["const"], meta)


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalReport:
    per_pixel_accuracy: float
    per_class_accuracy: float
    confusion: np.ndarray        # rows: truth, columns: prediction
    label_names: list
    wall_times: dict = field(default_factory=dict)

    @property
    def class_recall(self) -> np.ndarray:
        """Recall per class; NaN for classes absent from the truth."""
        tot = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.diag(self.confusion) / tot

    def to_dict(self) -> dict:
        return {
            "per_pixel_accuracy": self.per_pixel_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion.tolist(),
            "label_names": list(self.label_names),
            "wall_times": dict(self.wall_times),
        }

    def to_table(self) -> str:
        width = max([len(n) for n in self.label_names] + [5])
        lines = [f"per-pixel accuracy  {100 * self.per_pixel_accuracy:6.2f}%",
                 f"per-class accuracy  {100 * self.per_class_accuracy:6.2f}%", "",
                 " " * width + " | " + " ".join(f"{n:>{width}}" for n in self.label_names)
                 + " | recall"]
        for name, row, rec in zip(self.label_names, self.confusion, self.class_recall):
            rec_s = "   -" if np.isnan(rec) else f"{100 * rec:5.1f}%"
            lines.append(f"{name:>{width}} | " + " ".join(f"{v:>{width}d}" for v in row)
                         + f" | {rec_s}")
        for phase, sec in self.wall_times.items():
            lines.append(f"time[{phase}] {sec:.3f}s")
        return "\n".join(lines)


def evaluate(predictions: Sequence, truths: Sequence, labels) -> EvalReport:
    """Accuracy of predicted against true labelings.

    ``labels`` is either the number of classes or a list of label names.
    Classes that never occur in the truth are left out of the per-class mean.
    """
    names = [str(j) for j in range(labels)] if isinstance(labels, (int, np.integer)) \
        else [str(v) for v in labels]
    r = len(names)
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} truths")
    conf = np.zeros((r, r), dtype=np.int64)
    for p, t in zip(predictions, truths):
        p = np.asarray(p, dtype=np.int64)
        t = np.asarray(t, dtype=np.int64)
        if p.shape != t.shape:
            raise ValueError(f"labeling of length {p.size} for a truth of length {t.size}")
        if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= r):
            raise ValueError(f"label outside [0, {r})")
        conf += np.bincount(t * r + p, minlength=r * r).reshape(r, r)
    total = int(conf.sum())
    if total == 0:
        raise ValueError("nothing to evaluate")
    pix = float(np.trace(conf)) / total
    present = conf.sum(axis=1) > 0
    recall = np.diag(conf)[present] / conf.sum(axis=1)[present]
    return EvalReport(pix, float(recall.mean()), conf, names)


def cross_val_splits(n: int, k: int, seed: int = 0) -> list:
    """``k`` (train, test) index pairs; the test folds partition ``range(n)``."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of instances {n}")
    perm = np.random.default_rng(seed).permutation(n)
    out = []
    for fold in np.array_split(perm, k):
        test = np.sort(fold)
        mask = np.ones(n, dtype=bool)
        mask[test] = False
        out.append((np.flatnonzero(mask), test))
    return out


def write_timings(path: PathLike, timings: dict) -> None:
    """CSV of ``phase,wall_time`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["phase", "wall_time"])
        for phase, sec in timings.items():
            wr.writerow([phase, f"{sec:.6f}"])


__all__ = [
    "Corpus", "CorpusFormatError", "read_corpus", "write_corpus", "instance_to_record",
    "instance_from_record", "write_labelings", "read_labelings", "model_to_dict",
    "model_from_dict", "save_model", "load_model", "TREE_GENERATORS", "PairGenerator",
    "make_pair_generator", "synth_tree_corpus", "synth_grid_corpus", "EvalReport",
    "evaluate", "cross_val_splits", "write_timings",
]
