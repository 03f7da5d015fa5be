"""Command-line entry point: ``lscrf synth | train | predict | eval | export | infer``.

Option values are resolved as command-line flag, then ``--config`` file, then
built-in default. The resolved settings (minus ``jobs``) are written into
every output so a run can be reproduced from its artifacts.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
import warnings

import numpy as np

from . import __version__
from .baselines import TRAINERS, LogLinearCRF
from .data import (
    CorpusFormatError, evaluate, load_model, read_corpus, read_labelings, save_model,
    synth_grid_corpus, synth_tree_corpus, write_corpus, write_labelings, write_timings,
)
from .graph import GraphError, energy_eval
from .parallel import map_items
from .predict import (
    SOLVERS, energy_from_grid_text, energy_from_uai, energy_to_grid_text, energy_to_uai,
    map_labeling, node_scores, predict_energy,
)
from .train import GBTParams, PairwiseModel, SamplingConfig, train_lscrf

METHODS = ("lscrf-linear", "lscrf-gbt", "logistic", "pl", "pw", "tree-cll")

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    # synth
    "kind": "grid",
    "n": 100,
    "m": 10,
    "r": 2,
    "d_edge": 4,
    "generator": "logistic",
    "noise": 0.1,
    "height": 12,
    "width": 12,
    "coupling": 1.0,
    "snr": 1.0,
    # train
    "method": "lscrf-linear",
    "lam": None,            # per-method default, see _lam
    "trees": 500,
    "depth": 6,
    "learning_rate": 0.1,
    "pair_fraction": 1.0,
    "unary_fraction": 1.0,
    "balance": False,
    "min_pair_count": 20,
    "rare_pair_constant": 1e-3,
    "ridge_solver": "closed_form",
    "unary": "auto",
    "max_iter": 500,
    # predict / infer
    "solver": "trws",
    "composition": "loopy",
    "max_iters": 100,
}

#: Settings that affect speed but never results.
_NOT_PROVENANCE = {"jobs"}


class CLIError(Exception):
    pass


def _settings(args: argparse.Namespace, keys) -> dict:
    """Resolve ``keys`` by precedence flag > config file > default."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CLIError(f"{args.config}: invalid JSON ({exc.msg})") from None
        if not isinstance(cfg, dict):
            raise CLIError(f"{args.config}: config must be a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        if "lambda" in cfg:
            cfg["lam"] = cfg.pop("lambda")
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise CLIError(f"{args.config}: unknown config keys {sorted(unknown)}")
    out = {}
    for k in keys:
        v = getattr(args, k, None)
        if v is None:
            v = cfg.get(k, DEFAULTS[k])
        out[k] = v
    return out


def _provenance(settings: dict) -> dict:
    return {k: v for k, v in settings.items() if k not in _NOT_PROVENANCE}


def _lam(s: dict) -> float:
    if s["lam"] is not None:
        return float(s["lam"])
    return 0.0 if s["method"].startswith("lscrf") else 1e-3


def _report_times(times: dict, args) -> None:
    for phase, sec in times.items():
        print(f"time[{phase}] {sec:.3f}s", file=sys.stderr)
    if getattr(args, "timing_csv", None):
        write_timings(args.timing_csv, times)


# -- commands -----------------------------------------------------------------

SYNTH_KEYS = ("seed", "jobs", "kind", "n", "m", "r", "d_edge", "generator", "noise",
              "height", "width", "coupling", "snr")


def cmd_synth(args) -> int:
    s = _settings(args, SYNTH_KEYS)
    t0 = time.perf_counter()
    if s["kind"] == "tree":
        corpus = synth_tree_corpus(s["n"], s["m"], s["r"], s["d_edge"], s["generator"],
                                   s["noise"], s["seed"], jobs=s["jobs"])
    elif s["kind"] == "grid":
        corpus = synth_grid_corpus(s["n"], s["height"], s["width"], s["r"], s["coupling"],
                                   s["snr"], s["seed"], jobs=s["jobs"])
    else:
        raise CLIError(f"unknown corpus kind {s['kind']!r}")
    t1 = time.perf_counter()
    corpus.meta["config"] = _provenance(s)
    write_corpus(corpus, args.output)
    _report_times({"synth": t1 - t0, "write": time.perf_counter() - t1}, args)
    return 0


TRAIN_KEYS = ("seed", "jobs", "method", "lam", "trees", "depth", "learning_rate",
              "pair_fraction", "unary_fraction", "balance", "min_pair_count",
              "rare_pair_constant", "ridge_solver", "unary", "max_iter")


def train_model(corpus, s: dict):
    """Fit the model named by ``s['method']`` on a corpus."""
    method = s["method"]
    if method not in METHODS:
        raise CLIError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if not len(corpus):
        raise CLIError("cannot train on an empty corpus")
    prov = _provenance(s)
    if method.startswith("lscrf"):
        sampling = SamplingConfig(s["unary_fraction"], s["pair_fraction"], bool(s["balance"]),
                                  s["seed"])
        return train_lscrf(
            corpus.instances, corpus.r,
            regressor_kind="linear" if method == "lscrf-linear" else "gbt",
            sampling=sampling, min_pair_count=s["min_pair_count"],
            rare_pair_constant=s["rare_pair_constant"], lam=_lam(s),
            solver=s["ridge_solver"],
            gbt=GBTParams(s["trees"], s["depth"], s["learning_rate"], s["seed"]),
            unary=s["unary"], label_names=corpus.label_names, jobs=s["jobs"], config=prov)
    trainer = TRAINERS[method.replace("-", "_")]
    model = trainer(corpus.instances, corpus.r, lam=_lam(s), max_iter=s["max_iter"])
    model.config.update(prov)
    return model


def cmd_train(args) -> int:
    s = _settings(args, TRAIN_KEYS)
    t0 = time.perf_counter()
    corpus = read_corpus(args.corpus)
    t1 = time.perf_counter()
    model = train_model(corpus, s)
    t2 = time.perf_counter()
    save_model(model, args.output)
    _report_times({"read": t1 - t0, "train": t2 - t1}, args)
    return 0


PREDICT_KEYS = ("jobs", "solver", "composition", "max_iters")


def model_energy(model, inst, composition: str):
    if isinstance(model, LogLinearCRF):
        return model.energy(inst)
    return predict_energy(model, inst, composition)


def predict_one(model, inst, solver: str, composition: str, max_iters: int) -> np.ndarray:
    energy = model_energy(model, inst, composition)
    init = None
    if solver == "icm" and isinstance(model, PairwiseModel) and inst.graph.m:
        init = np.argmax(node_scores(model, inst), axis=1)
    return map_labeling(energy, solver, init=init, max_iters=max_iters).labeling


def _predict_item(data, i: int) -> np.ndarray:
    model, instances, s = data
    return predict_one(model, instances[i], s["solver"], s["composition"], s["max_iters"])


def cmd_predict(args) -> int:
    s = _settings(args, PREDICT_KEYS)
    if s["solver"] not in SOLVERS:
        raise CLIError(f"unknown solver {s['solver']!r}; expected one of {', '.join(SOLVERS)}")
    model = load_model(args.model)
    corpus = read_corpus(args.corpus)
    t0 = time.perf_counter()
    labs = map_items(_predict_item, (model, corpus.instances, s), len(corpus), s["jobs"])
    t1 = time.perf_counter()
    write_labelings([i.id for i in corpus.instances], labs, args.output,
                    config={**_provenance(s), "model_config": model.config})
    _report_times({"predict": t1 - t0}, args)
    return 0


def cmd_eval(args) -> int:
    corpus = read_corpus(args.corpus)
    preds = read_labelings(args.labelings)
    missing = [i.id for i in corpus.instances if i.id not in preds]
    if missing:
        raise CLIError(f"no prediction for {len(missing)} instance(s), e.g. {missing[0]!r}")
    truths = []
    for inst in corpus.instances:
        if inst.labels is None:
            raise CLIError(f"instance {inst.id!r} has no ground truth")
        truths.append(inst.labels)
    report = evaluate([preds[i.id] for i in corpus.instances], truths, corpus.label_names)
    print(json.dumps(report.to_dict()) if args.json else report.to_table())
    return 0


def _read_energy(path: str):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("MARKOV"):
        return energy_from_uai(text)
    return energy_from_grid_text(text)


def cmd_export(args) -> int:
    """Write an energy in ``grid`` or ``uai`` form.

    The source is either a model plus ``--corpus``/``--instance`` (the
    predicted energy of that instance) or an existing energy file.
    """
    s = _settings(args, ("composition",))
    if args.corpus:
        model = load_model(args.source)
        corpus = read_corpus(args.corpus)
        by_id = {i.id: i for i in corpus.instances}
        key = args.instance if args.instance is not None else corpus.instances[0].id
        if key not in by_id:
            raise CLIError(f"no instance {key!r} in {args.corpus}")
        energy = model_energy(model, by_id[key], s["composition"])
    else:
        energy = _read_energy(args.source)
    text = energy_to_uai(energy) if args.format == "uai" else energy_to_grid_text(energy)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(text)
    return 0


def cmd_infer(args) -> int:
    s = _settings(args, ("solver", "max_iters"))
    if s["solver"] not in SOLVERS:
        raise CLIError(f"unknown solver {s['solver']!r}; expected one of {', '.join(SOLVERS)}")
    energy = _read_energy(args.energy)
    res = map_labeling(energy, s["solver"], max_iters=s["max_iters"])
    out = {"labeling": res.labeling.tolist(), "energy": energy_eval(energy, res.labeling),
           "lower_bound": res.lower_bound, "iterations": res.iterations}
    print(json.dumps(out))
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lscrf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=True):
        sp.add_argument("--config", help="JSON file of default settings")
        sp.add_argument("--seed", type=int)
        if jobs:
            sp.add_argument("--jobs", type=int, help="worker processes (does not change results)")
        sp.add_argument("--timing-csv", help="write phase,wall_time rows here")

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    common(sp)
    sp.add_argument("--kind", choices=("tree", "grid"))
    sp.add_argument("-n", "--n", type=int, help="number of instances")
    sp.add_argument("-m", "--m", type=int, help="nodes per tree")
    sp.add_argument("-r", "--r", type=int, help="number of labels")
    sp.add_argument("--d-edge", dest="d_edge", type=int,
                    help="edge feature dimension incl. constant")
    sp.add_argument("--generator", choices=("linear", "logistic", "xor"))
    sp.add_argument("--noise", type=float)
    sp.add_argument("--height", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--coupling", type=float)
    sp.add_argument("--snr", type=float)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model on a corpus")
    common(sp)
    sp.add_argument("corpus")
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--lambda", dest="lam", type=float, help="L2 regularisation")
    sp.add_argument("--trees", type=int)
    sp.add_argument("--depth", type=int)
    sp.add_argument("--learning-rate", dest="learning_rate", type=float)
    sp.add_argument("--pair-fraction", dest="pair_fraction", type=float)
    sp.add_argument("--unary-fraction", dest="unary_fraction", type=float)
    sp.add_argument("--balance", action="store_true", default=None)
    sp.add_argument("--min-pair-count", dest="min_pair_count", type=int)
    sp.add_argument("--rare-pair-constant", dest="rare_pair_constant", type=float)
    sp.add_argument("--ridge-solver", dest="ridge_solver", choices=("closed_form", "cg", "sgd"))
    sp.add_argument("--unary", choices=("auto", "always", "only", "never"))
    sp.add_argument("--max-iter", dest="max_iter", type=int,
                    help="optimizer iterations for log-linear baselines")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="MAP labelings for every instance of a corpus")
    common(sp)
    sp.add_argument("model")
    sp.add_argument("corpus")
    sp.add_argument("--solver", choices=SOLVERS)
    sp.add_argument("--composition", choices=("loopy", "tree", "auto"))
    sp.add_argument("--max-iters", dest="max_iters", type=int)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="score labelings against a corpus")
    sp.add_argument("labelings")
    sp.add_argument("corpus")
    sp.add_argument("--json", action="store_true", help="machine-readable output")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export", help="write an energy as grid text or UAI")
    sp.add_argument("source", help="model file (with --corpus) or energy file")
    sp.add_argument("--config")
    sp.add_argument("--corpus")
    sp.add_argument("--instance", help="instance id (default: first)")
    sp.add_argument("--composition", choices=("loopy", "tree", "auto"))
    sp.add_argument("--format", choices=("grid", "uai"), default="uai")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("infer", help="MAP inference on an energy file")
    sp.add_argument("energy")
    sp.add_argument("--config")
    sp.add_argument("--solver", choices=SOLVERS)
    sp.add_argument("--max-iters", dest="max_iters", type=int)
    sp.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (CLIError, CorpusFormatError, GraphError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"lscrf: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
