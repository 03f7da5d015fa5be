import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lscrf.data import synth_tree_corpus
from lscrf.graph import Graph, Instance
from lscrf.regress import LinearModel, TreeEnsemble, predict
from lscrf.train import (
    GBTParams, PairwiseModel, SamplingConfig, assemble_pair_datasets, balanced_node_sample,
    balanced_sample, pairwise_model_from_dict, pairwise_model_to_dict, train_lscrf,
    unary_from_pairwise,
)


def edge_instance(labels, phi, iid="a"):
    g = Graph.from_edges(2, [(0, 1)])
    return Instance(g, np.ones((2, 1)), np.atleast_2d(phi), labels, iid)


def random_instances(rng, n, r, m=6, d=3):
    out = []
    for i in range(n):
        parents = [int(rng.integers(0, k)) for k in range(1, m)]
        g = Graph.from_edges(m, list(zip(parents, range(1, m))))
        out.append(Instance(g, rng.normal(size=(m, 2)),
                            np.hstack([rng.normal(size=(m - 1, d - 1)), np.ones((m - 1, 1))]),
                            rng.integers(0, r, size=m), f"i{i}"))
    return out


def model_json(model):
    return json.dumps(pairwise_model_to_dict(model), sort_keys=True)


# -- dataset assembly -----------------------------------------------------------------

def test_single_edge_indicator_targets():
    ds = assemble_pair_datasets([edge_instance([0, 1], [0.3, 1.0])], 2)
    assert ds.dataset(0, 1).targets.tolist() == [1.0]
    for j, k in [(0, 0), (1, 0), (1, 1)]:
        assert ds.dataset(j, k).targets.tolist() == [0.0]


def test_positive_targets_partition_edges():
    rng = np.random.default_rng(0)
    insts = random_instances(rng, 20, 3)
    ds = assemble_pair_datasets(insts, 3)
    total = sum(ds.dataset(j, k).targets.sum() for j in range(3) for k in range(3))
    assert total == sum(i.graph.n_edges for i in insts)
    stacked = np.stack([ds.dataset(j, k).targets for j in range(3) for k in range(3)], axis=1)
    assert np.all(stacked.sum(axis=1) == 1)


def test_assembly_rejects_missing_labels_and_dim_mismatch():
    a = edge_instance([0, 1], [0.3, 1.0])
    with pytest.raises(ValueError):
        assemble_pair_datasets([a, edge_instance(None, [0.1, 1.0], "b")], 2)
    with pytest.raises(ValueError):
        assemble_pair_datasets([a, edge_instance([0, 0], [0.1, 0.2, 1.0], "b")], 2)


def test_symmetric_augmentation_swaps_blocks():
    g = Graph.from_edges(2, [(0, 1)])
    inst = Instance(g, np.ones((2, 1)), np.array([[1.0, 2.0, 1.0]]), [0, 1], "a")
    ds = assemble_pair_datasets([inst], 2, augment_symmetric=True)
    assert ds.features.tolist() == [[1.0, 2.0, 1.0], [2.0, 1.0, 1.0]]
    assert ds.pair_index.tolist() == [1, 2]


# -- sampling --------------------------------------------------------------------------

def test_balanced_sample_fraction_one_is_identity():
    pairs = np.random.default_rng(1).integers(0, 3, size=(50, 2))
    np.testing.assert_array_equal(balanced_sample(pairs, SamplingConfig()), np.arange(50))


def test_balanced_sample_keeps_same_different_ratio():
    pairs = np.array([[0, 0]] * 450 + [[1, 1]] * 450 + [[0, 1]] * 60 + [[1, 0]] * 40)
    idx = balanced_sample(pairs, SamplingConfig(pair_fraction=0.1, balance=True, seed=3))
    sub = pairs[idx]
    same = int((sub[:, 0] == sub[:, 1]).sum())
    assert abs(same - 90) <= 1 and abs(len(sub) - same - 10) <= 1
    # within the same-label group each label equally likely
    assert abs(int((sub == [0, 0]).all(axis=1).sum()) - int((sub == [1, 1]).all(axis=1).sum())) <= 1


def test_balanced_sample_ratio_on_skewed_corpus():
    rng = np.random.default_rng(2)
    pairs = np.where(rng.random((5000, 1)) < 0.8, np.array([[0, 0]]), rng.integers(0, 3, (5000, 2)))
    ratio = np.mean(pairs[:, 0] == pairs[:, 1])
    idx = balanced_sample(pairs, SamplingConfig(pair_fraction=0.3, balance=True, seed=0))
    assert abs(np.mean(pairs[idx, 0] == pairs[idx, 1]) - ratio) < 0.01


def test_balanced_sample_deterministic():
    pairs = np.random.default_rng(4).integers(0, 3, size=(300, 2))
    cfg = SamplingConfig(pair_fraction=0.4, balance=True, seed=9)
    np.testing.assert_array_equal(balanced_sample(pairs, cfg), balanced_sample(pairs, cfg))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.booleans())
def test_sample_size_and_uniqueness(seed, frac, balance):
    pairs = np.random.default_rng(seed).integers(0, 3, size=(200, 2))
    idx = balanced_sample(pairs, SamplingConfig(pair_fraction=frac, balance=balance, seed=seed))
    assert len(np.unique(idx)) == len(idx)
    assert abs(len(idx) - round(frac * 200)) <= 1


def test_balanced_node_sample_spreads_classes():
    labels = np.array([0] * 90 + [1] * 10)
    idx = balanced_node_sample(labels, 0.2, True, 0)
    assert np.bincount(labels[idx]).tolist() == [10, 10]


def test_sampling_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(pair_fraction=0.0)


# -- training ----------------------------------------------------------------------------

def test_rare_pair_gets_constant():
    rng = np.random.default_rng(5)
    insts = random_instances(rng, 60, 3)
    # relabel so that label 2 never follows label 1 on an edge
    clean = []
    for inst in insts:
        y = inst.labels.copy()
        y[y == 2] = 0
        clean.append(Instance(inst.graph, inst.node_features, inst.edge_features, y, inst.id))
    model = train_lscrf(clean, 3)
    assert model.pair_regressors[1 * 3 + 2] == 1e-3
    assert isinstance(model.pair_regressors[0], LinearModel)
    np.testing.assert_allclose(model.pair_probs(rng.normal(size=(4, 3)))[:, 1, 2], 1e-3)


def test_single_node_graphs_train_unaries_only():
    rng = np.random.default_rng(6)
    g = Graph(1, np.zeros((0, 2), dtype=np.int64))
    insts = [Instance(g, rng.normal(size=(1, 2)), np.zeros((0, 0)), [int(rng.integers(0, 2))],
                      f"n{i}") for i in range(100)]
    model = train_lscrf(insts, 2)
    assert model.unary_regressors is not None
    assert all(isinstance(e, float) for e in model.pair_regressors)


def test_all_constant_model_warns():
    insts = [edge_instance([0, 1], [0.3, 1.0], f"x{i}") for i in range(5)]
    with pytest.warns(UserWarning):
        model = train_lscrf(insts, 2)
    assert model.all_constant


def test_empty_corpus_is_error():
    with pytest.raises(ValueError):
        train_lscrf([], 2)


def test_unary_only_model():
    rng = np.random.default_rng(7)
    model = train_lscrf(random_instances(rng, 30, 2), 2, unary="only")
    assert model.unary_only
    assert model.unary_probs(rng.normal(size=(3, 2))).shape == (3, 2)


def test_linear_recovers_linear_truth():
    """Regressed f_jk correlates with the generating f* (R^2 >= 0.9)."""
    corpus = synth_tree_corpus(20_000, 6, 2, 4, "linear", 0.0, seed=1)
    model = train_lscrf(corpus.instances, 2, min_pair_count=1)
    from lscrf.data import make_pair_generator
    gen = make_pair_generator(2, 4, "linear", 0.0, seed=1)
    phi = np.hstack([np.random.default_rng(2).uniform(-1, 1, (2000, 3)), np.ones((2000, 1))])
    truth = gen(phi).reshape(-1, 4)
    pred = model.pair_probs(phi).reshape(-1, 4)
    # The corpus edges are sampled jointly on trees, so the regressed targets are
    # the model's pair marginals rather than f* itself; correlation is the check.
    for c in range(4):
        r2 = np.corrcoef(truth[:, c], pred[:, c])[0, 1] ** 2
        assert r2 >= 0.9


def test_solvers_agree():
    rng = np.random.default_rng(8)
    insts = random_instances(rng, 80, 2)
    a = train_lscrf(insts, 2, lam=0.1)
    b = train_lscrf(insts, 2, lam=0.1, solver="cg")
    X = rng.normal(size=(10, 3))
    np.testing.assert_allclose(a.pair_probs(X), b.pair_probs(X), atol=1e-6)


def test_gbt_model_kind():
    rng = np.random.default_rng(9)
    insts = random_instances(rng, 40, 2)
    m = train_lscrf(insts, 2, regressor_kind="gbt", gbt=GBTParams(n_trees=5, depth=2))
    assert any(isinstance(e, TreeEnsemble) for e in m.pair_regressors)


def test_training_is_jobs_invariant():
    rng = np.random.default_rng(10)
    insts = random_instances(rng, 5000, 3, m=4)
    cfg = SamplingConfig(pair_fraction=0.5, balance=True, seed=1)
    a = train_lscrf(insts, 3, sampling=cfg, jobs=1)
    b = train_lscrf(insts, 3, sampling=cfg, jobs=3)
    assert model_json(a) == model_json(b)
    g1 = train_lscrf(insts[:300], 3, regressor_kind="gbt", gbt=GBTParams(4, 2), jobs=1)
    g2 = train_lscrf(insts[:300], 3, regressor_kind="gbt", gbt=GBTParams(4, 2), jobs=2)
    assert model_json(g1) == model_json(g2)


def test_pair_order_independence():
    """Each pair regressor depends only on its own indicator targets."""
    rng = np.random.default_rng(11)
    insts = random_instances(rng, 60, 2)
    model = train_lscrf(insts, 2, lam=0.1)
    ds = assemble_pair_datasets(insts, 2)
    from lscrf.regress import ridge_fit
    for j in range(2):
        for k in range(2):
            w = ridge_fit(ds.dataset(j, k), 0.1).w
            np.testing.assert_allclose(model.pair_regressors[j * 2 + k].w, w, atol=1e-10)


def test_weights_equal_replication():
    rng = np.random.default_rng(12)
    insts = random_instances(rng, 30, 2)
    w = rng.integers(1, 3, size=30).astype(float)
    a = train_lscrf(insts, 2, instance_weights=w, lam=0.1)
    rep = [inst for inst, k in zip(insts, w.astype(int)) for _ in range(k)]
    b = train_lscrf(rep, 2, lam=0.1)
    X = rng.normal(size=(5, 3))
    np.testing.assert_allclose(a.pair_probs(X), b.pair_probs(X), atol=1e-10)


# -- unary_from_pairwise ----------------------------------------------------------------

def constant_model(values, r=2):
    return PairwiseModel(r, tuple(float(v) for v in values), None, 1, 1)


def test_unary_from_constant_uniform():
    m = constant_model([0.25] * 4)
    np.testing.assert_allclose(unary_from_pairwise(m, [[1.0]]), 0.5)


def test_unary_from_pairwise_hand_values():
    m = constant_model([0.5, 0.3, 0.1, 0.1])
    np.testing.assert_allclose(unary_from_pairwise(m, [[1.0]], "s")[0], [0.8, 0.2])
    np.testing.assert_allclose(unary_from_pairwise(m, [[1.0]], "t")[0], [0.6, 0.4])


def test_unary_from_pairwise_mass_identity():
    rng = np.random.default_rng(13)
    m = train_lscrf(random_instances(rng, 40, 3), 3)
    X = rng.normal(size=(7, 3))
    u = unary_from_pairwise(m, X)
    np.testing.assert_allclose(u.sum(axis=1), m.pair_probs(X).sum(axis=(1, 2)))
    assert np.all(u > 0)


# -- serialisation ----------------------------------------------------------------------

def test_model_round_trip():
    rng = np.random.default_rng(14)
    insts = random_instances(rng, 40, 2)
    for kind in ("linear", "gbt"):
        m = train_lscrf(insts, 2, regressor_kind=kind, gbt=GBTParams(3, 2), unary="always",
                        label_names=["a", "b"], config={"seed": 3})
        back = pairwise_model_from_dict(json.loads(model_json(m)))
        X = rng.normal(size=(6, 3))
        np.testing.assert_array_equal(back.pair_probs(X), m.pair_probs(X))
        assert back.label_names == ("a", "b")
        assert back.config == {"seed": 3}
        assert model_json(back) == model_json(m)
