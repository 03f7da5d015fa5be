import json
import time

import numpy as np
import pytest

from lscrf.data import (
    Corpus, CorpusFormatError, cross_val_splits, evaluate, instance_to_record,
    make_pair_generator, read_corpus, read_labelings, synth_grid_corpus, synth_tree_corpus,
    write_corpus, write_labelings, write_timings,
)
from lscrf.graph import Graph, Instance


def small_corpus():
    a = Instance(Graph.chain(3), [[0.5], [1.0], [-2.0]], [[1.0, 0.25], [0.0, 1e-17]],
                 [0, 1, 1], "a")
    b = Instance(Graph(1, np.zeros((0, 2), dtype=np.int64)), [[3.0]], np.zeros((0, 2)),
                 [1], "b")
    return Corpus([a, b], ["sky", "grass"], 1, 2, ["x"], ["p", "q"], {"note": "tiny"})


# -- corpus files -----------------------------------------------------------------

def test_round_trip_is_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_corpus(small_corpus(), p1)
    c = read_corpus(p1)
    write_corpus(c, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert c.label_names == ["sky", "grass"]
    assert c.r == 2
    np.testing.assert_array_equal(c.instances[0].edge_features,
                                  small_corpus().instances[0].edge_features)


def test_synthetic_round_trip(tmp_path):
    c = synth_grid_corpus(5, 3, 3, seed=1)
    write_corpus(c, tmp_path / "g.jsonl")
    back = read_corpus(tmp_path / "g.jsonl")
    for a, b in zip(c.instances, back.instances):
        np.testing.assert_array_equal(a.node_features, b.node_features)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.graph == b.graph


def test_empty_file_rejected(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    with pytest.raises(CorpusFormatError, match="empty"):
        read_corpus(p)


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "bad.jsonl"
    write_corpus(small_corpus(), p)
    lines = p.read_text().splitlines()
    lines[2] = lines[2][:-5]
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusFormatError, match=r"bad\.jsonl:3:"):
        read_corpus(p)


def test_dimension_mismatch_reports_line_number(tmp_path):
    p = tmp_path / "dim.jsonl"
    write_corpus(small_corpus(), p)
    lines = p.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["node_features"] = [[1.0, 2.0]] * 3
    lines[1] = json.dumps(rec)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusFormatError, match=":2:"):
        read_corpus(p)


def test_wrong_header_rejected(tmp_path):
    p = tmp_path / "h.jsonl"
    p.write_text('{"format": "something-else"}\n')
    with pytest.raises(CorpusFormatError, match=":1:"):
        read_corpus(p)


def test_corpus_validation():
    c = small_corpus()
    with pytest.raises(CorpusFormatError, match="duplicate"):
        Corpus(c.instances + c.instances[:1], ["a", "b"], 1, 2)
    with pytest.raises(CorpusFormatError, match="label"):
        Corpus(c.instances, ["only"], 1, 2)
    with pytest.raises(CorpusFormatError, match="dim"):
        Corpus(c.instances, ["a", "b"], 2, 2)


def test_large_corpus_parses_quickly(tmp_path):
    rng = np.random.default_rng(0)
    g = Graph.chain(101)
    insts = [Instance(g, rng.normal(size=(101, 2)), rng.normal(size=(100, 3)),
                      rng.integers(0, 2, size=101), f"c{i}") for i in range(1000)]
    p = tmp_path / "big.jsonl"
    write_corpus(Corpus(insts, ["0", "1"], 2, 3), p)
    t0 = time.perf_counter()
    c = read_corpus(p)
    assert time.perf_counter() - t0 < 5.0
    assert sum(i.graph.n_edges for i in c.instances) == 100_000


def test_record_keeps_edge_order():
    g = Graph.from_edges(3, [(2, 1), (0, 1)])
    rec = instance_to_record(Instance(g, np.ones((3, 1)), [[1.0], [2.0]], None, "x"))
    assert rec["edges"] == [[1, 2], [0, 1]]
    assert rec["edge_features"] == [[1.0], [2.0]]


def test_labelings_round_trip(tmp_path):
    p = tmp_path / "y.jsonl"
    write_labelings(["a", "b"], [np.array([0, 1]), np.array([2])], p, {"solver": "trws"})
    got = read_labelings(p)
    assert list(got) == ["a", "b"]
    assert got["b"].tolist() == [2]
    with pytest.raises(ValueError):
        write_labelings(["a"], [], p)


# -- tree generator ----------------------------------------------------------------

def test_xor_noise_free_reproduces_argmax_pair():
    c = synth_tree_corpus(300, 2, 2, 4, generator="xor", noise=0.0, seed=3)
    for inst in c.instances:
        phi = inst.edge_features[0]
        j = int(phi[2] > 0)
        k = j if phi[0] * phi[1] > 0 else 1 - j
        s, t = inst.graph.edges[0]
        assert (inst.labels[s], inst.labels[t]) == (j, k)


def test_generator_rows_are_distributions():
    rng = np.random.default_rng(4)
    phi = np.hstack([rng.uniform(-1, 1, size=(200, 4)), np.ones((200, 1))])
    for kind in ("linear", "logistic", "xor"):
        f = make_pair_generator(3, 5, kind, noise=0.2, seed=1)(phi)
        assert f.shape == (200, 3, 3)
        assert np.all(f > 0)
        np.testing.assert_allclose(f.sum(axis=(1, 2)), 1.0, atol=1e-12)


def test_single_edge_label_frequencies_match_generator():
    n, r = 10_000, 2
    c = synth_tree_corpus(n, 2, r, 3, generator="logistic", noise=0.1, seed=5)
    gen = make_pair_generator(r, 3, "logistic", 0.1, seed=5)
    expected = np.zeros((r, r))
    observed = np.zeros((r, r))
    for inst in c.instances:
        expected += gen(inst.edge_features)[0]
        s, t = inst.graph.edges[0]
        observed[inst.labels[s], inst.labels[t]] += 1
    p = expected / n
    sigma = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(observed / n - p) < 4 * sigma)


def test_generator_argument_checks():
    with pytest.raises(ValueError):
        make_pair_generator(2, 3, "xor")
    with pytest.raises(ValueError):
        make_pair_generator(2, 3, "spline")
    with pytest.raises(ValueError):
        make_pair_generator(2, 3, "linear", noise=1.5)


def test_tree_corpus_shapes_and_determinism():
    a = synth_tree_corpus(20, 6, 3, 4, seed=7)
    b = synth_tree_corpus(20, 6, 3, 4, seed=7)
    c = synth_tree_corpus(20, 6, 3, 4, seed=8)
    assert len(a) == 20 and a.r == 3 and a.edge_dim == 4
    for x, y in zip(a.instances, b.instances):
        np.testing.assert_array_equal(x.labels, y.labels)
        np.testing.assert_array_equal(x.edge_features, y.edge_features)
    assert any(not np.array_equal(x.edge_features, z.edge_features)
               for x, z in zip(a.instances, c.instances))
    for inst in a.instances:
        assert inst.graph.n_edges == 5
        np.testing.assert_array_equal(inst.edge_features[:, -1], 1.0)


def test_tree_corpus_independent_of_jobs():
    a = synth_tree_corpus(1500, 4, 2, 3, seed=9, jobs=1)
    b = synth_tree_corpus(1500, 4, 2, 3, seed=9, jobs=2)
    assert [instance_to_record(i) for i in a.instances] == \
        [instance_to_record(i) for i in b.instances]


# -- grid generator ----------------------------------------------------------------

def neighbour_agreement(c):
    agree = total = 0
    for inst in c.instances:
        s, t = inst.graph.edges[:, 0], inst.graph.edges[:, 1]
        agree += int(np.sum(inst.labels[s] == inst.labels[t]))
        total += inst.graph.n_edges
    return agree / total


def test_grid_coupling_controls_agreement():
    free = synth_grid_corpus(40, 8, 8, coupling=0.0, seed=10)
    strong = synth_grid_corpus(40, 8, 8, coupling=2.0, seed=10)
    assert abs(neighbour_agreement(free) - 0.5) < 0.05
    assert neighbour_agreement(strong) > 0.9


def test_grid_features():
    c = synth_grid_corpus(3, 4, 5, r=3, seed=11)
    assert c.node_dim == 4 and c.edge_dim == 7
    inst = c.instances[0]
    s, t = inst.graph.edges[:, 0], inst.graph.edges[:, 1]
    np.testing.assert_array_equal(inst.edge_features[:, :3], inst.node_features[s, :3])
    np.testing.assert_array_equal(inst.edge_features[:, 3:6], inst.node_features[t, :3])
    a = synth_grid_corpus(3, 4, 5, r=3, seed=11)
    np.testing.assert_array_equal(a.instances[2].labels, c.instances[2].labels)


# -- evaluation ----------------------------------------------------------------------

def test_perfect_predictions():
    truth = [np.array([0, 1, 1]), np.array([1, 0])]
    rep = evaluate(truth, truth, 2)
    assert rep.per_pixel_accuracy == 1.0 and rep.per_class_accuracy == 1.0


def test_single_class_predictor():
    truth = [np.array([0, 0, 1, 1])]
    rep = evaluate([np.zeros(4, dtype=int)], truth, 2)
    assert rep.per_pixel_accuracy == 0.5
    assert rep.per_class_accuracy == 0.5


def test_three_class_example():
    truth = [np.array([0, 0, 0, 0, 1, 1, 2, 2, 2, 2])]
    pred = [np.array([0, 0, 0, 1, 1, 2, 2, 2, 0, 0])]
    rep = evaluate(pred, truth, ["a", "b", "c"])
    assert rep.per_pixel_accuracy == pytest.approx(0.6)
    assert rep.per_class_accuracy == pytest.approx((0.75 + 0.5 + 0.5) / 3)
    assert rep.confusion.tolist() == [[3, 1, 0], [0, 1, 1], [2, 0, 2]]
    assert "per-pixel accuracy" in rep.to_table()
    json.dumps(rep.to_dict())


def test_absent_class_excluded_from_mean():
    rep = evaluate([np.array([0, 1])], [np.array([0, 0])], 3)
    assert rep.per_class_accuracy == 0.5
    assert np.isnan(rep.class_recall[2])


def test_evaluate_errors():
    with pytest.raises(ValueError):
        evaluate([np.array([0])], [], 2)
    with pytest.raises(ValueError):
        evaluate([np.array([0, 1])], [np.array([0])], 2)
    with pytest.raises(ValueError):
        evaluate([np.array([3])], [np.array([0])], 2)


# -- splits and timings ----------------------------------------------------------------

def test_leave_one_out():
    splits = cross_val_splits(5, 5, seed=0)
    assert sorted(int(te[0]) for _, te in splits) == list(range(5))
    assert all(len(tr) == 4 for tr, _ in splits)


def test_folds_partition_indices():
    splits = cross_val_splits(23, 4, seed=1)
    tests = np.concatenate([te for _, te in splits])
    assert sorted(tests.tolist()) == list(range(23))
    sizes = [len(te) for _, te in splits]
    assert max(sizes) - min(sizes) <= 1
    for tr, te in splits:
        assert not set(tr) & set(te)
        assert len(tr) + len(te) == 23


def test_split_errors():
    with pytest.raises(ValueError):
        cross_val_splits(3, 4)
    with pytest.raises(ValueError):
        cross_val_splits(3, 1)


def test_write_timings(tmp_path):
    p = tmp_path / "t.csv"
    write_timings(p, {"train": 1.5, "predict": 0.25})
    assert p.read_text().splitlines() == ["phase,wall_time", "train,1.500000",
                                          "predict,0.250000"]
