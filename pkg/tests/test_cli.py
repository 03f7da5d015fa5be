import json

import pytest

from lscrf.cli import main
from lscrf.data import read_corpus, read_labelings
from lscrf.regress import ConvergenceWarning


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def grid_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("grid")
    assert run("synth", "--kind", "grid", "-n", 30, "--height", 5, "--width", 5,
               "--seed", 1, "-o", d / "train.jsonl") == 0
    assert run("synth", "--kind", "grid", "-n", 10, "--height", 5, "--width", 5,
               "--seed", 2, "-o", d / "test.jsonl") == 0
    return d


def test_pipeline(grid_files, tmp_path, capsys):
    d = grid_files
    for method in ("lscrf-linear", "pl"):
        assert run("train", d / "train.jsonl", "--method", method, "-o",
                   tmp_path / f"{method}.json") == 0
        assert run("predict", tmp_path / f"{method}.json", d / "test.jsonl", "--solver", "icm",
                   "-o", tmp_path / f"{method}.pred") == 0
        capsys.readouterr()
        assert run("eval", tmp_path / f"{method}.pred", d / "test.jsonl", "--json") == 0
        report = json.loads(capsys.readouterr().out)
        assert report["per_pixel_accuracy"] > 0.6
    preds = read_labelings(tmp_path / "pl.pred")
    assert len(preds) == 10


def test_same_seed_same_model(grid_files, tmp_path):
    for name in ("a", "b"):
        assert run("train", grid_files / "train.jsonl", "--method", "lscrf-gbt", "--trees", 5,
                   "--depth", 2, "--pair-fraction", 0.5, "--seed", 3,
                   "-o", tmp_path / f"{name}.json") == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_jobs_do_not_change_outputs(tmp_path):
    for jobs in (1, 4):
        assert run("synth", "--kind", "tree", "-n", 1200, "-m", 5, "-r", 3, "--seed", 4,
                   "--jobs", jobs, "-o", tmp_path / f"c{jobs}.jsonl") == 0
        assert run("train", tmp_path / f"c{jobs}.jsonl", "--jobs", jobs,
                   "-o", tmp_path / f"m{jobs}.json") == 0
        assert run("predict", tmp_path / f"m{jobs}.json", tmp_path / f"c{jobs}.jsonl",
                   "--solver", "tree", "--jobs", jobs, "-o", tmp_path / f"p{jobs}.jsonl") == 0
    for stem, ext in (("c", "jsonl"), ("m", "json"), ("p", "jsonl")):
        assert (tmp_path / f"{stem}1.{ext}").read_bytes() == \
            (tmp_path / f"{stem}4.{ext}").read_bytes()


def test_empty_corpus_is_an_error(tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text("")
    assert run("train", tmp_path / "empty.jsonl", "-o", tmp_path / "m.json") != 0
    assert "empty" in capsys.readouterr().err
    assert not (tmp_path / "m.json").exists()


def test_unknown_method_exits_with_usage_error(grid_files, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("train", grid_files / "train.jsonl", "--method", "svm", "-o", tmp_path / "m.json")
    assert exc.value.code == 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 7, "height": 3, "width": 4, "seed": 9}))
    assert run("synth", "--config", cfg, "-o", tmp_path / "a.jsonl") == 0
    a = read_corpus(tmp_path / "a.jsonl")
    assert len(a) == 7 and a.instances[0].graph.m == 12
    assert a.meta["config"]["seed"] == 9
    assert run("synth", "--config", cfg, "-n", 2, "-o", tmp_path / "b.jsonl") == 0
    b = read_corpus(tmp_path / "b.jsonl")
    assert len(b) == 2 and b.meta["config"]["seed"] == 9


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"colour": "blue"}))
    assert run("synth", "--config", cfg, "-o", tmp_path / "a.jsonl") == 1
    assert "colour" in capsys.readouterr().err


def test_provenance_in_model(grid_files, tmp_path):
    with pytest.warns(ConvergenceWarning):
        assert run("train", grid_files / "train.jsonl", "--method", "pw", "--lambda", 0.01,
                   "--max-iter", 20, "-o", tmp_path / "m.json") == 0
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["format"] == "lscrf-model"
    assert "0.01" in json.dumps(doc)


def test_export_and_infer(grid_files, tmp_path, capsys):
    assert run("train", grid_files / "train.jsonl", "-o", tmp_path / "m.json") == 0
    for fmt in ("uai", "grid"):
        out = tmp_path / f"e.{fmt}"
        assert run("export", tmp_path / "m.json", "--corpus", grid_files / "test.jsonl",
                   "--format", fmt, "-o", out) == 0
        capsys.readouterr()
        assert run("infer", out, "--solver", "trws") == 0
        res = json.loads(capsys.readouterr().out)
        assert len(res["labeling"]) == 25
        assert res["lower_bound"] <= res["energy"] + 1e-9
    assert run("export", tmp_path / "e.uai", "--format", "grid", "-o", tmp_path / "x.txt") == 0
    assert run("export", tmp_path / "m.json", "--corpus", grid_files / "test.jsonl",
               "--instance", "nope", "-o", tmp_path / "y.uai") == 1


def test_timing_csv(tmp_path):
    assert run("synth", "-n", 2, "--height", 2, "--width", 2, "--timing-csv",
               tmp_path / "t.csv", "-o", tmp_path / "c.jsonl") == 0
    assert (tmp_path / "t.csv").read_text().startswith("phase,wall_time\nsynth,")


def test_eval_missing_prediction(grid_files, tmp_path, capsys):
    (tmp_path / "p.jsonl").write_text('{"format": "lscrf-labelings", "version": 1}\n')
    assert run("eval", tmp_path / "p.jsonl", grid_files / "test.jsonl") == 1
    assert "no prediction" in capsys.readouterr().err
