import csv
import json
import math

import pytest

from pgtensor.cli import main
from pgtensor.tensor import load_tensor

SMALL = {
    "synthetic": {
        "shape": [40, 30, 6],
        "blocks": [{"members": [{"start": 0, "stop": 8}, {"start": 0, "stop": 8}, [2, 3]], "density": 0.6},
                   {"members": [{"start": 8, "stop": 16}, {"start": 10, "stop": 20}, [0, 1, 2, 3, 4, 5]],
                    "density": 0.1, "abusive": False}],
        "background_density": 0.01,
        "label_mode": 0,
        "label_fraction": 0.5,
        "time_mode": 2,
        "seed": 1,
    },
    "model": {"rank": 3},
    "training": {"batch_size": 64, "epochs": 2},
}


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["generate", "--config", str(cfg), "--out-dir", str(tmp_path / "data")]) == 0
    return tmp_path


def train_args(w, out, *extra):
    return ["train", "--tensor", str(w / "data/tensor.txt"), "--labels", str(w / "data/labels.txt"),
            "--config", str(w / "cfg.json"), "--out-dir", str(w / out), *extra]


def test_generate_outputs(workdir):
    names = {p.name for p in (workdir / "data").iterdir()}
    assert {"tensor.txt", "labels.txt", "test_labels.txt", "ground_truth.json", "manifest.json"} <= names
    man = json.loads((workdir / "data/manifest.json").read_text())
    assert man["command"] == "generate" and man["seed"] == 1
    assert len(man["inputs"]["config"]["sha256"]) == 64


def test_generate_preset(tmp_path):
    assert main(["generate", "--preset", "desk", "--seed", "2", "--out-dir", str(tmp_path)]) == 0
    header = (tmp_path / "tensor.txt").read_text().split("\n", 1)[0]
    assert header.split() == ["200", "300", "150", "5", "20"]


def test_train_eval(workdir, capsys):
    assert main(train_args(workdir, "run")) == 0
    curves = list(csv.DictReader(open(workdir / "run/curves.csv")))
    ck = json.loads((workdir / "run/checkpoint.json").read_text())
    assert ck["R"] == 3 and ck["config"]["batch_size"] == 64
    nnz = load_tensor(workdir / "data/tensor.txt").nnz
    assert len(curves) == 2 * math.ceil(1.5 * nnz / 64)
    man = json.loads((workdir / "run/manifest.json").read_text())
    assert set(man["inputs"]) == {"tensor", "labels", "config"}

    for flag in ("--supervised", "--unsupervised"):
        rc = main(["eval", "--checkpoint", str(workdir / "run/checkpoint.json"),
                   "--labels", str(workdir / "data/test_labels.txt"), "--mode", "0", "--n", "10", flag,
                   "--out-dir", str(workdir / "ev")])
        assert rc == 0
        m = json.loads((workdir / "ev/metrics.json").read_text())
        assert 0.0 <= m["auc"] <= 1.0
        assert m["scoring"] == flag[2:]
    assert '"auc"' in capsys.readouterr().out


def test_curves_one_row_per_iteration(workdir):
    assert main(train_args(workdir, "run", "--iterations", "7", "--backend", "em")) == 0
    rows = list(csv.DictReader(open(workdir / "run/curves.csv")))
    assert [int(r["iteration"]) for r in rows] == list(range(1, 8))


def test_train_deterministic(workdir):
    assert main(train_args(workdir, "a", "--iterations", "20", "--seed", "9")) == 0
    assert main(train_args(workdir, "b", "--iterations", "20", "--seed", "9")) == 0
    assert (workdir / "a/checkpoint.json").read_bytes() == (workdir / "b/checkpoint.json").read_bytes()
    assert main(train_args(workdir, "c", "--iterations", "20", "--seed", "10")) == 0
    assert (workdir / "a/checkpoint.json").read_bytes() != (workdir / "c/checkpoint.json").read_bytes()


def test_compare(workdir):
    assert main(["compare", "--config", str(workdir / "cfg.json"), "--out-dir", str(workdir / "cmp")]) == 0
    rows = list(csv.DictReader(open(workdir / "cmp/comparison.csv")))
    assert list(rows[0]) == ["backend", "epoch", "train_auc", "test_auc", "shrink_fraction", "status"]
    assert [(r["backend"], r["epoch"]) for r in rows] == [(b, str(e)) for b in ("natural", "sgd", "em")
                                                          for e in (1, 2)]
    assert all(r["status"] == "ok" for r in rows)


class TestExitCodes:
    def test_malformed_config(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["generate", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2

    def test_invalid_field(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(SMALL))
        cfg["synthetic"]["blocks"][0]["members"][2] = [1, 3]
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        assert main(["generate", "--config", str(p), "--out-dir", str(tmp_path)]) == 2
        assert "contiguous" in capsys.readouterr().err

    def test_bad_training_field(self, workdir):
        cfg = dict(SMALL, training={"theta": 0.4})
        (workdir / "cfg.json").write_text(json.dumps(cfg))
        assert main(train_args(workdir, "run")) == 2

    def test_out_of_range_tensor(self, tmp_path, capsys):
        t = tmp_path / "t.txt"
        t.write_text("3 3\n0 0\n3 1\n")
        assert main(["train", "--tensor", str(t), "--out-dir", str(tmp_path)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_numerical_failure(self, workdir, capsys):
        cfg = dict(SMALL, model={"rank": 3, "init_scale": 1e160})
        (workdir / "cfg.json").write_text(json.dumps(cfg))
        assert main(train_args(workdir, "run")) == 3
        assert "iteration 1" in capsys.readouterr().err

    def test_eval_without_head(self, workdir):
        t = ["train", "--tensor", str(workdir / "data/tensor.txt"), "--config", str(workdir / "cfg.json"),
             "--iterations", "3", "--out-dir", str(workdir / "nolab")]
        assert main(t) == 0
        rc = main(["eval", "--checkpoint", str(workdir / "nolab/checkpoint.json"), "--labels",
                   str(workdir / "data/test_labels.txt"), "--mode", "0", "--n", "5", "--supervised"])
        assert rc == 4

    def test_eval_one_class(self, workdir):
        main(train_args(workdir, "run", "--iterations", "3"))
        lab = workdir / "pos.txt"
        lab.write_text("0 0 1\n0 1 1\n")
        rc = main(["eval", "--checkpoint", str(workdir / "run/checkpoint.json"), "--labels", str(lab),
                   "--mode", "0", "--n", "5", "--out-dir", str(workdir / "ev")])
        assert rc == 4
