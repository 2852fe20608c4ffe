import csv

import numpy as np
import pytest

from mno.cli import main
from mno.io import read_keyvalue, read_pointset
from mno.training import SPHERE_FLOW_FIELDS, evaluate, load_model, rl2

def metric_cols(path):
    return [r[:3] for r in csv.reader(open(path))]


SMALL = ["--dim", "8", "--modes", "4", "--heads", "2", "--k", "4", "--blocks", "1"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--generator", "sphere-flow", "--n", "64", "--count", "6",
                 "--seed", "0", "--out", str(root / "data")]) == 0
    assert main(["gen-data", "--n", "64", "--count", "2", "--seed", "100",
                 "--out", str(root / "test")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus):
    out = corpus / "run"
    code = main(["train", "--data", str(corpus / "data"), "--test", str(corpus / "test"),
                 "--out", str(out), "--epochs", "2", "--fields", "sphere-flow", *SMALL])
    assert code == 0
    return out


def test_gen_data_outputs(corpus, capsys):
    files = sorted((corpus / "data").glob("*.mno"))
    assert len(files) == 6
    rows = list(csv.reader(open(corpus / "data" / "manifest.csv")))
    assert rows[0] == ["filename", "n_points", "generator", "seed"]
    assert rows[1] == ["sample_00000.mno", "72", "sphere-flow", "0"]
    assert "sha256.sample_00000.mno" in read_keyvalue(corpus / "data" / "run.manifest")


def test_train_outputs(trained, capsys):
    for name in ("final.ckpt", "best.ckpt", "history.csv", "metrics.csv", "run.manifest"):
        assert (trained / name).exists()
    manifest = read_keyvalue(trained / "run.manifest")
    assert manifest["seed"] == "0" and manifest["dim"] == "8" and manifest["weight_decay"] == "0.0001"
    assert "sha256.final.ckpt" in manifest and "data_hash" in manifest


def test_manifest_reproduces_metrics(trained, tmp_path):
    assert main(["train", "--config", str(trained / "run.manifest"), "--out", str(tmp_path / "again")]) == 0
    assert metric_cols(tmp_path / "again" / "metrics.csv") == metric_cols(trained / "metrics.csv")
    assert (tmp_path / "again" / "final.ckpt").read_bytes() == (trained / "final.ckpt").read_bytes()


def test_flags_override_config(trained, tmp_path):
    assert main(["train", "--config", str(trained / "run.manifest"), "--epochs", "1",
                 "--out", str(tmp_path / "o")]) == 0
    assert read_keyvalue(tmp_path / "o" / "run.manifest")["epochs"] == "1"


def test_eval(corpus, trained, tmp_path, capsys):
    out = tmp_path / "ev"
    assert main(["eval", "--data", str(corpus / "test"), "--checkpoint", str(trained / "final.ckpt"),
                 "--out", str(out)]) == 0
    assert "velocity rl2=" in capsys.readouterr().out
    assert metric_cols(out / "metrics.csv") == metric_cols(trained / "metrics.csv")


def test_dump_fields_round_trip(corpus, trained, tmp_path):
    sample_path = corpus / "test" / "sample_00000.mno"
    out = tmp_path / "dump"
    assert main(["dump-fields", "--checkpoint", str(trained / "final.ckpt"), "--sample", str(sample_path),
                 "--out", str(out)]) == 0
    with open(out / "fields.csv") as fh:
        header = next(csv.reader(fh))
        table = np.loadtxt(fh, delimiter=",")
    sample = read_pointset(sample_path)
    assert header[:4] == ["x", "y", "z", "truth_0"] and header[-1] == "abs_err_3"
    assert table.shape == (sample.n_points, 3 + 3 * 4)
    truth, pred, err = table[:, 3:7], table[:, 7:11], table[:, 11:15]
    np.testing.assert_allclose(err, np.abs(pred - truth), atol=1e-12)
    model, _ = load_model(trained / "final.ckpt")
    rep = evaluate(model, [sample], SPHERE_FLOW_FIELDS)
    surf = sample.features[:, 0] == 0
    assert abs(rl2(pred[:, :3], truth[:, :3]) - rep.rl2("velocity")) < 1e-5
    assert abs(rl2(pred[surf, 3:], truth[surf, 3:]) - rep.rl2("pressure")) < 1e-5


def test_dump_fields_perfect_prediction_zero_error(tmp_path):
    from mno.cli import dump_fields
    from mno.geometry import NormStats, PointSample
    from mno.model import MnoConfig, init_model

    model = init_model(MnoConfig(in_features=0, out_features=1, blocks=1, dim=4, modes=2, heads=2, k=2))
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(10, 3)).astype(np.float32)
    from mno.training import predict

    s = PointSample(pos, np.zeros((10, 0), np.float32), np.ones((10, 1), np.float32))
    s = PointSample(pos, s.features, predict(model, s))
    dump_fields(model, s, tmp_path / "f.csv")
    table = np.loadtxt(tmp_path / "f.csv", delimiter=",", skiprows=1)
    assert table.shape[0] == 10
    np.testing.assert_array_equal(table[:, -1], 0.0)


def test_dump_fields_channel_mismatch(trained, tmp_path):
    from mno.datagen import GenSpec, gen_gaussian_field
    from mno.io import write_pointset

    write_pointset(gen_gaussian_field(GenSpec("gaussian-field", n=16)), tmp_path / "g.mno")
    assert main(["dump-fields", "--checkpoint", str(trained / "final.ckpt"),
                 "--sample", str(tmp_path / "g.mno"), "--out", str(tmp_path / "d")]) == 2
    assert not (tmp_path / "d").exists()


def test_ablate(corpus, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--masks", "G,L,M,LM,GM,GL,GLM", "--data", str(corpus / "data"),
                 "--test", str(corpus / "test"), "--out", str(out), "--epochs", "1",
                 "--fields", "sphere-flow", *SMALL]) == 0
    rows = list(csv.reader(open(out / "ablation.csv")))
    assert [r[0] for r in rows[1:]] == ["Global", "Local", "Micro", "Local+Micro", "Global+Micro",
                                        "Global+Local", "Global+Local+Micro"]
    assert len(list((out / "runs").iterdir())) == 7


def test_gradcheck(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path / "gc")]) == 0
    line = capsys.readouterr().out
    assert line.startswith("gradcheck: max relative error")
    rows = list(csv.reader(open(tmp_path / "gc" / "gradcheck.csv")))
    assert rows[0] == ["parameter", "max_rel_error"]
    assert max(float(r[1]) for r in rows[1:]) < 1e-4


def test_bench(tmp_path):
    assert main(["bench", "--module", "micro", "--n", "200,400", "--repeats", "1",
                 "--out", str(tmp_path / "b")]) == 0
    rows = list(csv.reader(open(tmp_path / "b" / "bench.csv")))
    assert rows[0] == ["module", "N", "M", "wall_ms", "ratio"]
    assert [r[1] for r in rows[1:]] == ["200", "400"]
    assert rows[1][4] == "" and float(rows[2][4]) > 0


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate", "--out", "x"],
    ["train", "--out", "{out}", "--bogus-flag", "1"],
    ["train", "--out", "{out}"],  # no --data
    ["train", "--out", "{out}", "--data", "{data}", "--dim", "7", "--heads", "2"],
    ["train", "--out", "{out}", "--data", "{data}", "--fields", "velocity:0-9"],
    ["train", "--out", "{out}", "--data", "{data}", "--mask", "XYZ"],
    ["gen-data", "--out", "{out}", "--n", "4"],
    ["gen-data", "--out", "{out}", "--generator", "nope"],
    ["bench", "--out", "{out}", "--n", "1,x"],
])
def test_argument_errors_exit_2_without_output(argv, corpus, tmp_path, capsys):
    out = tmp_path / "never"
    argv = [a.format(out=out, data=corpus / "data") for a in argv]
    assert main(argv) == 2
    assert not out.exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".never")]


def test_config_unknown_key(corpus, tmp_path):
    (tmp_path / "c.cfg").write_text("epochs=1\nwibble=3\n")
    assert main(["train", "--config", str(tmp_path / "c.cfg"), "--data", str(corpus / "data"),
                 "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_runtime_error_exit_1(corpus, tmp_path, capsys):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "x.mno").write_bytes(b"MNO1\0\0")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "truncated" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.startswith("mno ")
