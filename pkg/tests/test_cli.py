import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from detvi import cli


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def toy_train_config(tmp_path, **train):
    base = dict(epochs=3, batch_size=64, learning_rate=1e-2)
    base.update(train)
    return dict(dataset="toy", network={"hidden": [8]}, train=base, output_dir=str(tmp_path / "run"))


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_train_writes_metrics_and_model(tmp_path, capsys):
    cfg = toy_train_config(tmp_path)
    assert cli.main(["train", "--config", write_config(tmp_path, cfg)]) == cli.EXIT_OK
    recs = read_jsonl(tmp_path / "run" / "metrics.jsonl")
    assert len(recs) == 3
    assert all(r["config_hash"] == cli.config_hash(cfg) and r["run_id"] for r in recs)
    assert [r["epoch"] for r in recs] == [0, 1, 2]
    spec, params, std = cli.load_model(tmp_path / "run" / "model.json")
    assert spec.layer_sizes == (1, 8, 2)
    assert "final_test_ll" in capsys.readouterr().out


def test_train_is_deterministic(tmp_path):
    outs = []
    for k in range(2):
        cfg = toy_train_config(tmp_path)
        cfg["output_dir"] = str(tmp_path / f"r{k}")
        assert cli.main(["train", "--config", write_config(tmp_path, cfg, f"c{k}.json")]) == 0
        outs.append([(r["train_elbo"], r["test_ll"]) for r in read_jsonl(tmp_path / f"r{k}" / "metrics.jsonl")])
    assert outs[0] == outs[1]


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path / "elsewhere"))
    cfg = toy_train_config(tmp_path, epochs=1)
    assert cli.main(["train", "--config", write_config(tmp_path, cfg)]) == 0
    assert (tmp_path / "elsewhere" / "metrics.jsonl").exists()
    assert not (tmp_path / "run").exists()


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda c: c.pop("dataset"), "dataset"),
        (lambda c: c.update(dataset="/no/such/file.csv"), "dataset"),
        (lambda c: c.update(colour="blue"), "colour"),
        (lambda c: c["train"].update(learning_rate=-1), "learning_rate"),
        (lambda c: c["network"].update(head="poisson"), "head"),
        (lambda c: c["network"].update(hidden=[4, 5], skip_layers=[1]), "network"),
    ],
)
def test_config_errors_exit_2(tmp_path, capsys, mutate, field):
    cfg = toy_train_config(tmp_path)
    mutate(cfg)
    assert cli.main(["train", "--config", write_config(tmp_path, cfg)]) == cli.EXIT_CONFIG
    assert field in capsys.readouterr().err


def test_unreadable_config_exit_2(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_divergence_exit_3(tmp_path, capsys):
    cfg = toy_train_config(tmp_path, learning_rate=1e6, epochs=50)
    assert cli.main(["train", "--config", write_config(tmp_path, cfg)]) == cli.EXIT_NUMERIC
    assert "non-finite" in capsys.readouterr().err


def test_predict_round_trip(tmp_path):
    cfg = toy_train_config(tmp_path, epochs=40)
    assert cli.main(["train", "--config", write_config(tmp_path, cfg)]) == 0
    xs = np.linspace(-0.9, 0.9, 7)
    inp = tmp_path / "x.csv"
    inp.write_text("x\n" + "\n".join(str(float(v)) for v in xs) + "\n")
    out = tmp_path / "pred.csv"
    model = str(tmp_path / "run" / "model.json")
    assert cli.main(["predict", "--model", model, "--input", str(inp), "--output", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["row_id"]) for r in rows] == list(range(7))
    std = np.array([float(r["std"]) for r in rows])
    mean = np.array([float(r["mean"]) for r in rows])
    assert np.all(std > 0) and np.all(np.isfinite(mean))
    # noise in the toy data grows with x, so the fitted predictive spread should too
    assert std[-1] > std[0]


def test_predict_empty_and_wrong_columns(tmp_path):
    cfg = toy_train_config(tmp_path, epochs=1)
    assert cli.main(["train", "--config", write_config(tmp_path, cfg)]) == 0
    model = str(tmp_path / "run" / "model.json")
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    out = tmp_path / "out.csv"
    assert cli.main(["predict", "--model", model, "--input", str(empty), "--output", str(out)]) == 0
    assert out.read_text().strip() == "row_id,mean,std"
    wide = tmp_path / "wide.csv"
    wide.write_text("1,2\n3,4\n")
    out2 = tmp_path / "out2.csv"
    assert cli.main(["predict", "--model", model, "--input", str(wide), "--output", str(out2)]) == cli.EXIT_CONFIG
    assert not out2.exists()
    assert cli.main(["predict", "--model", str(tmp_path / "nope.json"), "--input", str(wide), "--output", str(out2)]) == 2


def test_benchmark_summary(tmp_path):
    cfg = dict(
        datasets=["toy"],
        methods=["DVI", "hoDVI"],
        n_splits=2,
        fixed_prior_variances=[1.0],
        network={"hidden": [6]},
        train=dict(epochs=2, batch_size=128, learning_rate=1e-2),
        output_dir=str(tmp_path / "bench"),
    )
    assert cli.main(["benchmark", "--config", write_config(tmp_path, cfg), "--jobs", "1"]) == 0
    with open(tmp_path / "bench" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["DVI", "hoDVI", "DVI-fixed:1"]
    assert all(r["n_splits"] == "2" and r["n_failed"] == "0" and r["std_err"] for r in rows)
    recs = read_jsonl(tmp_path / "bench" / "metrics.jsonl")
    assert len(recs) == 3 * 2 * 2


def test_benchmark_single_split_and_failures(tmp_path):
    cfg = dict(
        datasets=["toy"],
        methods=["DVI"],
        n_splits=1,
        network={"hidden": [4]},
        train=dict(epochs=1),
        output_dir=str(tmp_path / "one"),
    )
    assert cli.main(["benchmark", "--config", write_config(tmp_path, cfg), "--jobs", "1"]) == 0
    with open(tmp_path / "one" / "summary.csv") as fh:
        row = next(csv.DictReader(fh))
    assert row["std_err"] == ""
    cfg["train"] = dict(epochs=20, learning_rate=1e6)
    cfg["output_dir"] = str(tmp_path / "two")
    assert cli.main(["benchmark", "--config", write_config(tmp_path, cfg, "b.json"), "--jobs", "1"]) == cli.EXIT_NUMERIC
    with open(tmp_path / "two" / "summary.csv") as fh:
        row = next(csv.DictReader(fh))
    assert row["n_failed"] == "1"
    cfg["datasets"] = ["missing-dataset"]
    assert cli.main(["benchmark", "--config", write_config(tmp_path, cfg, "c.json")]) == cli.EXIT_CONFIG


def test_verify_moments(tmp_path, capsys):
    out = tmp_path / "v"
    assert cli.main(["verify", "--kind", "heaviside", "--rho", "0", "--grid=-2:2:1", "--out", str(out)]) == 0
    assert (out / "residuals_heaviside.csv").exists()
    report = json.loads((out / "report_heaviside.json").read_text())
    assert report["passed"] and report["max_abs_err"] <= 1e-12
    code = cli.main(["verify", "--kind", "relu", "--grid=-1,0,1", "--rho", "0.5", "--tolerance", "1e-9", "--out", str(out)])
    assert code == cli.EXIT_VERIFY
    assert "worst offender" in capsys.readouterr().out
    assert cli.main(["verify", "--kind", "relu", "--grid", "1:0:1", "--out", str(out)]) == cli.EXIT_CONFIG


def test_verify_toy_fresh_network(tmp_path):
    assert cli.main(["verify", "--kind", "toy", "--samples", "2000", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "toy_agreement.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4


def test_parse_grid():
    assert cli.parse_grid("-1:1:0.5") == (-1.0, -0.5, 0.0, 0.5, 1.0)
    assert cli.parse_grid("3, 1") == (3.0, 1.0)
    with pytest.raises(cli.ConfigError):
        cli.parse_grid("a:b:c")


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "detvi.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for command in ("train", "benchmark", "verify", "predict"):
        assert command in res.stdout
