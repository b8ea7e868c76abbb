"""Command-line interface tests (plumbing contracts, determinism, artifacts)."""

import json

import numpy as np
import pytest

from battwin.cli import PRESETS, main
from battwin.cycles import write_dataset
from battwin.surrogate import save_checkpoint


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, small_dataset, small_model):
    d = tmp_path_factory.mktemp("cliwork")
    write_dataset(small_dataset, d / "data")
    weights, _ = small_model
    save_checkpoint(weights, d / "model.ckpt")
    return d


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["--help"])
    assert ei.value.code == 0
    assert "gen" in capsys.readouterr().out


def test_unknown_flag_exits_nonzero(tmp_path, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["gen", "--out", str(tmp_path / "x"), "--bogus-flag"])
    assert ei.value.code != 0
    assert not (tmp_path / "x").exists()       # no side effects


def test_gen_twice_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        rc = main(["gen", "--out", str(out), "--train-cycles", "2",
                   "--test-cycles", "1", "--windows", "6", "--seed", "1"])
        assert rc == 0
    assert (a / "samples.bin").read_bytes() == (b / "samples.bin").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert (a / "effective_config.json").exists()


def test_gen_constant_current(tmp_path):
    out = tmp_path / "cc"
    rc = main(["gen", "--out", str(out), "--constant-current", "5,6"])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["kind"] == "constant_current"
    recs = np.frombuffer((out / "samples.bin").read_bytes(),
                         dtype="<f4").reshape(-1, 1605)
    assert np.array_equal(recs[:, 801], recs[:, 802])


def test_preset_expansion():
    assert PRESETS["paper"]["train_cycles"] + PRESETS["paper"]["test_cycles"] == 18000
    assert PRESETS["desk"]["train_cycles"] == 1500
    assert PRESETS["desk"]["test_cycles"] == 300


def test_train_and_eval_commands(workdir, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    rc = main(["train", "--data", str(workdir / "data"), "--out", str(ckpt),
               "--epochs", "1", "--batch", "32", "--seed", "3"])
    assert rc == 0
    assert ckpt.exists()
    assert ckpt.with_suffix(".history.json").exists()

    report = tmp_path / "report.json"
    rc = main(["eval", "--model", str(ckpt), "--data", str(workdir / "data"),
               "--report", str(report), "--out", str(tmp_path / "traces")])
    assert rc == 0
    rep = json.loads(report.read_text())
    assert "one_step" in rep and "kstep" in rep
    assert rep["kstep"]["failure_table"]
    svgs = list((tmp_path / "traces").glob("*.svg"))
    assert svgs


def test_eval_missing_model_usage_error(workdir, tmp_path, capsys):
    rc = main(["eval", "--model", str(tmp_path / "nope.ckpt"),
               "--data", str(workdir / "data"),
               "--report", str(tmp_path / "r.json")])
    assert rc != 0
    assert "error" in capsys.readouterr().err


def test_rollout_command(workdir, tmp_path):
    out = tmp_path / "roll"
    rc = main(["rollout", "--model", str(workdir / "model.ckpt"),
               "--seed", "4", "--windows", "5", "--out", str(out)])
    assert rc == 0
    summary = json.loads((out / "rollout.json").read_text())
    assert "predicted_failure_window" in summary
    assert (out / "voltage.csv").exists()
    assert (out / "voltage.svg").exists()


def test_soh_command(workdir, tmp_path, capsys):
    report = tmp_path / "soh.json"
    rc = main(["soh", "--model", str(workdir / "model.ckpt"),
               "--gamma", "1.0", "--trials", "1", "--cycles", "3",
               "--windows", "4", "--seed", "8",
               "--report", str(report), "--out", str(tmp_path / "curves")])
    assert rc == 0
    rep = json.loads(report.read_text())
    assert rep["gamma_true"] == 1.0
    assert len(rep["trials"]) == 1
    assert len(rep["trials"][0]["per_cycle"]) == 3
    assert list((tmp_path / "curves").glob("*.svg"))


def test_bench_command(workdir, tmp_path):
    report = tmp_path / "bench.json"
    rc = main(["bench", "--model", str(workdir / "model.ckpt"),
               "--seed", "2", "--windows", "4", "--repeats", "2",
               "--report", str(report)])
    assert rc == 0
    rep = json.loads(report.read_text())
    assert rep["ratio"] > 1.0
    assert "machine" in rep


def test_plot_command(tmp_path):
    csv = tmp_path / "in.csv"
    csv.write_text("t,a,b\n0,1.0,2.0\n1,1.5,1.8\n2,1.1,1.9\n")
    out = tmp_path / "out.svg"
    rc = main(["plot", "--csv", str(csv), "--out", str(out), "--title", "demo"])
    assert rc == 0
    assert out.read_text().startswith("<svg")


def test_config_file_merging(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train_cycles": 2, "test_cycles": 1,
                               "windows": 5, "seed": 9}))
    out = tmp_path / "d"
    rc = main(["gen", "--out", str(out), "--config", str(cfg)])
    assert rc == 0
    eff = json.loads((out / "effective_config.json").read_text())
    assert eff["train_cycles"] == 2 and eff["windows"] == 5 and eff["seed"] == 9
    # explicit flag beats the config file
    out2 = tmp_path / "d2"
    rc = main(["gen", "--out", str(out2), "--config", str(cfg), "--seed", "12"])
    assert rc == 0
    eff2 = json.loads((out2 / "effective_config.json").read_text())
    assert eff2["seed"] == 12
