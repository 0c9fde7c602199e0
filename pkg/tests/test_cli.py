import hashlib
import json

import pytest

from shotfi.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUN, build_parser, main
from shotfi.synth import BenchmarkConfig
from shotfi.train import TrainConfig

GEN = """
n_source = 6
n_target = 4
n_holdout = 2
T = 24
N_sc = 4
seed = 3
occupancy_dist = {"0" = 0.5, "2" = 0.5}
"""


def digest(d):
    h = hashlib.sha256()
    for p in sorted(d.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_gen_synthetic(tmp_path, capsys):
    cfg = tmp_path / "gen.toml"
    cfg.write_text(GEN)
    assert main(["gen-synthetic", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["gen-synthetic", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("source.json", "target.json", "holdout.json"):
        assert (tmp_path / "a" / name).exists()
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    meta = json.loads((tmp_path / "a" / "source.json").read_text())
    assert len(meta["samples"]) == 6


def test_gen_nested_section(tmp_path):
    cfg = tmp_path / "gen.toml"
    cfg.write_text("[benchmark]\n" + GEN)
    assert main(["gen-synthetic", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK


def test_gen_validation_error(tmp_path, capsys):
    cfg = tmp_path / "gen.toml"
    cfg.write_text("n_source = 0\n")
    assert main(["gen-synthetic", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "n_source" in capsys.readouterr().err
    cfg.write_text("n_source = [\n")
    assert main(["gen-synthetic", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["gen-synthetic", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_help_documents_every_key(capsys):
    for cmd in ("gen-synthetic", "run"):
        with pytest.raises(SystemExit):
            build_parser().parse_args([cmd, "--help"])
        text = capsys.readouterr().out
        keys = BenchmarkConfig.__dataclass_fields__ if cmd == "gen-synthetic" else TrainConfig.keys()
        for k in keys:
            assert k in text, (cmd, k)


RUN = """
scenario = "synthetic_cross_frequency"
methods = ["source_only", "mu_shot_fi"]
seeds = [0]
[data]
source = "data/source.json"
target = "data/target.json"
[source]
epochs = 1
batch_size = 4
[adapt]
epochs = 1
batch_size = 4
rot_pretrain_epochs = 1
"""


def test_run_and_report(tmp_path, capsys):
    gen = tmp_path / "gen.toml"
    gen.write_text(GEN)
    assert main(["gen-synthetic", "--config", str(gen), "--out", str(tmp_path / "data")]) == EXIT_OK
    spec = tmp_path / "run.toml"
    spec.write_text(RUN)
    assert main(["run", "--spec", str(spec), "--out", str(tmp_path / "runs")]) == EXIT_OK
    assert not list((tmp_path / "runs").glob("source_only/seed_0/adapted.pt"))
    assert (tmp_path / "runs" / "mu_shot_fi" / "seed_0" / "adapted.pt").exists()
    capsys.readouterr()
    assert main(["report", "--runs", str(tmp_path / "runs"), "--format", "md"]) == EXIT_OK
    md = capsys.readouterr().out
    assert "| mu_shot_fi | 1 |" in md
    out_csv = tmp_path / "t.csv"
    assert main(["report", "--runs", str(tmp_path / "runs"), str(tmp_path / "gone"), "--format", "csv",
                 "--out", str(out_csv), "--plots"]) == EXIT_OK
    err = capsys.readouterr().err
    assert "missing" in err and "gone" in err
    assert out_csv.read_text().startswith("scenario,setting,method")
    assert list((tmp_path / "runs" / "plots").glob("*.png"))


def test_run_config_errors(tmp_path, capsys):
    spec = tmp_path / "run.toml"
    spec.write_text('scenario = "synthetic_x"\nmethods = ["su_shot_fi"]\nseeds = [0]\n[benchmark]\nT = 20\n')
    assert main(["run", "--spec", str(spec), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "su_shot_fi" in capsys.readouterr().err


def test_run_failure_exit_code(tmp_path):
    spec = tmp_path / "run.toml"
    spec.write_text('scenario = "synthetic_x"\nmethods = ["source_only"]\nseeds = [0]\n'
                    '[data]\nsource = "missing.json"\ntarget = "missing.json"\n')
    assert main(["run", "--spec", str(spec), "--out", str(tmp_path / "r")]) == EXIT_RUN


def test_report_without_runs(tmp_path):
    assert main(["report", "--runs", str(tmp_path)]) == EXIT_RUN
