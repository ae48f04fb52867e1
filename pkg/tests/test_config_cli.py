import csv
import json
import math

import pytest
import yaml

from polarbev.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from polarbev.config import config_to_dict, load_config
from polarbev.nn_core import ConfigError

SMALL = ["data.size=20", "data.val_size=4", "optim.epochs=2", "optim.batch_size=4",
         "heads.tasks=[obstacle, freespace]"]


def _sets(items):
    return [a for item in items for a in ("--set", item)]


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config


def test_defaults_validate():
    cfg = load_config()
    assert (cfg.grid.M, cfg.grid.N, cfg.grid.r_min, cfg.grid.r_max) == (72, 16, 2.0, 50.0)
    assert cfg.heads.lambdas == [1.0, 5.0, 1.0, 1.0]
    assert cfg.balancer.priors == {"obstacle": 5.0, "parking": 3.0, "freespace": 1.0}


def test_yaml_file_and_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("rig: truck2\noptim:\n  lr: 1e-3\n  epochs: 7\n")
    cfg = load_config(path, ["optim.epochs=3", "model.lift=ipm"])
    assert cfg.rig == "truck2"
    assert cfg.optim.lr == pytest.approx(1e-3)
    assert cfg.optim.epochs == 3
    assert cfg.model.lift == "ipm"


def test_round_trip_through_yaml(tmp_path):
    cfg = load_config(None, ["seed=5", "data.scene={classes: [Vehicle]}"])
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(config_to_dict(cfg)))
    assert config_to_dict(load_config(path)) == config_to_dict(cfg)


@pytest.mark.parametrize("override, fragment", [
    ("optim.lerning_rate=0.1", "lerning_rate"),
    ("grid.M=2", "grid"),
    ("optim.epochs=1.5", "integer"),
    ("optim.lr=fast", "number"),
    ("model.lift=bilinear", "lift"),
    ("heads.tasks=[lanes]", "tasks"),
    ("heads.lambdas=[1, 2]", "four"),
    ("balancer.priors={obstacle: -1}", "prior"),
    ("image.width=100", "multiples of 8"),
    ("data.scene={radius_max: 3}", "data.scene"),
    ("rig=bus9", "rig"),
])
def test_invalid_configs_name_the_problem(override, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(None, [override])


def test_override_without_equals():
    with pytest.raises(ConfigError, match="key.sub=value"):
        load_config(None, ["optim.lr"])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.yaml")


# ---------------------------------------------------------------- CLI


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "grid.M=2"]) == EXIT_CONFIG
    assert "grid" in capsys.readouterr().err


def test_cli_bad_yaml_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("optim: [unclosed\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_cli_generate_refuses_overwrite(tmp_path):
    args = ["generate-data", "--out", str(tmp_path), *_sets(["data.size=5", "data.val_size=1"])]
    assert main(args) == EXIT_OK
    assert (tmp_path / "dataset.jsonl").exists()
    assert main(args) == EXIT_RUNTIME
    assert main(args + ["--force"]) == EXIT_OK


def test_cli_dump_lut(tmp_path):
    assert main(["dump-lut", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "lut.tsv").read_text().splitlines()
    assert len(lines) > 100
    assert (tmp_path / "config.yaml").exists()


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out), *_sets(SMALL)]) == EXIT_OK
    return out


def test_train_writes_checkpoints_and_tables(trained_run):
    assert sorted(p.name for p in trained_run.glob("*.ckpt")) == ["epoch_000.ckpt", "epoch_001.ckpt"]
    rows = _csv(trained_run / "epochs.csv")
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    assert all(math.isfinite(float(r["loss_total"])) for r in rows)
    balance = _csv(trained_run / "balance.csv")
    assert {r["task"] for r in balance} == {"obstacle", "freespace"}
    for name in ("training.png", "balance.png", "ledger.json", "config.yaml"):
        assert (trained_run / name).stat().st_size > 0


def test_train_rerun_is_deterministic(trained_run, tmp_path):
    assert main(["train", "--out", str(tmp_path), *_sets(SMALL)]) == EXIT_OK
    a = _csv(trained_run / "epochs.csv")[-1]["loss_total"]
    b = _csv(tmp_path / "epochs.csv")[-1]["loss_total"]
    assert a == b


def test_eval_is_repeatable(trained_run, tmp_path):
    ckpt = str(trained_run / "epoch_001.ckpt")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["eval", "--checkpoint", ckpt, "--out", str(out)]) == EXIT_OK
        outs.append(out)
    for f in ("kpis.json", "classes.csv", "freespace_sectors.csv", "pr_curve.csv"):
        assert (outs[0] / f).read_text() == (outs[1] / f).read_text()
    assert (outs[0] / "rdm_example.png").exists()


def test_untrained_checkpoint_scores_near_zero(trained_run, tmp_path):
    assert main(["eval", "--checkpoint", str(trained_run / "epoch_000.ckpt"), "--out", str(tmp_path)]) == EXIT_OK
    kpis = json.loads((tmp_path / "kpis.json").read_text())
    assert kpis["detection"]["mAP"] < 0.2


def test_oracle_eval_is_perfect(tmp_path):
    assert main(["eval", "--oracle", "--out", str(tmp_path), *_sets(SMALL)]) == EXIT_OK
    kpis = json.loads((tmp_path / "kpis.json").read_text())
    assert kpis["detection"]["mAP"] == pytest.approx(1.0)
    assert kpis["freespace"]["success_rate_pct"] == pytest.approx(100.0)
    assert kpis["parking"]["f1"] == pytest.approx(1.0)


def test_eval_rig_mismatch(trained_run, tmp_path):
    ckpt = str(trained_run / "epoch_001.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--rig", "truck2", "--out", str(tmp_path)]) == EXIT_RUNTIME
    assert main(["eval", "--checkpoint", ckpt, "--rig", "truck2", "--allow-rig-change",
                 "--out", str(tmp_path)]) == EXIT_OK


def test_balance_report(trained_run, tmp_path):
    assert main(["balance-report", "--run", str(trained_run), "--out", str(tmp_path)]) == EXIT_OK
    rows = _csv(tmp_path / "balance.csv")
    assert len(rows) == 2 * 2
    assert {r["task"] for r in rows} == {"obstacle", "freespace"}
    assert main(["balance-report", "--run", str(tmp_path / "missing")]) == EXIT_CONFIG


def test_bench_lut_rows(tmp_path):
    assert main(["bench-lut", "--reps", "3", "--out", str(tmp_path)]) == EXIT_OK
    rows = _csv(tmp_path / "bench_lut.csv")
    assert [r["camera"] for r in rows] == ["front", "rear", "total"]
    assert all(float(r["lut_ms"]) > 0 and float(r["naive_ms"]) > 0 for r in rows)
    assert (tmp_path / "bench_lut.png").exists()
