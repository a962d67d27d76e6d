import csv
import json
from pathlib import Path

import numpy as np
import pytest

from imgconf import cli, storage
from imgconf.config import load_config
from imgconf.model import ConvLogisticModel, load_model, save_model, train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TINY = CONFIGS / "tiny.toml"


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("IMGCONF_SEED", raising=False)


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture
def sample_dir(tmp_path):
    out = tmp_path / "sample"
    assert run("simulate", TINY, out) == 0
    return out


def test_simulate_writes_sample_and_manifest(sample_dir):
    assert (sample_dir / "units.csv").exists()
    header = (sample_dir / "units.csv").read_text().splitlines()[0]
    assert header == "scene,h,w,propensity,T,Y,u,propensity_marginal"
    manifest = json.loads((sample_dir / "manifest.json").read_text())
    cfg = load_config(TINY, env={})
    assert manifest["config_hash"] == cfg.hash() and manifest["seed"] == 7
    assert manifest["config"] == cfg.canonical()
    assert manifest["version"] and manifest["started"] and manifest["finished"]
    assert "units.csv" in {o["path"] for o in manifest["outputs"]}


def test_sample_round_trip(sample_dir):
    s, info = storage.load_sample(sample_dir)
    cfg = load_config(TINY, env={})
    ref = cli.dgp.simulate(cfg.dgp, 0)
    assert np.array_equal(s.images, ref.images)
    assert np.array_equal(s.treatment, ref.treatment)
    assert np.array_equal(s.outcome, ref.outcome)
    assert np.array_equal(s.u_pixel, ref.u_pixel)
    assert info["level"] == "pixel" and info["n_units"] == ref.n_units


def test_scene_sample_round_trip(tmp_path):
    cfg_path = tmp_path / "scene.toml"
    cfg_path.write_text('seed = 2\n[dgp]\nlevel = "scene"\nn_scenes = 5\nimage_height = 8\nimage_width = 8\n'
                        "[model]\npool = 0\n")
    assert run("simulate", cfg_path, tmp_path / "s") == 0
    s, _ = storage.load_sample(tmp_path / "s")
    ref = cli.dgp.simulate(load_config(cfg_path, env={}).dgp, 0)
    assert np.array_equal(s.u_scene, ref.u_scene) and s.n_units == 5


def test_rerun_is_byte_identical_and_needs_force(tmp_path, sample_dir, capsys):
    assert run("simulate", TINY, tmp_path / "again") == 0
    assert (tmp_path / "again" / "units.csv").read_bytes() == (sample_dir / "units.csv").read_bytes()
    assert run("simulate", TINY, sample_dir) != 0
    assert "--force" in capsys.readouterr().err
    assert run("simulate", TINY, sample_dir, "--force") == 0


def test_unknown_key_is_reported(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[dgp]\nlevle = \"pixel\"\n")
    assert run("simulate", bad, tmp_path / "out") != 0
    assert "levle" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_train_writes_readable_checkpoint(tmp_path, sample_dir):
    assert run("train", sample_dir, TINY, tmp_path / "m") == 0
    fitted = load_model(tmp_path / "m" / "model.bin")
    # retrain in-process from the same seed: identical parameters
    cfg = load_config(TINY, env={})
    s, _ = storage.load_sample(sample_dir)
    ref = train(cli._new_model(cfg, s.level, s.images.shape), s.images, s.treatment_grid(), cfg.train, "pixel").model
    for a, b in zip(fitted.parameters(), ref.parameters()):
        assert np.array_equal(a, b)
    rows = list(csv.reader((tmp_path / "m" / "loss_trace.csv").open()))
    assert rows[0] == ["epoch", "train_loss", "test_loss"]
    assert len(rows) == 1 + 1 + cfg.train.epochs
    assert (tmp_path / "m" / "manifest.json").exists()


def test_train_with_holdout_records_test_loss(tmp_path, sample_dir):
    assert run("train", sample_dir, TINY, tmp_path / "m", "--holdout", "0.5") == 0
    rows = list(csv.DictReader((tmp_path / "m" / "loss_trace.csv").open()))
    assert all(r["test_loss"] for r in rows)


def test_grad_check_flag(tmp_path, sample_dir, capsys):
    assert run("train", sample_dir, TINY, tmp_path / "m", "--grad-check") == 0
    out = capsys.readouterr().out
    assert "max relative error" in out
    err = float(out.split("max relative error")[1].split()[0])
    assert err < 1e-4


def test_single_class_sample_fails_clearly(tmp_path, sample_dir, capsys):
    units = sample_dir / "units.csv"
    rows = list(csv.reader(units.open()))
    for r in rows[1:]:
        r[4] = "1"
    with units.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    assert run("train", sample_dir, TINY, tmp_path / "m") != 0
    assert "single-class" in capsys.readouterr().err


def test_estimate_three_rows(tmp_path, sample_dir):
    out = tmp_path / "res.csv"
    assert run("estimate", sample_dir, "--oracle", "--estimators", "diff,ht,hajek", "--out", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["estimator"] for r in rows] == ["diff_means", "ipw_ht", "ipw_hajek"]
    assert rows[1]["source"] == "oracle"
    assert rows[0]["config_id"] == load_config(TINY, env={}).hash()


def test_estimate_oracle_unconfounded(tmp_path, capsys):
    cfg = tmp_path / "b0.toml"
    cfg.write_text("seed = 1\n[dgp]\nbeta = 0.0\nn_scenes = 4\n")
    assert run("simulate", cfg, tmp_path / "s") == 0
    capsys.readouterr()
    assert run("estimate", tmp_path / "s", "--oracle") == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    for r in rows:
        assert abs(float(r["tau_hat"]) - 1.0) < 0.25  # about 4 sampling SEs


def test_constant_model_makes_hajek_equal_diff(tmp_path, sample_dir):
    save_model(ConvLogisticModel([np.zeros((3, 3, 1, 2))], [1], np.zeros(2), 0.4), tmp_path / "const.bin")
    out = tmp_path / "res.csv"
    assert run("estimate", sample_dir, "--model", tmp_path / "const.bin", "--out", out) == 0
    rows = {r["estimator"]: float(r["tau_hat"]) for r in csv.DictReader(out.open())}
    assert abs(rows["ipw_hajek"] - rows["diff_means"]) < 1e-12


def test_estimate_with_trained_model_directory(tmp_path, sample_dir):
    assert run("train", sample_dir, TINY, tmp_path / "m") == 0
    assert run("estimate", sample_dir, "--model", tmp_path / "m", "--out", tmp_path / "r.csv") == 0
    rows = list(csv.DictReader((tmp_path / "r.csv").open()))
    assert {r["source"] for r in rows} == {"none", "learned"}


def test_estimate_needs_a_propensity_source(sample_dir, capsys):
    assert run("estimate", sample_dir, "--estimators", "ht") != 0
    assert "propensity source" in capsys.readouterr().err
    assert run("estimate", sample_dir, "--estimators", "diff") == 0


def test_sweep_outputs(tmp_path):
    assert run("sweep", TINY, tmp_path / "sw", "--threads", "1") == 0
    rows = list(csv.DictReader((tmp_path / "sw" / "metrics.csv").open()))
    assert {r["grid_value"] for r in rows} == {"2", "4"}
    assert (tmp_path / "sw" / "plot.csv").exists()
    manifest = json.loads((tmp_path / "sw" / "manifest.json").read_text())
    assert {o["path"] for o in manifest["outputs"]} == {"metrics.csv", "plot.csv"}


def test_bundled_noise_spec_rows(tmp_path):
    text = (CONFIGS / "scene_noise_sweep.toml").read_text()
    text = (text.replace("replications = 200", "replications = 2").replace("n_scenes = 200", "n_scenes = 12")
                .replace("epochs = 30", "epochs = 1"))
    cfg = tmp_path / "noise.toml"
    cfg.write_text(text)
    assert run("sweep", cfg, tmp_path / "sw", "--threads", "1") == 0
    rows = list(csv.DictReader((tmp_path / "sw" / "metrics.csv").open()))
    assert sorted({float(r["grid_value"]) for r in rows}) == [1, 3, 5, 7]


def test_check_identification(capsys):
    assert run("sweep", "--check-identification") == 0
    assert "PASS identification" in capsys.readouterr().out
    assert run("check", "--worlds", "5") == 0


def test_env_seed_reaches_manifest(tmp_path, monkeypatch):
    monkeypatch.setenv("IMGCONF_SEED", "123")
    assert run("simulate", TINY, tmp_path / "s") == 0
    assert json.loads((tmp_path / "s" / "manifest.json").read_text())["seed"] == 123
