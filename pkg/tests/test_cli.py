import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from tilescale import cli
from tilescale.nn.estimator import TileCNNRegressor

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--config", SMOKE, "--out", out) == 0
    return out


def test_help_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "tilescale", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("synth", "features", "dataset", "train", "sweep", "gradcheck", "report"):
        assert name in proc.stdout


def test_unknown_flag_is_rejected():
    with pytest.raises(SystemExit) as exc:
        run("sweep", "--no-such-flag")
    assert exc.value.code != 0
    with pytest.raises(SystemExit):
        run("sweep", "--sizes", "9,x")


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_days": 2, "bogus": 1}))
    assert run("synth", "--config", bad, "--out", tmp_path / "o") == 2
    bad.write_text("{not json")
    assert run("synth", "--config", bad, "--out", tmp_path / "o") == 2
    assert run("sweep", "--config", SMOKE, "--out", tmp_path / "o", "--sizes", "9,10") == 2


def test_synth_writes_every_flight(synth_dir):
    index = json.loads((synth_dir / "flights.json").read_text())["flights"]
    assert len(index) == 2 * 2
    assert {f["split"] for f in index} == {"train", "test"}
    assert [f["daypart"] for f in index] == ["morning", "midday"] * 2
    for f in index:
        assert (synth_dir / "scenes" / f["flight_id"] / "thermal.mcg").exists()


def test_synth_rerun_is_identical(synth_dir, tmp_path):
    assert run("synth", "--config", SMOKE, "--out", tmp_path) == 0
    a = json.loads((synth_dir / "flights.json").read_text())
    b = json.loads((tmp_path / "flights.json").read_text())
    assert a == b


def test_stage_commands(synth_dir, tmp_path):
    out = tmp_path / "run"
    shutil.copytree(synth_dir, out)
    assert run("features", "--config", SMOKE, "--out", out) == 0
    assert (out / "standardizer.json").exists()
    assert run("dataset", "--config", SMOKE, "--out", out, "--sizes", "9") == 0
    manifest = json.loads((out / "datasets" / "k9" / "manifest.json").read_text())
    assert manifest["tile_size"] == 9 and set(manifest["splits"]) == {"train", "val", "test"}
    assert run("train", "--config", SMOKE, "--out", out, "--sizes", "9", "--epochs", "1") == 0
    assert (out / "checkpoints" / "k9_s0" / "best.ckpt").exists()


def test_features_without_synth_is_a_stage_failure(tmp_path):
    assert run("features", "--config", SMOKE, "--out", tmp_path) == 3


def test_sweep_with_two_sizes(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    shutil.copytree(synth_dir, out)
    assert run("sweep", "--config", SMOKE, "--out", out, "--sizes", "9,15", "--epochs", "1") == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["sizes"] == [9, 15] and rep["status"] == "complete"
    assert rep["saturation"] is None
    rows = (out / "mse_by_size.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 2
    assert run("report", "--config", SMOKE, "--out", out) == 0
    printed = capsys.readouterr().out
    assert "status: complete" in printed
    assert "saturation:" not in printed and "fewer than 3 sizes" in printed


def test_corrupt_scene_exits_3(synth_dir, tmp_path):
    out = tmp_path / "run"
    shutil.copytree(synth_dir, out)
    victim = next((out / "scenes").iterdir()) / "radiation.mcg"
    victim.write_bytes(victim.read_bytes()[:100])
    assert run("sweep", "--config", SMOKE, "--out", out, "--epochs", "1") == 3
    assert (out / "run_config.json").exists()
    assert not (out / "report.json").exists()


def test_failure_mid_sweep_keeps_partial_report(synth_dir, tmp_path, monkeypatch):
    out = tmp_path / "run"
    shutil.copytree(synth_dir, out)
    real = TileCNNRegressor.fit_tiles

    def flaky(self, train, val):
        if train.tiles.shape[2] == 15:
            raise FloatingPointError("diverged")
        return real(self, train, val)

    monkeypatch.setattr(TileCNNRegressor, "fit_tiles", flaky)
    assert run("sweep", "--config", SMOKE, "--out", out, "--sizes", "9,15", "--epochs", "1") == 3
    rep = json.loads((out / "report.json").read_text())
    assert rep["status"] == "failed"
    assert rep["sizes"] == [9]
    assert (out / "checkpoints" / "k9_s0" / "best.ckpt").exists()


def test_gradcheck_failure_exits_1(monkeypatch):
    from tilescale.nn import gradcheck

    def failing(**kw):
        rep = gradcheck.GradCheckReport(kw.get("precision", "f64"))
        rep.results.append(gradcheck.CheckResult("linear", 1.0, 1e-4))
        return rep

    monkeypatch.setattr(gradcheck, "grad_check", failing)
    assert run("gradcheck") == 1
