import json
import shutil

import numpy as np
import pytest

from noonphase import io
from noonphase.cli import bundle_digest, main

SMALL = {
    "seed": 5,
    "geometry": {"width": 32, "height": 16},
    "source": {"pair_rate": 0.5, "sigma_plus": 2400, "classical_rate": 1.0},
    "noise": {"dark_prob": 0.0002, "crosstalk": [{"dx": 1, "dy": 0, "p": 0.01}]},
    "scene": {"sample_phase": {"kind": "phi_letter", "amplitude": 1.0}},
    "acquisition": {"noon_frames": 20000},
    "dark": {"n_frames": 50000},
}


def run_all(out, config_path, threads=1, seed=None):
    extra = ["--out", str(out), "--threads", str(threads)]
    if seed is not None:
        extra += ["--seed", str(seed)]
    assert main(["simulate", "--config", str(config_path), *extra]) == 0
    for cmd in ("dark", "process", "phase", "analyze", "report"):
        assert main([cmd, *extra]) == 0, cmd


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture(scope="module")
def finished(tmp_path_factory, config_path):
    out = tmp_path_factory.mktemp("run") / "a"
    run_all(out, config_path)
    return out


def test_run_layout(finished):
    for rel in (
        "config.json",
        "manifest.json",
        "sim/sample/noon/step0.qfrs",
        "sim/sample/classical/step3.qfrs",
        "dark/dark.qfrs",
        "proc/crosstalk.csv",
        "proc/summary.json",
        "phase/final/noon.csv",
        "phase/final/classical.pgm",
        "analyze/metrics.json",
        "analyze/sensitivity_curves.csv",
        "report/bundle.json",
        "report/report.md",
    ):
        assert (finished / rel).exists(), rel
    stages = [s["stage"] for s in io.read_json(finished / "manifest.json")["stages"]]
    assert stages == ["simulate", "dark", "process", "phase", "analyze", "report"][: len(stages)]


def test_metrics_are_sane(finished):
    m = io.read_json(finished / "analyze/metrics.json")
    assert m["zncc_noon"] > 0.7
    assert m["zncc_classical"] > 0.7
    assert 0.3 < m["lu_ratio"] < 1.5
    assert m["predicted_ratio"] == pytest.approx(1 / np.sqrt(2), abs=1e-4)


def test_same_seed_reproduces_bundle(finished, config_path, tmp_path):
    run_all(tmp_path / "b", config_path)
    assert bundle_digest(tmp_path / "b") == bundle_digest(finished)
    for rel in ("phase/final/noon.csv", "sim/sample/noon/step2.qfrs", "analyze/metrics.json"):
        assert (tmp_path / "b" / rel).read_bytes() == (finished / rel).read_bytes()


def test_other_seed_changes_frames(finished, config_path, tmp_path):
    out = tmp_path / "c"
    assert main(["simulate", "--config", str(config_path), "--out", str(out), "--seed", "6"]) == 0
    a = (finished / "sim/sample/noon/step0.qfrs").read_bytes()
    assert (out / "sim/sample/noon/step0.qfrs").read_bytes() != a


def test_deleted_intermediates_regenerate(finished, tmp_path):
    out = tmp_path / "d"
    shutil.copytree(finished, out)
    shutil.rmtree(out / "phase")
    shutil.rmtree(out / "analyze")
    assert main(["report", "--out", str(out)]) == 3
    assert main(["phase", "--out", str(out)]) == 0
    assert main(["analyze", "--out", str(out)]) == 0
    assert (out / "phase/final/noon.csv").read_bytes() == (finished / "phase/final/noon.csv").read_bytes()
    assert (out / "analyze/metrics.json").read_bytes() == (finished / "analyze/metrics.json").read_bytes()
    assert main(["report", "--out", str(out)]) == 0
    assert bundle_digest(out) == bundle_digest(finished)


def test_modified_artifact_is_reported(finished, tmp_path, capsys):
    out = tmp_path / "e"
    shutil.copytree(finished, out)
    (out / "proc/crosstalk.csv").write_text("tampered\n")
    (out / "phase/final/noon.pgm").unlink()
    assert main(["report", "--out", str(out)]) == 3
    err = capsys.readouterr().err
    assert "modified process: proc/crosstalk.csv" in err
    assert "missing phase: phase/final/noon.pgm" in err


def test_identical_inputs_give_unit_ratio(finished):
    noon = str(finished / "phase/final/noon.csv")
    out = finished.parent / "same"
    shutil.copytree(finished, out)
    assert main(["analyze", "--out", str(out), "--noon", noon, "--classical", noon]) == 0
    assert io.read_json(out / "analyze/metrics.json")["lu_ratio"] == 1.0


def test_missing_dark_stack_exits_3(finished, tmp_path):
    out = tmp_path / "f"
    shutil.copytree(finished, out)
    (out / "dark/dark.qfrs").unlink()
    assert main(["process", "--out", str(out)]) == 3
    assert main(["process", "--out", str(out), "--no-crosstalk"]) == 0


def test_exit_codes(tmp_path, config_path, capsys):
    assert main(["simulate", "--out", str(tmp_path / "g"), "--threads", "0", "--config", str(config_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"acquisition": {"noon_frames": 0}}))
    assert main(["simulate", "--out", str(tmp_path / "g"), "--config", str(bad)]) == 2
    assert "acquisition/noon_frames" in capsys.readouterr().err
    assert main(["process", "--out", str(tmp_path / "nothing")]) == 3
    empty = tmp_path / "h"
    empty.mkdir()
    (empty / "manifest.json").write_text(json.dumps({"stages": []}))
    assert main(["report", "--out", str(empty)]) == 3
