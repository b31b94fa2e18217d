import json
import shutil
import subprocess

import pytest

from afmsim.cli import main
from afmsim.sample import load_heightmap

FLAT = ["--set", "sample.kind=flat", "--set", "sample.I_x=5e-7"]


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--out", str(out), *FLAT]) == 0
    for name in ("line_0.csv", "impacts_0.csv", "line_0.meta.json", "metrics.json", "config.json"):
        assert (out / name).exists(), name
    assert "rms_e_sigma=" in capsys.readouterr().out

    # metrics recomputed from disk agree with the ones written by the run
    assert main(["metrics", str(out)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((out / "metrics.json").read_text())


def test_config_file_and_bad_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"flags": {"hybrid_pid": "maybe?"}, "nonsense": {}}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--out", str(tmp_path / "o"), "--set", "flags.plain_pid=true"]) == 2
    assert main(["run", "--out", str(tmp_path / "o"), "--lines", "4..9", *FLAT]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2


def test_simulation_failure_exit_code(tmp_path):
    rc = main(["run", "--out", str(tmp_path / "o"), *FLAT, "--set", "engage.max_time=1e-6"])
    assert rc == 3


def test_metrics_needs_config(tmp_path):
    assert main(["metrics", str(tmp_path)]) == 2


@pytest.mark.parametrize("kind", ["grid", "sinusoid"])
def test_sample_gen(tmp_path, kind):
    p = tmp_path / f"{kind}.csv"
    assert main(["sample", "gen", kind, "--out", str(p), "--nx", "101"]) == 0
    g = load_heightmap(p)
    assert g.heights.shape == (2, 101)


def test_generated_map_drives_a_run(tmp_path):
    p = tmp_path / "g.csv"
    assert main(["sample", "gen", "grid", "--out", str(p), "--nx", "201", "--periods", "1", "--step-height", "0"]) == 0
    out = tmp_path / "run"
    assert main(["run", "--out", str(out), "--set", "sample.kind=file", "--set", f"sample.path={json.dumps(str(p))}"]) == 0


@pytest.mark.skipif(shutil.which("afm-sim") is None, reason="console script not installed")
def test_console_script_help():
    r = subprocess.run(["afm-sim", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "run" in r.stdout and "metrics" in r.stdout
