import hashlib
import json
import os

import pytest

from harmonic_em.cli import main
from harmonic_em.io import read_matrix, read_trajectory

OU = """[potential]
kind = quadratic
kappa = 1.0

[sampler]
kind = em
dt = 0.01
replicas = 4
seed = 7

[schedule]
n_steps = 50

[output]
prefix = ou
"""


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "ou.ini"
    p.write_text(OU)
    return str(p)


def test_run_writes_rows_and_manifest(cfg, tmp_path):
    out = tmp_path / "a"
    assert main(["run", "--config", cfg, "--out-dir", str(out)]) == 0
    traj = out / "ou_trajectory.csv"
    assert traj.read_text().startswith("# manifest_sha256=")
    tab = read_trajectory(str(traj))
    assert len(tab.step) == 200
    assert tab.step.min() == 1 and tab.step.max() == 50
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 7


def test_run_is_reproducible_from_manifest(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out-dir", str(a)]) == 0
    assert main(["run", "--config", str(a / "manifest.json"), "--out-dir", str(b)]) == 0
    assert _sha(a / "ou_trajectory.csv") == _sha(b / "ou_trajectory.csv")


def test_seed_flag_changes_output(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", "--config", cfg, "--out-dir", str(a)])
    main(["--seed", "8", "run", "--config", cfg, "--out-dir", str(b)])
    assert _sha(a / "ou_trajectory.csv") != _sha(b / "ou_trajectory.csv")


def test_out_dir_from_environment(cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("HARMONIC_EM_OUT_DIR", str(tmp_path / "env"))
    assert main(["run", "--config", cfg]) == 0
    assert (tmp_path / "env" / "ou_trajectory.csv").exists()


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[sampler]\nstifness = 2\n")
    assert main(["run", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert "stifness" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == 3
    assert main(["diagnose", "nope", "--out-dir", str(tmp_path)]) == 2
    assert main(["frobnicate"]) == 2


def test_analyze_outputs(cfg, tmp_path):
    out = tmp_path / "a"
    main(["run", "--config", cfg, "--out-dir", str(out)])
    assert main(["analyze", str(out / "ou_trajectory.csv"), "--out-dir", str(out), "--max-lag", "10"]) == 0
    for name in ("rg.csv", "acf.csv", "tau.csv", "corr.mat", "dist.mat"):
        assert (out / name).exists(), name
    C = read_matrix(str(out / "corr.mat"))
    assert C.shape == (4, 4)


def test_analyze_malformed_file(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("not,a,trajectory\n1,2\n")
    assert main(["analyze", str(p), "--out-dir", str(tmp_path)]) == 3


def test_diagnose_noise_fusion(tmp_path):
    assert main(["diagnose", "noise-fusion", "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "diagnose_noise-fusion.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines[1:]]
    assert recs and all(r["verdict"] == "PASS" for r in recs)


def test_lattice_run_worker_invariant(tmp_path):
    text = OU + "\n[lattice]\nN = 6\nB = 3\npasses = 4\n\n[glue]\nkind = adjacent\nk = 1.0\n"
    p = tmp_path / "lat.ini"
    p.write_text(text)
    digests = []
    for w in (1, 4):
        out = tmp_path / f"w{w}"
        assert main(["run", "--config", str(p), "--workers", str(w), "--out-dir", str(out)]) == 0
        files = sorted(f for f in os.listdir(out) if f.endswith(".csv"))
        digests.append([_sha(out / f) for f in files])
    assert digests[0] == digests[1]
