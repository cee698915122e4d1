"""End-to-end tests of the experiment runner."""

import json

import pytest

from gmstruct.cli import main

QUICK = """
system.family = uniform
system.lambda_s = 0.25
system.coupling = 0.0
pliss.c = 0.5
pliss.sigma = 0.51
pliss.horizon = 2000
pliss.grid = 1000
inducing.delta0 = 0.02
inducing.R0 = 20
inducing.n_max = 200
inducing.resolution = 6.103515625e-05   # 2^-14
stats.n_max = 100
stats.orbit_len = 10000
stats.ensemble = 1000
stats.eps = 0.1
seed = 0
"""


@pytest.fixture
def quick_cfg(tmp_path):
    path = tmp_path / "quick.cfg"
    path.write_text(QUICK)
    return str(path)


def _run(*argv):
    return main(list(argv))


# ---------------------------------------------------------------------------
# config errors -> exit 2


def test_exit_2_on_bad_sigma(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(QUICK.replace("pliss.sigma = 0.51", "pliss.sigma = 1.2"))
    assert _run("tails", "--config", str(path), "--out", str(tmp_path / "o")) == 2
    assert "pliss.sigma" in capsys.readouterr().err


def test_exit_2_on_missing_config(tmp_path):
    assert _run("tails", "--config", str(tmp_path / "nope.cfg"),
                "--out", str(tmp_path / "o")) == 2


def test_exit_2_on_bad_seed_flag(quick_cfg, tmp_path):
    assert _run("tails", "--config", quick_cfg, "--out", str(tmp_path / "o"),
                "--seed", "-3") == 2


# ---------------------------------------------------------------------------
# single stages


def test_tails_stage_artifacts(quick_cfg, tmp_path):
    out = tmp_path / "o"
    assert _run("tails", "--config", quick_cfg, "--out", str(out)) == 0
    assert (out / "tail_E.csv").exists()
    man = json.loads((out / "manifest.json").read_text())
    assert man["stages"]["tails"]["status"] == "ok"
    assert "tail_E.csv" in man["checksums"]
    assert man["config"]["pliss.sigma"] == 0.51
    # auto fields echoed with the rule that produced them
    assert "inducing.epsilon" in man["auto_resolutions"]


def test_report_partial_directory(quick_cfg, tmp_path):
    out = tmp_path / "o"
    assert _run("tails", "--config", quick_cfg, "--out", str(out)) == 0
    assert _run("report", "--config", quick_cfg, "--out", str(out)) == 0
    rep = json.loads((out / "report.json").read_text())
    assert "induce" in rep["pending"] and "limits" in rep["pending"]


def test_report_empty_directory(quick_cfg, tmp_path):
    out = tmp_path / "empty"
    out.mkdir()
    code = _run("report", "--config", quick_cfg, "--out", str(out))
    assert code == 3
    man = json.loads((out / "manifest.json").read_text())
    assert man["failed_stage"] == "report"


# ---------------------------------------------------------------------------
# full pipeline


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("full")
    cfg = tmp / "quick.cfg"
    cfg.write_text(QUICK)
    out = tmp / "o"
    code = main(["all", "--config", str(cfg), "--out", str(out)])
    return code, out


def test_all_succeeds(full_run):
    code, out = full_run
    assert code == 0
    for name in ("tail_E.csv", "tail_R.csv", "structure.json", "flow.json",
                 "verify.json", "regularity.json", "correlation.csv",
                 "clt.json", "ld.csv", "fits.json", "report.json",
                 "report.txt", "manifest.json"):
        assert (out / name).exists(), name


def test_report_contents(full_run):
    _, out = full_run
    rep = json.loads((out / "report.json").read_text())
    assert rep["pending"] == []
    assert rep["verification"]["P1_markov_violations"] == 0
    assert rep["checks"]["P2_beta_near_lambda_s"]
    assert rep["ks_distance"] <= 0.08
    text = (out / "report.txt").read_text()
    assert "checks:" in text


def test_manifest_wall_times(full_run):
    _, out = full_run
    man = json.loads((out / "manifest.json").read_text())
    assert man["failed_stage"] is None
    for stage in ("tails", "induce", "verify", "regularity", "limits", "report"):
        assert man["stages"][stage]["wall_time_s"] >= 0.0


def test_reproducibility_checksums(full_run, quick_cfg, tmp_path):
    _, out1 = full_run
    out2 = tmp_path / "again"
    assert _run("all", "--config", quick_cfg, "--out", str(out2)) == 0
    man1 = json.loads((out1 / "manifest.json").read_text())
    man2 = json.loads((out2 / "manifest.json").read_text())
    assert man1["checksums"] == man2["checksums"]


def test_seed_override_changes_stats(full_run, quick_cfg, tmp_path):
    _, out1 = full_run
    out2 = tmp_path / "seeded"
    assert _run("limits", "--config", quick_cfg, "--out", str(out2),
                "--seed", "42") == 0
    man1 = json.loads((out1 / "manifest.json").read_text())
    man2 = json.loads((out2 / "manifest.json").read_text())
    assert man1["checksums"]["clt.json"] != man2["checksums"]["clt.json"]


def test_report_check_exit_4(full_run, quick_cfg):
    # the quick uniform run cannot reach leftover < 1e-3 (renewal-rate bound),
    # so the threshold gate must fail
    _, out = full_run
    code = _run("report", "--config", quick_cfg, "--out", str(out), "--check")
    rep = json.loads((out / "report.json").read_text())
    if rep["all_checks_pass"]:
        assert code == 0
    else:
        assert code == 4


# ---------------------------------------------------------------------------
# numerical failure handling


def test_strict_escalates_nonconvergent(tmp_path, capsys):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(QUICK.replace("inducing.n_max = 200", "inducing.n_max = 25"))
    out = tmp_path / "o"
    assert _run("induce", "--config", str(cfg), "--out", str(out), "--strict") == 3
    man = json.loads((out / "manifest.json").read_text())
    assert man["failed_stage"] == "induce"
    assert man["stages"]["induce"]["status"] == "numerical-failure"
    # partial artifacts still written
    assert (out / "structure.json").exists()


def test_nonstrict_continues(tmp_path):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(QUICK.replace("inducing.n_max = 200", "inducing.n_max = 25"))
    out = tmp_path / "o"
    assert _run("induce", "--config", str(cfg), "--out", str(out)) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["failed_stage"] is None
