import csv
import json
from pathlib import Path

import numpy as np
import pytest

from tcri import cli
from tcri.config import ConfigError, dump_config, parse_config
from tcri.scm import load_dataset
from tcri.trainer import History

SIM = """
[data]
generator = linear_sim
n = 5000
seed = 0
"""

SCM = """
[data]
generator = anticausal
n = 300
seed = 1

[arch]
backbone = linear
m = 2
o = 2
"""


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


def write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def train_cfg(tmp_path, extra: str, name="cfg.ini", base=SCM) -> Path:
    return write(tmp_path / name, base + "\n[train]\n" + extra)


@pytest.fixture()
def scm_data(tmp_path):
    cfg = write(tmp_path / "data.ini", SCM)
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def files_of(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


# ------------------------------------------------------------------ config


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="lerning_rate"):
        parse_config("[train]\nlerning_rate = 0.1\n")


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="optim"):
        parse_config("[optim]\nlr = 0.1\n")


def test_bad_value_names_field():
    with pytest.raises(ConfigError, match="train.steps"):
        parse_config("[train]\nsteps = many\n")


def test_config_roundtrip():
    cfg = parse_config(SCM + "\n[train]\nbeta = 10\nuse_tic = false\n[sweep]\nbeta = 0.1,1\n")
    again = parse_config(dump_config(cfg))
    assert again.as_dict() == cfg.as_dict()
    assert again.train_config().use_tic is False


def test_cli_reports_unknown_key(tmp_path, capsys):
    cfg = write(tmp_path / "c.ini", "[data]\ngenerator = linear_sim\nsigma = 0.1\n")
    code, out = run(["simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code != 0
    assert "sigma" in out.err


# ------------------------------------------------------------------ simulate


def test_simulate_eq8_defaults(tmp_path, capsys):
    cfg = write(tmp_path / "sim.ini", SIM)
    code, out = run(["simulate", "--config", cfg, "--out", tmp_path / "a"], capsys)
    assert code == 0
    bins = sorted((tmp_path / "a").glob("domain_*.bin"))
    assert len(bins) == 2
    for p in bins:
        assert load_dataset(p.with_suffix("")).n == 5000
    assert "n=5000" in out.out


def test_simulate_is_byte_identical(tmp_path):
    cfg = write(tmp_path / "sim.ini", SIM)
    run(["simulate", "--config", cfg, "--out", tmp_path / "a"])
    run(["simulate", "--config", cfg, "--out", tmp_path / "b"])
    a, b = files_of(tmp_path / "a"), files_of(tmp_path / "b")
    assert a.keys() == b.keys()
    for name in a:
        if name != "manifest.json":
            assert a[name] == b[name], name
    ma, mb = (json.loads(x["manifest.json"]) for x in (a, b))
    ma.pop("duration_s"), mb.pop("duration_s")
    assert ma == mb


def test_simulate_missing_generator_writes_nothing(tmp_path, capsys):
    cfg = write(tmp_path / "c.ini", "[data]\nn = 100\n")
    code, out = run(["simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code != 0
    assert "generator" in out.err
    assert not (tmp_path / "o").exists()


def test_simulate_missing_config_file(tmp_path, capsys):
    code, out = run(["simulate", "--config", tmp_path / "nope.ini", "--out", tmp_path / "o"], capsys)
    assert code != 0 and "not found" in out.err


def test_simulate_prints_audit(tmp_path, capsys):
    cfg = write(tmp_path / "c.ini", SCM)
    code, out = run(["simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 0
    assert out.out.count("latent partial corr") == 3
    assert "P(y=1)" in out.out


# ------------------------------------------------------------------ train


def test_erm_equals_beta_zero_history(tmp_path, scm_data):
    erm = train_cfg(tmp_path, "objective = erm\nsteps = 40\nlr = 0.05\nseed = 3\n", "erm.ini")
    t0 = train_cfg(tmp_path, "objective = tcri_hsic\nbeta = 0\nsteps = 40\nlr = 0.05\nseed = 3\n", "t0.ini")
    assert cli.main(["train", "--config", str(erm), "--data", str(scm_data), "--out", str(tmp_path / "r_erm")]) == 0
    assert cli.main(["train", "--config", str(t0), "--data", str(scm_data), "--out", str(tmp_path / "r_t0")]) == 0
    a = (tmp_path / "r_erm" / "history.csv").read_bytes()
    b = (tmp_path / "r_t0" / "history.csv").read_bytes()
    assert a == b
    assert len(History.read_csv(tmp_path / "r_erm" / "history.csv")) == 40


def test_train_rerun_byte_identical(tmp_path, scm_data):
    cfg = train_cfg(tmp_path, "objective = tcri_hsic\nbeta = 1\nsteps = 20\neval_interval = 10\ntest_domain = 2\n")
    for name in ("r1", "r2"):
        assert cli.main(["train", "--config", str(cfg), "--data", str(scm_data), "--out", str(tmp_path / name)]) == 0
    a, b = files_of(tmp_path / "r1"), files_of(tmp_path / "r2")
    assert a.keys() == b.keys()
    assert {k for k in a if a[k] != b[k]} <= {"manifest.json"}
    assert "checkpoints/step_000010.bin" in a and "target/test.bin" in a


def test_train_does_not_touch_inputs(tmp_path, scm_data):
    before = files_of(scm_data)
    cfg = train_cfg(tmp_path, "steps = 5\n")
    cli.main(["train", "--config", str(cfg), "--data", str(scm_data), "--out", str(tmp_path / "r")])
    assert files_of(scm_data) == before


def test_interrupted_run_leaves_partial_history(tmp_path, scm_data, monkeypatch):
    cfg = train_cfg(tmp_path, "objective = tcri_hsic\nbeta = 1\nsteps = 50\neval_interval = 10\n")
    real = cli.save_checkpoint
    calls = []

    def flaky(params, path, step, cfg_hash=""):
        calls.append(step)
        if len(calls) == 3:
            raise KeyboardInterrupt
        real(params, path, step, cfg_hash)

    monkeypatch.setattr(cli, "save_checkpoint", flaky)
    with pytest.raises(KeyboardInterrupt):
        cli.main(["train", "--config", str(cfg), "--data", str(scm_data), "--out", str(tmp_path / "r")])
    h = History.read_csv(tmp_path / "r" / "history.csv")
    assert len(h) == 30
    assert list(h.column("step")) == list(range(30))
    assert np.all(np.isfinite(h.column("loss")))


def test_domain_mismatch_is_error(tmp_path, scm_data, capsys):
    cfg = write(tmp_path / "c.ini", SCM.replace("n = 300", "n = 300\nzc_scales = 1,1") + "\n[train]\nsteps = 2\n")
    code, out = run(["train", "--config", cfg, "--data", scm_data, "--out", tmp_path / "r"], capsys)
    assert code != 0
    assert "2 domains" in out.err and "holds 3" in out.err


def test_bad_test_domain(tmp_path, scm_data, capsys):
    cfg = train_cfg(tmp_path, "steps = 2\ntest_domain = 7\n")
    code, out = run(["train", "--config", cfg, "--data", scm_data, "--out", tmp_path / "r"], capsys)
    assert code != 0 and "test_domain" in out.err


# ------------------------------------------------------------------ sweep / evaluate / report


def test_sweep_over_four_betas(tmp_path, scm_data, capsys):
    cfg = write(
        tmp_path / "sw.ini",
        SCM + "\n[train]\nobjective = tcri_hsic\nsteps = 6\neval_interval = 3\n[sweep]\nbeta = 0.1,1,10,100\ntest_domains = 0\n",
    )
    code, _ = run(["sweep", "--config", cfg, "--data", scm_data, "--out", tmp_path / "sw"], capsys)
    assert code == 0
    manifests = sorted((tmp_path / "sw" / "runs").glob("*/manifest.json"))
    assert len(manifests) == 4
    betas = sorted(json.loads(m.read_text())["train_config"]["beta"] for m in manifests)
    assert betas == [0.1, 1.0, 10.0, 100.0]


def _lodo_runs(tmp_path, scm_data, objective="erm"):
    runs = []
    for t in range(3):
        cfg = train_cfg(tmp_path, f"objective = {objective}\nbeta = 1\nsteps = 30\neval_interval = 10\ntest_domain = {t}\n", f"lodo{t}.ini")
        out = tmp_path / f"{objective}_{t}"
        assert cli.main(["train", "--config", str(cfg), "--data", str(scm_data), "--out", str(out)]) == 0
        runs.append(out)
    return runs


def test_evaluate_three_lodo_runs(tmp_path, scm_data, capsys):
    runs = _lodo_runs(tmp_path, scm_data, "tcri_hsic")
    code, out = run(["evaluate", "--runs", *runs, "--selection", "source_acc", "--selection", "tcri", "--tic", "--out", tmp_path / "ev"], capsys)
    assert code == 0
    with open(tmp_path / "ev" / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    src = [r for r in rows if r["method"] == "source_acc"]
    assert sorted(int(r["test_domain"]) for r in src) == [0, 1, 2]
    assert {r["method"] for r in rows} == {"source_acc", "tcri"}
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
    for method in ("source_acc", "tcri"):
        accs = summary[method]["per_domain"]
        assert summary[method]["worst_case"] == pytest.approx(min(accs))
        assert summary[method]["average"] == pytest.approx(np.mean(accs))
    assert "worst" in out.out
    tic = (tmp_path / "ev" / "tic.csv").read_text().splitlines()
    assert len(tic) == 1 + 6
    assert len(tic[0].split(",")) == 3 + 3 + 9


def test_evaluate_oracle_needs_target(tmp_path, scm_data, capsys):
    cfg = train_cfg(tmp_path, "steps = 10\neval_interval = 5\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(scm_data), "--out", str(tmp_path / "r")]) == 0
    code, out = run(["evaluate", "--runs", tmp_path / "r", "--selection", "oracle", "--out", tmp_path / "ev"], capsys)
    assert code != 0
    assert "oracle" in out.err and "target" in out.err


def test_evaluate_is_byte_identical(tmp_path, scm_data):
    runs = _lodo_runs(tmp_path, scm_data)
    for name in ("e1", "e2"):
        assert cli.main(["evaluate", "--runs", *map(str, runs), "--selection", "oracle", "--out", str(tmp_path / name)]) == 0
    assert files_of(tmp_path / "e1") == files_of(tmp_path / "e2")


def test_report_table2_prints_weights(tmp_path, capsys):
    cfg = write(tmp_path / "sim.ini", SIM.replace("n = 5000", "n = 500"))
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    tcfg = write(
        tmp_path / "t.ini",
        SIM.replace("n = 5000", "n = 500")
        + "[arch]\nbackbone = linear\nrep_bias = false\n[train]\nobjective = erm\nfreeze_theta_c = true\nsteps = 20\nlr = 0.5\n",
    )
    assert cli.main(["train", "--config", str(tcfg), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    code, out = run(["report", "--mode", "table2", "--runs", tmp_path / "r"], capsys)
    assert code == 0
    lines = out.out.splitlines()
    assert "w(z_c)" in lines[0] and "w(z_e)" in lines[0]
    assert lines[1].startswith("erm")
    assert len(lines[1].split()) == 3
    assert lines[2].startswith("oracle")
    oracle = float(lines[2].split()[-2])
    assert abs(oracle - 1.0) < 0.15


def test_report_summary(tmp_path, scm_data, capsys):
    runs = _lodo_runs(tmp_path, scm_data)
    assert cli.main(["evaluate", "--runs", *map(str, runs), "--out", str(tmp_path / "ev")]) == 0
    capsys.readouterr()
    code, out = run(["report", "--runs", tmp_path / "ev"], capsys)
    assert code == 0
    assert "erm/source_acc" in out.out
