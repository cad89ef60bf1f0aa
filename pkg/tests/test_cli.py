"""End-to-end CLI tests: subcommands, exit codes, reproducible outputs."""

import csv
import json
import math

import pytest

from fvlab.cli import main

PURE_DEATH_MODEL = {"type": "pure_death", "rate": 1.0}


def write_config(tmp_path, name="cfg.json", **overrides):
    spec = {
        "N": 500, "theta": 0.5, "T": 3.0, "seed": 77,
        "model": PURE_DEATH_MODEL,
        "test_functions": ["alive"],
        "replicas": 5,
    }
    spec.update(overrides)
    spec = {k: v for k, v in spec.items() if v is not None}
    path = tmp_path / name
    path.write_text(json.dumps(spec))
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def test_simulate_happy_path(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    payload = json.loads((out / "records.json").read_text())
    assert len(payload["records"]) == 5
    rows = read_csv(out / "records.csv")
    assert len(rows) == 6  # header + 5 replicas
    assert rows[0][:4] == ["replica", "p_hat", "resample_count", "cost_segments"]
    assert "mean_p_hat" in capsys.readouterr().out


def test_simulate_rejects_k_at_least_n(tmp_path, capsys):
    cfg = write_config(tmp_path, K=500, theta=None)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "1 <= K <= N-1" in capsys.readouterr().err


def test_simulate_rejects_missing_seed(tmp_path, capsys):
    cfg = write_config(tmp_path, seed=None)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "seed" in capsys.readouterr().err


def test_simulate_engine_error_exit_two(tmp_path):
    cfg = write_config(tmp_path, model={"type": "pure_death", "rate": 200.0},
                       branch_ceiling=5, N=50)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_simulate_byte_identical_reruns(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["simulate", "--config", str(cfg), "--out", str(out2)]) == 0
    for name in ("records.json", "records.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

def test_oracle_pure_death_report(tmp_path):
    cfg = write_config(tmp_path, oracle={"curve_points": 31})
    out = tmp_path / "out"
    assert main(["oracle", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "oracle_report.json").read_text())
    assert report["quantiles"]["j_max"] == 4
    for j, tj in enumerate(report["quantiles"]["t_levels"], start=1):
        assert tj == pytest.approx(j * math.log(2), abs=1e-9)
    obs = report["observables"]["alive"]
    assert obs["sigma2_sync"] == pytest.approx(obs["sigma2_sync_alt"], rel=1e-10)
    curve = read_csv(out / "survival_curve.csv")
    assert len(curve) == 32
    assert float(curve[1][1]) == 1.0  # p_0


def test_oracle_two_state_emits_matching_variance_formulations(tmp_path):
    cfg = write_config(tmp_path, T=1.0, model={
        "type": "ctmc", "sub_generator": [[-1.5, 1.0], [1.0, -3.0]],
        "initial_law": [1.0, 0.0]})
    out = tmp_path / "out"
    assert main(["oracle", "--config", str(cfg), "--out", str(out)]) == 0
    obs = json.loads((out / "oracle_report.json").read_text())["observables"]["alive"]
    assert obs["sigma2_sync"] == pytest.approx(obs["sigma2_sync_alt"], rel=1e-10)
    assert obs["sigma2_classical"] > 0


def test_oracle_refuses_diffusion(tmp_path, capsys):
    cfg = write_config(tmp_path, model={
        "type": "diffusion", "drift": {"name": "zero"}, "diffusion_coeff": 1.0,
        "step_size": 0.01, "box": [-1, 1], "initial": {"kind": "point", "x": 0.0}})
    assert main(["oracle", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    assert "no exact oracle" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

def test_validate_clean_run_exits_zero(tmp_path, capsys):
    # M=10 is below the variance threshold: those criteria are skipped, the
    # sharp ones (quantiles, jmax, L2, cost) still run at N = 10^4
    cfg = write_config(tmp_path, N=10_000, replicas=10, seed=20240901)
    out = tmp_path / "out"
    assert main(["validate", "--config", str(cfg), "--out", str(out)]) == 0
    captured = capsys.readouterr()
    assert "skipped" in captured.err
    payload = json.loads((out / "validation.json").read_text())
    names = {c["name"]: c for c in payload["checks"]}
    assert names["p_variance_window"]["passed"] is None
    assert names["jmax_match"]["passed"] is True
    assert names["quantile_convergence"]["passed"] is True
    assert names["cost_model[synchronized]"]["passed"] is True


def test_validate_mismatched_theta_exits_four(tmp_path):
    # engine runs classical K=1 while the oracle side uses theta=0.5:
    # the resampling count cannot match the quantile grid
    cfg = write_config(tmp_path, N=2000, K=1, replicas=10, seed=20240902)
    out = tmp_path / "out"
    assert main(["validate", "--config", str(cfg), "--out", str(out)]) == 4
    payload = json.loads((out / "validation.json").read_text())
    names = {c["name"]: c for c in payload["checks"]}
    assert names["jmax_match"]["passed"] is False
    # the summary is still written in full on failure
    assert payload["summary"]["n_replicas"] == 10


def test_validate_refuses_diffusion(tmp_path):
    cfg = write_config(tmp_path, model={
        "type": "diffusion", "drift": {"name": "zero"}, "diffusion_coeff": 1.0,
        "step_size": 0.01, "box": [-1, 1], "initial": {"kind": "point", "x": 0.0}})
    assert main(["validate", "--config", str(cfg), "--out", str(tmp_path)]) == 3


# ---------------------------------------------------------------------------
# sweep-theta
# ---------------------------------------------------------------------------

def test_sweep_theta_default_grid(tmp_path):
    cfg = write_config(tmp_path, N=10_000,
                       sweep={"start": 0.1, "stop": 0.9, "step": 0.1})
    out = tmp_path / "out"
    assert main(["sweep-theta", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "theta_sweep.csv")
    assert len(rows) == 10  # header + 9 thetas
    header = rows[0]
    h_col = header.index("h")
    hs = [float(r[h_col]) for r in rows[1:]]
    assert all(b <= a + 1e-12 for a, b in zip(hs, hs[1:]))
    theta_col = header.index("theta")
    cost_col = header.index("cost_sync")
    classical_col = header.index("cost_classical")
    for row in rows[1:]:
        assert float(row[cost_col]) < float(row[classical_col])
        if float(row[theta_col]) == 0.5:
            assert float(row[cost_col]) / 10_000 == pytest.approx(3.0, rel=1e-12)


def test_sweep_theta_flags_near_integer_rows(tmp_path):
    # theta = e^{-1} makes log p_T / log theta = 3 exactly for p_T = e^{-3}
    cfg = write_config(tmp_path, sweep={"grid": [0.3, math.exp(-1), 0.5]})
    out = tmp_path / "out"
    assert main(["sweep-theta", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "theta_sweep.csv")
    assert len(rows) == 4
    flags_col = rows[0].index("flags")
    flagged = {float(r[0]): r[flags_col] for r in rows[1:]}
    assert flagged[0.3] == ""
    assert "near_integer" in flagged[math.exp(-1)] or "warned" in flagged[math.exp(-1)]
    assert flagged[0.5] == ""


def test_sweep_rejects_bad_grid(tmp_path):
    cfg = write_config(tmp_path, sweep={"grid": [0.0, 0.5]})
    assert main(["sweep-theta", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_unreadable_config(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path)]) == 1
    assert "cannot read config" in capsys.readouterr().err
