"""Replication-harness tests: determinism, aggregation math, CLT diagnostics."""

import math

import numpy as np
import pytest
from scipy import stats as sps

from fvlab import (CtmcModel, FVConfig, FVRunRecord, Tolerances, clt_report,
                   compute_oracle_report, cost_report, evaluate_criteria,
                   pure_death, run_replicas)

from conftest import PURE_DEATH_T, THETA


# ---------------------------------------------------------------------------
# run_replicas mechanics
# ---------------------------------------------------------------------------

def test_replicas_deterministic_and_order_stable():
    cfg = FVConfig(n_particles=200, horizon=3.0, seed=50, theta=0.5,
                   model=pure_death(1.0))
    a = run_replicas(cfg, 4)
    b = run_replicas(cfg, 4)
    assert a == b
    assert [rec.seed for rec in a] == [50, 51, 52, 53]


def test_replicas_parallel_matches_serial():
    cfg = FVConfig(n_particles=200, horizon=3.0, seed=60, theta=0.5,
                   model=pure_death(1.0))
    assert run_replicas(cfg, 6, n_jobs=2) == run_replicas(cfg, 6)


def test_replicas_identical_seeds_identical_records():
    from fvlab import run_fv
    cfg = FVConfig(n_particles=150, horizon=3.0, seed=61, theta=0.5,
                   model=pure_death(1.0))
    assert run_fv(cfg) == run_fv(cfg)


def test_replicas_require_two():
    cfg = FVConfig(n_particles=100, horizon=3.0, seed=62, theta=0.5,
                   model=pure_death(1.0))
    with pytest.raises(ValueError):
        run_replicas(cfg, 1)


def test_replica_errors_carry_index():
    cfg = FVConfig(n_particles=40, horizon=3.0, seed=63, theta=0.5,
                   model=pure_death(200.0), branch_ceiling=5)
    with pytest.raises(RuntimeError, match=r"replica 0 \(seed 63\)"):
        run_replicas(cfg, 3)


def test_zero_killing_replicas_all_one():
    m = CtmcModel([[-1.0, 1.0], [1.0, -1.0]], [0.5, 0.5])
    cfg = FVConfig(n_particles=100, horizon=1.0, seed=64, theta=0.5, model=m)
    recs = run_replicas(cfg, 10)
    assert all(rec.p_hat == 1.0 for rec in recs)


# ---------------------------------------------------------------------------
# aggregation math on synthetic records
# ---------------------------------------------------------------------------

def _synthetic_records(p_hats, p_T, n, branch_times=(), resample=4, cost=0):
    return [FVRunRecord(p_hat=p, gamma_hat={"alive": p},
                        eta_norm_hat={"alive": 1.0},
                        branch_times=list(branch_times),
                        resample_count=resample, cost_segments=cost,
                        alive_fraction_at_T=1.0, n_particles=n, n_killed=n // 2,
                        seed=i)
            for i, p in enumerate(p_hats)]


def test_clt_report_formulas_on_synthetic_records(pure_death_model):
    report = compute_oracle_report(pure_death_model, THETA, PURE_DEATH_T, ("alive",))
    p_T = report.p_T
    n = 10_000
    g = np.random.default_rng(65)
    p_hats = p_T + g.normal(0, 1e-3, size=200)
    taus = [math.log(2) + 0.01, 2 * math.log(2) - 0.02]
    recs = _synthetic_records(p_hats, p_T, n, branch_times=taus, resample=4, cost=123)
    cfg = FVConfig(n_particles=n, horizon=PURE_DEATH_T, seed=1, theta=THETA,
                   model=pure_death_model)
    s = clt_report(recs, report, cfg)

    scaled = math.sqrt(n) * (p_hats - p_T)
    assert s.var_scaled == pytest.approx(np.var(scaled, ddof=1), rel=1e-12)
    assert s.bias == pytest.approx(p_hats.mean() - p_T, rel=1e-9)
    lo, hi = s.ci95_var
    m = len(recs)
    assert lo == pytest.approx((m - 1) * s.var_scaled / sps.chi2.ppf(0.975, m - 1))
    assert hi == pytest.approx((m - 1) * s.var_scaled / sps.chi2.ppf(0.025, m - 1))
    assert lo < s.var_scaled < hi
    # every synthetic record has exactly 2 branch times; levels 3, 4 are empty
    assert s.tau_abs_dev[0] == pytest.approx(0.01, abs=1e-12)
    assert s.tau_abs_dev[1] == pytest.approx(0.02, abs=1e-12)
    assert math.isinf(s.tau_abs_dev[2]) and math.isinf(s.tau_abs_dev[3])
    assert s.jmax_match_frac == 1.0
    assert s.mse_scaled["alive"] == pytest.approx(
        n * np.mean((p_hats - p_T) ** 2), rel=1e-12)
    assert s.cost_mean == 123.0


def test_clt_report_warns_below_hundred(pure_death_model):
    report = compute_oracle_report(pure_death_model, THETA, PURE_DEATH_T, ("alive",))
    recs = _synthetic_records(np.full(10, report.p_T), report.p_T, 100)
    cfg = FVConfig(n_particles=100, horizon=PURE_DEATH_T, seed=1, theta=THETA,
                   model=pure_death_model)
    with pytest.warns(UserWarning, match="too few"):
        s = clt_report(recs, report, cfg)
    assert "insufficient_replicas_for_variance" in s.flags


# ---------------------------------------------------------------------------
# empirical invariants on the shared heavy batches
# ---------------------------------------------------------------------------

def test_pure_death_bias_within_four_standard_errors(batch_pure_death_1e4,
                                                     oracle_reports):
    config, records, _ = batch_pure_death_1e4
    report = oracle_reports["pure_death"]
    sigma2 = report.observables["alive"].sigma2_sync
    mean_p = np.mean([r.p_hat for r in records])
    limit = 4 * math.sqrt(sigma2 / (config.n_particles * len(records)))
    assert abs(mean_p - math.exp(-3.0)) <= limit


def test_pure_death_resample_count_concentrates(batch_pure_death_1e4):
    _, records, _ = batch_pure_death_1e4
    assert all(r.resample_count in (3, 4, 5) for r in records)


def test_pure_death_scaled_mse_below_plain_bound(batch_pure_death_1e4,
                                                 oracle_reports):
    # the second-moment bound itself, without the replica-noise allowance
    config, records, _ = batch_pure_death_1e4
    s = clt_report(records, oracle_reports["pure_death"], config)
    assert s.mse_scaled["alive"] <= 4.0


def test_pure_death_normality_moments(batch_pure_death_1e4, oracle_reports):
    config, records, _ = batch_pure_death_1e4
    s = clt_report(records, oracle_reports["pure_death"], config)
    skew, kurt = s.normality_stats
    assert abs(skew) <= 0.25
    assert abs(kurt) <= 0.5


def test_replica_independence(batch_pure_death_1e4):
    _, records, _ = batch_pure_death_1e4
    p = np.array([r.p_hat for r in records])
    corr = np.corrcoef(p[:-1], p[1:])[0, 1]
    assert abs(corr) <= 3 / math.sqrt(len(records))


def test_variance_consistency_as_n_doubles(batches_n_ladder, oracle_reports):
    report = oracle_reports["pure_death"]
    sigma2 = report.observables["alive"].sigma2_sync
    dist, halfwidth = {}, {}
    for n, (config, records) in batches_n_ladder.items():
        s = clt_report(records, report, config)
        dist[n] = abs(s.var_scaled - sigma2)
        halfwidth[n] = 0.5 * (s.ci95_var[1] - s.ci95_var[0])
    assert dist[5000] <= dist[2500] + halfwidth[2500]
    assert dist[10_000] <= dist[5000] + halfwidth[5000]


def test_eta_norm_variance_two_state(batch_two_state_1e4, oracle_reports):
    # normalized-ratio CLT for a non-trivial observable
    config, records = batch_two_state_1e4
    s = clt_report(records, oracle_reports["two_state"], config)
    target = s.eta_var_targets["state:0"]
    assert target > 0
    assert 0.8 * target <= s.eta_var_scaled["state:0"] <= 1.2 * target


# ---------------------------------------------------------------------------
# cost report and criteria evaluation
# ---------------------------------------------------------------------------

def test_cost_report_zero_killing_exactly_n():
    m = CtmcModel([[-1.0, 1.0], [1.0, -1.0]], [0.5, 0.5])
    cfg = FVConfig(n_particles=123, horizon=1.0, seed=66, theta=0.5, model=m)
    recs = run_replicas(cfg, 5)
    report = compute_oracle_report(m, 0.5, 1.0, ("alive",))
    c = cost_report(recs, report, cfg)
    assert c.mean_cost == 123.0
    assert c.predicted == 123.0
    assert c.rel_deviation == 0.0


def test_cost_report_classical_prediction(batch_pure_death_classical_1e3,
                                          oracle_reports):
    config, records = batch_pure_death_classical_1e3
    c = cost_report(records, oracle_reports["pure_death"], config)
    assert c.kind == "classical"
    assert c.predicted == pytest.approx(1000 * (1 + 3.0), rel=1e-12)
    assert abs(c.rel_deviation) <= 0.10


def test_evaluate_criteria_skips_variance_below_min_replicas(pure_death_model):
    report = compute_oracle_report(pure_death_model, THETA, PURE_DEATH_T, ("alive",))
    g = np.random.default_rng(67)
    p_hats = report.p_T + g.normal(0, 1.0, size=10)  # wild variance, tiny M
    taus = [j * math.log(2) for j in range(1, 5)]
    recs = _synthetic_records(p_hats, report.p_T, 10_000, branch_times=taus,
                              resample=4, cost=30_000)
    cfg = FVConfig(n_particles=10_000, horizon=PURE_DEATH_T, seed=1, theta=THETA,
                   model=pure_death_model)
    with pytest.warns(UserWarning):
        s = clt_report(recs, report, cfg)
    checks = {c.name: c for c in evaluate_criteria(
        s, cost_report(recs, report, cfg), report, cfg)}
    assert checks["p_variance_window"].passed is None
    assert checks["normality_skewness"].passed is None
    assert checks["jmax_match"].passed is True
    assert checks["cost_model[synchronized]"].passed is True


def test_evaluate_criteria_detects_failures(pure_death_model):
    report = compute_oracle_report(pure_death_model, THETA, PURE_DEATH_T, ("alive",))
    # correct mean but wrong branch count and miscalibrated cost
    p_hats = np.full(150, report.p_T) + np.random.default_rng(68).normal(
        0, math.sqrt(report.observables["alive"].sigma2_sync / 10_000), size=150)
    recs = _synthetic_records(p_hats, report.p_T, 10_000,
                              branch_times=[0.9, 1.9], resample=2, cost=50_000)
    cfg = FVConfig(n_particles=10_000, horizon=PURE_DEATH_T, seed=1, theta=THETA,
                   model=pure_death_model)
    s = clt_report(recs, report, cfg)
    checks = {c.name: c for c in evaluate_criteria(
        s, cost_report(recs, report, cfg), report, cfg)}
    assert checks["jmax_match"].passed is False
    assert checks["quantile_convergence"].passed is False
    assert checks["cost_model[synchronized]"].passed is False


def test_tolerances_defaults_match_policy():
    tol = Tolerances()
    assert tol.variance_rel == 0.20
    assert tol.bias_se == 4.0
    assert tol.tau_abs == 0.02
    assert tol.jmax_frac == 0.95
    assert tol.min_replicas_variance == 100
