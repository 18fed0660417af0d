"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line; the lines are printed in the
pytest terminal summary (see conftest.py) and also on stdout.  Run with

    pytest tests/test_acceptance.py -v
"""

import io
import json
import math
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from qlabayes.asymptotics import empirical_measure, gamma_matrices, identifiability_scan, invariant_density_1d
from qlabayes.cli import main as cli_main
from qlabayes.estimators import PriorDensity, bayes_adaptive, qmle, stage_posterior
from qlabayes.experiments import (
    LossPair,
    McConfig,
    information_for,
    moment_check,
    normality_check,
    run_monte_carlo,
    theorem1_check,
    two_sample_ks_check,
)
from qlabayes.loss import CUSTOM_LOSSES, check_A5, check_C1, indicator_loss, power_loss, validate_loss_class
from qlabayes.errors import A5NotSatisfiedError
from qlabayes.models import get_model
from qlabayes.qla import QuasiLikelihood
from qlabayes.simulator import PathConfig, derive_seed, simulate_long_path, simulate_observations

RESULTS = []
SEED = 20240607


def record(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def ou_data(n, seed, gamma=0.6):
    model, truth = get_model("OU")
    return model, truth, simulate_observations(model, truth, PathConfig.from_gamma(n, gamma, 10, seed))


# 1 ---------------------------------------------------------------------------------


def test_criterion_01_analytic_information():
    buf = io.StringIO()
    t0 = time.perf_counter()
    with redirect_stdout(buf):
        code = cli_main(["info", "--model", "OU"])
    elapsed = time.perf_counter() - t0
    doc = json.loads(buf.getvalue())
    cov = np.array(doc["limit_covariance"])
    ok = (code == 0 and abs(doc["gamma1"] - 2.0) <= 1e-6 and abs(doc["gamma2"] - 0.5) <= 1e-6
          and np.allclose(cov, np.diag([0.5, 2.0]), atol=1e-6, rtol=0) and elapsed < 1.0)
    record(1, ok, f"gamma1={doc['gamma1']:.10f} gamma2={doc['gamma2']:.10f} "
                  f"cov=diag({cov[0, 0]:.8f}, {cov[1, 1]:.8f}) time={elapsed:.3f}s")


# 2 ---------------------------------------------------------------------------------


def test_criterion_02_ergodic_average():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in ("OU", "BOU"):
        model, truth = get_model(name)
        path = simulate_long_path(model, truth, 5000.0, 0.01, seed=SEED)
        emp = gamma_matrices(model, truth, empirical_measure(path))
        ana = gamma_matrices(model, truth, invariant_density_1d(model, truth))
        r1 = emp.gamma1[0, 0] / ana.gamma1[0, 0] - 1
        r2 = emp.gamma2[0, 0] / ana.gamma2[0, 0] - 1
        ok &= abs(r1) < 0.05 and abs(r2) < 0.05
        parts.append(f"{name} rel.dev ({r1:+.4f}, {r2:+.4f})")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30.0
    record(2, ok, "; ".join(parts) + f"; time={elapsed:.2f}s")


# 3 ---------------------------------------------------------------------------------


def test_criterion_03_qmle_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for r in range(20):
        model, truth, obs = ou_data(5000, derive_seed(SEED, 3, r))
        res = qmle(model, obs)
        x = obs.values[:, 0]
        xp, dx = x[:-1], np.diff(x)
        t = float(np.clip(-np.sum(xp * dx) / (obs.h * np.sum(xp * xp)), 0.2, 5.0))
        s = float(np.clip(math.sqrt(np.sum((dx + obs.h * t * xp) ** 2) / (obs.n * obs.h)), 0.2, 5.0))
        worst = max(worst, abs(res.theta_hat[0][0] / s - 1), abs(res.theta_hat[1][0] / t - 1))
    elapsed = time.perf_counter() - t0
    record(3, worst < 1e-4 and elapsed < 30.0, f"max relative deviation {worst:.2e} over 20 datasets; time={elapsed:.2f}s")


# 4 ---------------------------------------------------------------------------------


def test_criterion_04_gradient():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for name in ("OU", "BOU"):
        model, truth = get_model(name)
        obs = simulate_observations(model, truth, PathConfig.from_gamma(200, 0.6, 10, SEED))
        ql = QuasiLikelihood(model, obs)
        for _ in range(20):
            s = rng.uniform(0.3, 4.9)
            t = rng.uniform(0.3, 4.9)
            g1, g2 = ql.gradient([s], [t])
            e1, e2 = 1e-6 * (1 + s), 1e-6 * (1 + t)
            fd1 = (ql.value([s + e1], [t]) - ql.value([s - e1], [t])) / (2 * e1)
            fd2 = (ql.value([s], [t + e2]) - ql.value([s], [t - e2])) / (2 * e2)
            worst = max(worst, abs(g1[0] - fd1) / max(abs(fd1), 1e-300), abs(g2[0] - fd2) / max(abs(fd2), 1e-300))
    record(4, worst < 1e-6, f"max relative error {worst:.2e} at 40 points (OU, BOU)")


# 5 ---------------------------------------------------------------------------------


def test_criterion_05_quadratic_identity():
    worst_cells = 0.0
    for r in range(10):
        model, truth, obs = ou_data(5000, derive_seed(SEED, 5, r))
        res = bayes_adaptive(model, obs, truth=truth, oracle_pilot=True)
        p1 = stage_posterior(model, obs, 1, PriorDensity.uniform(model.theta1_box), truth.theta2_star, res.windows[0])
        p2 = stage_posterior(model, obs, 2, PriorDensity.uniform(model.theta2_box), res.theta_tilde[0], res.windows[1])
        worst_cells = max(worst_cells,
                          abs(res.theta_tilde[0][0] - p1.mean[0]) / p1.grid.spacing[0],
                          abs(res.theta_tilde[1][0] - p2.mean[0]) / p2.grid.spacing[0])
    record(5, worst_cells <= 2.0, f"max |argmin - posterior mean| = {worst_cells:.3g} grid cells over 10 datasets")


# 6 ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def normality_report():
    cfg = McConfig(model="OU", gamma=0.6, n_list=(20_000,), replicates=400, base_seed=SEED, pilot="oracle",
                   losses=(LossPair("quadratic", "power:2", "power:2"),))
    return run_monte_carlo(cfg)


def test_criterion_06_normality(normality_report):
    rep = normality_report
    bands = ((0.40, 0.60), (1.5, 2.5))
    parts, ok = [], True
    for eid in ("quadratic", "qmle"):
        passed, st = normality_check(rep, estimator=eid, bands=bands, ks_c=1.63, cross_limit=0.10)
        ok &= passed
        c1, c2 = st["coords"]
        parts.append(f"{eid}: var=({c1['var']:.3f}, {c2['var']:.3f}) ks=({c1['ks']:.4f}, {c2['ks']:.4f}) "
                     f"[crit {c1['ks_crit']:.4f}] rho={st['cross_corr']:+.3f} mean=({c1['mean']:+.3f}, {c2['mean']:+.3f})")
    record(6, ok and rep.valid, "; ".join(parts))


# 7, 8 ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def loss_report():
    cfg = McConfig(model="OU", gamma=0.6, n_list=(2000, 8000, 32000), replicates=200, base_seed=SEED,
                   pilot="oracle", losses=(LossPair("power2", "power:2", "power:2"),
                                           LossPair("power1", "power:1", "power:1"),
                                           LossPair("indicator1", "indicator:1", "indicator:1")))
    return run_monte_carlo(cfg)


def test_criterion_07_loss_independence(loss_report):
    ok1, rows = theorem1_check(loss_report, threshold=0.15, slack=0.10, statistic="median")
    ok2, ks_rows = two_sample_ks_check(loss_report)
    worst = max(r["by_n"][-1] for r in rows)
    max_ks = max(r["ks"] for r in ks_rows)
    bad = [f"{r['a']}/{r['b']} u{r['coord']} {np.round(r['by_n'], 4).tolist()}" for r in rows if not r["pass"]]
    detail = (f"largest median discrepancy at n=32000: {worst:.4f} (< 0.15); "
              f"max two-sample KS {max_ks:.4f} (< {ks_rows[0]['crit']:.4f})")
    if bad:
        detail += "; failing: " + ", ".join(bad)
    record(7, ok1 and ok2 and loss_report.valid, detail)


def test_criterion_08_moments(loss_report):
    parts, ok = [], True
    for eid in ("power2", "power1", "indicator1"):
        mom = moment_check(loss_report, estimator=eid, functions=["u1^2", "u2^4"])
        e_u1sq = mom["table"][0]["by_n"][-1]
        e_u2_4 = mom["table"][1]["by_n"][-1]
        good = mom["abs4_ratio"] < 3 and 0.4 <= e_u1sq <= 0.6 and 8 <= e_u2_4 <= 16
        ok &= good
        parts.append(f"{eid}: E|u|^4 max/min={mom['abs4_ratio']:.3f} E u1^2={e_u1sq:.3f} E u2^4={e_u2_4:.2f}")
    record(8, ok, "; ".join(parts))


# 9 ---------------------------------------------------------------------------------


def test_criterion_09_identifiability():
    model, truth = get_model("OU")
    rep = identifiability_scan(model, truth, invariant_density_1d(model, truth))
    ok = (float(np.max(rep.y1)) <= 1e-8 and float(np.max(rep.y2)) <= 1e-8
          and rep.zeros1 == [[1.0]] and rep.zeros2 == [[1.0]] and abs(rep.chi2 / 0.25 - 1) <= 0.05)
    record(9, ok, f"max Y1={np.max(rep.y1):.2e} max Y2={np.max(rep.y2):.2e} zeros={rep.zeros1},{rep.zeros2} "
                  f"chi2={rep.chi2:.6f}")


# 10 --------------------------------------------------------------------------------


def _full_check(w, p):
    rep = validate_loss_class(w, p)
    c1 = check_C1(w, 0.5, 4.0)
    try:
        check_A5(w, 1.0)
        a5 = True
    except A5NotSatisfiedError:
        a5 = False
    return rep, c1, a5


def test_criterion_10_loss_class():
    parts, ok = [], True
    for w, p in ((power_loss(2), 2.0), (indicator_loss([1.0]), 0.0), (indicator_loss([1.0, 1.0]), 0.0)):
        rep, c1, a5 = _full_check(w, p)
        good = rep.passed and c1.holds and a5
        ok &= good
        parts.append(f"{w.name} {'passes' if good else 'FAILS'}")
    for name, prop in (("asymmetric", "property2"), ("truncated", "property3")):
        w = CUSTOM_LOSSES[name]()
        rep, c1, a5 = _full_check(w, 1.0 if name == "asymmetric" else 2.0)
        named = prop in rep.witnesses and not rep.checks[prop]
        ok &= named and not rep.passed
        parts.append(f"{name} fails {prop} with witness {json.dumps(rep.witnesses.get(prop))[:80]}")
    record(10, ok, "; ".join(parts))


# 11 --------------------------------------------------------------------------------


def test_criterion_11_reproducibility(tmp_path):
    conf = tmp_path / "mc.toml"
    conf.write_text('[mc]\nn_list = [500, 1000]\nreplicates = 50\nseed = 20240607\nlosses = [\n'
                    '  {id = "power2", loss1 = "power:2", loss2 = "power:2"},\n'
                    '  {id = "indicator1", loss1 = "indicator:1", loss2 = "indicator:1"},\n]\n')
    for d in ("first", "second"):
        with redirect_stdout(io.StringIO()):
            assert cli_main(["mc", "--config", str(conf), "--output-dir", str(tmp_path / d)]) == 0
    same = all((tmp_path / "first" / f).read_bytes() == (tmp_path / "second" / f).read_bytes()
               for f in ("report.json", "summary.csv"))
    size = (tmp_path / "first" / "report.json").stat().st_size
    record(11, same, f"report.json ({size} bytes) and summary.csv byte-identical across two runs")
