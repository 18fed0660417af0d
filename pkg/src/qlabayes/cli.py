"""Command line entry point: ``qlabayes {simulate,estimate,mc,info,validate-loss}``.

Settings come from three layers, later ones winning: built-in defaults, an
optional TOML config file (``--config``), and command line flags.  The config
file has an optional ``[model]`` table shared by all subcommands and one table
per subcommand, e.g.::

    output_dir = "runs/ou"

    [model]
    name = "OU"
    theta1 = [1.0]
    theta2 = [1.0]

    [mc]
    n_list = [2000, 8000, 32000]
    replicates = 200
    seed = 20240607
    losses = [
      {id = "power2", loss1 = "power:2", loss2 = "power:2"},
      {id = "indicator1", loss1 = "indicator:1", loss2 = "indicator:1"},
    ]

A custom one-dimensional model is given by coefficient tables,
``drift = [c0, c1, ...]`` for a(x, t2) = -t2 sum c_k x^k and
``diff = [d0, d1]`` for b(x, t1) = t1 (d0 + d1 cos x).

Exit codes: 0 success, 1 domain error (bad data, failed estimation, missing
file), 2 usage error (bad flags or config).  The only environment variable
read is ``QLA_THREADS``, the Monte Carlo worker count.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import _backend
from .asymptotics import gamma_matrices, identifiability_scan, invariant_density_1d, limit_covariance
from .errors import A5NotSatisfiedError, QlaError
from .estimators import PriorDensity, bayes_adaptive, qmle
from .experiments import (
    QMLE_ID,
    LossPair,
    McConfig,
    moment_check,
    normality_check,
    run_monte_carlo,
    theorem1_check,
    two_sample_ks_check,
)
from .loss import check_A5, check_C1, parse_loss, validate_loss_class
from .models import TrueParameter, builtin_models, get_model, poly_trig_model
from .simulator import PathConfig, read_csv, simulate_observations, write_csv

log = logging.getLogger("qlabayes")

SUBCOMMANDS = ("simulate", "estimate", "mc", "info", "validate-loss")

TOP_KEYS = {"output_dir", "verbosity"}
MODEL_KEYS = {"name", "drift", "diff", "theta1", "theta2", "x0"}
DEFAULTS = {
    "simulate": {"n": None, "gamma": 0.6, "substeps": 10, "seed": 0, "out": "observations.csv"},
    "estimate": {
        "data": None,
        "loss1": "power:2",
        "loss2": "power:2",
        "prior": "uniform",
        "pilot": None,
        "oracle_pilot": False,
        "grid_nodes": None,
    },
    "mc": {
        "gamma": 0.6,
        "n_list": [2000],
        "replicates": 50,
        "losses": [{"id": "quadratic", "loss1": "power:2", "loss2": "power:2"}],
        "prior": "uniform",
        "pilot": "oracle",
        "report_fixed_pilot": False,
        "seed": 20240607,
        "substeps": 10,
        "moments": ["u1^2", "u2^2", "u1^4", "u2^4", "u1*u2"],
        "discrepancy_threshold": 0.15,
        "slack": 0.10,
        "discrepancy_statistic": "median",
        "variance_band": [0.75, 1.33],
        "ks_c": 1.63,
    },
    "info": {"points": 97},
    "validate-loss": {"loss": None, "eta": 0.5, "r0": 4.0, "M": 1.0, "p": None, "probe_count": 4000, "seed": 0,
                      "dim": None},
}
REQUIRED = {"simulate": ("n",), "estimate": ("data",), "validate-loss": ("loss",)}


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


@dataclass
class RunConfig:
    subcommand: str
    model: dict
    params: dict
    output_dir: Path = Path(".")
    verbosity: int = 0
    config_file: Optional[str] = None
    truth: Optional[TrueParameter] = field(default=None, repr=False)

    def echo(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "model": self.model,
            "params": self.params,
            "output_dir": str(self.output_dir),
            "config_file": self.config_file,
        }


# -- parsing ---------------------------------------------------------------------


def _floats(text):
    return [float(v) for v in text]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qlabayes", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--output-dir", dest="output_dir", help="directory for output files")
    common.add_argument("-v", "--verbose", dest="verbosity", action="count", help="more logging")
    common.add_argument("--model", dest="model_name", help="built-in model (OU, BOU) or custom model name")
    common.add_argument("--drift", nargs="+", type=float, help="custom drift coefficients c0 c1 ...")
    common.add_argument("--diff", nargs="+", type=float, help="custom diffusion coefficients d0 d1")
    common.add_argument("--theta1", nargs="+", type=float, help="true theta1")
    common.add_argument("--theta2", nargs="+", type=float, help="true theta2")
    sub = ap.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="simulate observations to CSV")
    p.add_argument("--n", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--substeps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV file name (relative to the output directory)")

    p = sub.add_parser("estimate", parents=[common], help="QMLE and adaptive Bayes estimate from a CSV")
    p.add_argument("--data")
    p.add_argument("--loss1")
    p.add_argument("--loss2")
    p.add_argument("--prior", help="uniform | gaussian:centre,sd")
    p.add_argument("--pilot", nargs="+", type=float, help="pilot theta2 for stage 1 (default: box centre)")
    p.add_argument("--oracle-pilot", dest="oracle_pilot", action="store_const", const=True,
                   help="use the true theta2 as the stage-1 pilot")
    p.add_argument("--grid-nodes", dest="grid_nodes", type=int, help="quadrature nodes per axis")

    p = sub.add_parser("mc", parents=[common], help="Monte Carlo study")
    p.add_argument("--gamma", type=float)
    p.add_argument("--n-list", dest="n_list", nargs="+", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--loss", dest="loss_specs", action="append",
                   help="loss used in both stages; repeat for several estimators")
    p.add_argument("--prior")
    p.add_argument("--pilot", choices=("oracle", "fixed"))
    p.add_argument("--seed", type=int)
    p.add_argument("--substeps", type=int)

    p = sub.add_parser("info", parents=[common], help="information matrices and identifiability scan")
    p.add_argument("--points", type=int, help="scan grid points per axis")

    p = sub.add_parser("validate-loss", parents=[common], help="check a loss function against the loss class")
    p.add_argument("--loss")
    p.add_argument("--eta", type=float)
    p.add_argument("--r0", type=float)
    p.add_argument("--M", dest="M", type=float, help="radius for the [A5] check")
    p.add_argument("--p", dest="p", type=float, help="growth order (default: from the loss)")
    p.add_argument("--probe-count", dest="probe_count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    return ap


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # the message carries "(at line L, column C)"
        raise UsageError(f"{path}: parse error: {exc}") from None
    for key, value in doc.items():
        if key in SUBCOMMANDS:
            allowed = set(DEFAULTS[key])
        elif key == "model":
            allowed = MODEL_KEYS
        elif key in TOP_KEYS:
            continue
        else:
            raise UsageError(f"{path}: unknown key {key!r}")
        if not isinstance(value, dict):
            raise UsageError(f"{path}: {key!r} must be a table")
        for k in value:
            if k not in allowed:
                raise UsageError(f"{path}: unknown key {k!r} in [{key}]")
    return doc


def _loss_id(spec: str) -> str:
    return spec.replace(":", "").replace(",", "_").replace(".", "p")


def _resolve_model(model: dict):
    name = model.get("name", "OU")
    if model.get("drift") is not None:
        known = {k for k, _, _ in builtin_models()}
        if name in known:
            raise UsageError(f"custom model needs a name other than the built-in {name!r}")
        try:
            m = poly_trig_model(name, model["drift"], model.get("diff") or [1.0, 0.0])
        except QlaError as exc:
            raise UsageError(f"bad custom model: {exc}") from None
        default = TrueParameter([1.0], [1.0], [0.0])
    else:
        if model.get("diff") is not None:
            raise UsageError("'diff' given without 'drift'")
        try:
            m, default = get_model(name)
        except QlaError as exc:
            raise UsageError(str(exc)) from None
    th1 = model.get("theta1", default.theta1_star)
    th2 = model.get("theta2", default.theta2_star)
    x0 = model.get("x0", default.x0)
    try:
        truth = TrueParameter(th1, th2, x0)
        truth.validate(m)
    except QlaError as exc:
        raise UsageError(f"bad true parameter: {exc}") from None
    return m, truth


def parse_config(argv=None) -> RunConfig:
    """Merge defaults, config file and flags into a validated :class:`RunConfig`."""
    ap = build_parser()
    args = ap.parse_args(argv)
    sc = args.subcommand
    doc = load_config_file(args.config) if args.config else {}

    model = {k: v for k, v in doc.get("model", {}).items()}
    for key, flag in (("name", "model_name"), ("drift", "drift"), ("diff", "diff"), ("theta1", "theta1"),
                      ("theta2", "theta2")):
        if getattr(args, flag) is not None:
            model[key] = getattr(args, flag)
    model.setdefault("name", "OU")

    params = dict(DEFAULTS[sc])
    params.update(doc.get(sc, {}))
    for key in DEFAULTS[sc]:
        if getattr(args, key, None) is not None:
            params[key] = getattr(args, key)
    if sc == "mc" and args.loss_specs:
        params["losses"] = [{"id": _loss_id(s), "loss1": s, "loss2": s} for s in args.loss_specs]
    for key in REQUIRED.get(sc, ()):
        if params.get(key) is None:
            raise UsageError(f"missing required field {key!r} for {sc}")

    out_dir = args.output_dir or doc.get("output_dir", ".")
    verbosity = args.verbosity if args.verbosity is not None else int(doc.get("verbosity", 0))
    cfg = RunConfig(sc, model, params, Path(out_dir), verbosity, args.config)
    m, cfg.truth = _resolve_model(model)
    _validate(cfg, m)
    return cfg


def _validate(cfg: RunConfig, model) -> None:
    p = cfg.params
    try:
        if cfg.subcommand == "simulate":
            p["h"] = PathConfig.from_gamma(p["n"], p["gamma"], p["substeps"], p["seed"]).h
        elif cfg.subcommand == "estimate":
            parse_loss(p["loss1"], model.d1)
            parse_loss(p["loss2"], model.d2)
            _prior(p["prior"], model.theta1_box)
            if p["pilot"] is not None and p["oracle_pilot"]:
                raise UsageError("--pilot and --oracle-pilot are mutually exclusive")
            if p["grid_nodes"] is not None and p["grid_nodes"] < 3:
                raise UsageError("grid_nodes must be at least 3")
        elif cfg.subcommand == "mc":
            mc_config(cfg)
            for pair in p["losses"]:
                parse_loss(pair["loss1"], model.d1)
                parse_loss(pair["loss2"], model.d2)
        elif cfg.subcommand == "info":
            if model.state_dim != 1:
                raise UsageError("info needs a one-dimensional model")
            if p["points"] < 5:
                raise UsageError("points must be at least 5")
        elif cfg.subcommand == "validate-loss":
            parse_loss(p["loss"], p["dim"])
            if not 0 < p["eta"] < 1:
                raise UsageError("eta must be in (0, 1)")
            if not p["r0"] > 1:
                raise UsageError("r0 must be greater than 1")
    except (QlaError, TypeError, KeyError) as exc:
        raise UsageError(str(exc)) from None


def _prior(spec, box):
    if spec == "uniform":
        return PriorDensity.uniform(box)
    kind, _, arg = str(spec).partition(":")
    if kind == "gaussian":
        try:
            c, s = (float(v) for v in arg.split(","))
        except ValueError:
            raise UsageError(f"bad prior {spec!r}; expected gaussian:centre,sd") from None
        return PriorDensity.truncated_gaussian(box, c, s)
    raise UsageError(f"unknown prior {spec!r}; expected uniform or gaussian:centre,sd")


def mc_config(cfg: RunConfig) -> McConfig:
    p, m, t = cfg.params, cfg.model, cfg.truth
    try:
        losses = tuple(LossPair(**pair) for pair in p["losses"])
    except TypeError:
        raise UsageError("each loss needs exactly the keys id, loss1, loss2") from None
    return McConfig(
        model=m["name"],
        theta1=tuple(t.theta1_star),
        theta2=tuple(t.theta2_star),
        x0=tuple(t.x0),
        gamma=float(p["gamma"]),
        n_list=tuple(p["n_list"]),
        replicates=int(p["replicates"]),
        losses=losses,
        prior=p["prior"],
        pilot=p["pilot"],
        report_fixed_pilot=bool(p["report_fixed_pilot"]),
        base_seed=int(p["seed"]),
        substeps=int(p["substeps"]),
        moments=tuple(p["moments"]),
        custom_drift=None if m.get("drift") is None else tuple(m["drift"]),
        custom_diff=None if m.get("diff") is None else tuple(m["diff"]),
        discrepancy_threshold=float(p["discrepancy_threshold"]),
        slack=float(p["slack"]),
        discrepancy_statistic=p["discrepancy_statistic"],
        variance_band=tuple(p["variance_band"]),
        ks_c=float(p["ks_c"]),
    )


# -- subcommands -----------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def _write_metadata(cfg: RunConfig, started: str) -> None:
    meta = {
        "package": "qlabayes",
        "backend": _backend.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config": cfg.echo(),
    }
    (cfg.output_dir / "metadata.json").write_text(_dump(meta))


def _run_simulate(cfg: RunConfig, model) -> dict:
    p = cfg.params
    pc = PathConfig.from_gamma(p["n"], p["gamma"], p["substeps"], p["seed"])
    obs = simulate_observations(model, cfg.truth, pc)
    path = cfg.output_dir / p["out"]
    write_csv(obs, path)
    log.info("wrote %d observations to %s", obs.n + 1, path)
    return {"path": str(path), "n": obs.n, "h": obs.h}


def _run_estimate(cfg: RunConfig, model) -> dict:
    p = cfg.params
    path = Path(p["data"])
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    obs = read_csv(path)
    if obs.dim != model.state_dim:
        raise QlaError(f"{path}: {obs.dim} state columns, model {model.name} needs {model.state_dim}")
    losses = (parse_loss(p["loss1"], model.d1), parse_loss(p["loss2"], model.d2))
    priors = (_prior(p["prior"], model.theta1_box), _prior(p["prior"], model.theta2_box))
    q = qmle(model, obs)
    b = bayes_adaptive(model, obs, losses, priors, pilot=p["pilot"], truth=cfg.truth,
                       oracle_pilot=bool(p["oracle_pilot"]), nodes_per_axis=p["grid_nodes"])
    diag = {"n": obs.n, "h": obs.h, "qmle": q.to_dict(), "bayes": b.to_dict()}
    diag["qmle"].pop("scaled_error")
    diag["bayes"].pop("scaled_error")
    return {
        "theta_hat": [q.theta_hat[0].tolist(), q.theta_hat[1].tolist()],
        "theta_tilde": [b.theta_tilde[0].tolist(), b.theta_tilde[1].tolist()],
        "diagnostics": diag,
    }


def _scalar_or_matrix(a):
    a = np.asarray(a, float)
    return float(a[0, 0]) if a.shape == (1, 1) else a.tolist()


def _run_info(cfg: RunConfig, model) -> dict:
    measure = invariant_density_1d(model, cfg.truth)
    info = gamma_matrices(model, cfg.truth, measure)
    scan = identifiability_scan(model, cfg.truth, measure, points=cfg.params["points"])
    return {
        "model": model.name,
        "theta1": cfg.truth.theta1_star.tolist(),
        "theta2": cfg.truth.theta2_star.tolist(),
        "gamma1": _scalar_or_matrix(info.gamma1),
        "gamma2": _scalar_or_matrix(info.gamma2),
        "limit_covariance": limit_covariance(info).tolist(),
        "identifiability": scan.to_dict(),
    }


def _run_validate_loss(cfg: RunConfig, model) -> dict:
    p = cfg.params
    w = parse_loss(p["loss"], p["dim"])
    order = p["p"] if p["p"] is not None else (0.0 if w.kind == "indicator" else w.p)
    rep = validate_loss_class(w, order, probe_count=p["probe_count"], seed=p["seed"], dim=p["dim"])
    c1 = check_C1(w, p["eta"], p["r0"], dim=p["dim"])
    try:
        a5 = {"holds": True, "M": p["M"], "M_prime": check_A5(w, p["M"], dim=p["dim"])}
    except A5NotSatisfiedError as exc:
        a5 = {"holds": False, "M": p["M"], "M_prime": None, "error": str(exc)}
    out = {"loss": w.name, "p": order, "properties": rep.to_dict(),
           "C1": dict(c1.to_dict(), eta=p["eta"], r0=p["r0"]), "A5": a5}
    out["passed"] = bool(rep.passed and c1.holds and a5["holds"])
    return out


def _line(ok: bool, name: str, detail: str = "") -> str:
    return f"{'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else "")


def mc_checks(report) -> tuple:
    """Run every applicable check on a report; returns (lines, json-able results)."""
    lines, results = [], {}
    bayes = [e for e in report.estimators if e != QMLE_ID and "@" not in e]
    if len(report.n_list) >= 2 and len(bayes) >= 2:
        ok, rows = theorem1_check(report)
        results["theorem1"] = {"pass": ok, "rows": rows}
        bad = [f"{r['a']}/{r['b']} u{r['coord']}" for r in rows if not r["pass"]]
        lines.append(_line(ok, "theorem1 loss independence", ", ".join(bad)))
    else:
        lines.append("SKIP theorem1 loss independence (needs two n values and two losses)")
    if len(bayes) >= 2:
        ok, rows = two_sample_ks_check(report)
        results["two_sample_ks"] = {"pass": ok, "rows": rows}
        lines.append(_line(ok, "two-sample KS between losses"))
    n_last = report.n_list[-1]
    for eid in report.estimators:
        if report.cells[(n_last, eid)]["errors"].shape[0] >= 200:
            ok, stats_ = normality_check(report, estimator=eid)
            results[f"normality:{eid}"] = stats_
            det = "; ".join(f"var{c['coord']}={c['var']:.3f} ks{c['coord']}={c['ks']:.3f}" for c in stats_["coords"])
            lines.append(_line(ok, f"normality {eid}", det + f"; rho={stats_['cross_corr']:.3f}"))
        else:
            lines.append(f"SKIP normality {eid} (needs 200 replicates)")
    for eid in bayes:
        mom = moment_check(report, estimator=eid)
        results[f"moments:{eid}"] = mom
        lines.append(_line(mom["abs4_ok"], f"moment bound {eid}", f"E|u|^4 max/min = {mom['abs4_ratio']:.3f}"))
    lines.append(_line(report.valid, "failure rate <= 5% in every cell"))
    return lines, results


def _run_mc(cfg: RunConfig, model) -> dict:
    mcc = mc_config(cfg)
    report = run_monte_carlo(mcc)
    (cfg.output_dir / "report.json").write_text(report.to_json())
    (cfg.output_dir / "summary.csv").write_text(report.summary_csv())
    lines, results = mc_checks(report)
    (cfg.output_dir / "checks.json").write_text(_dump(results))
    for line in lines:
        print(line)
    return {"report": str(cfg.output_dir / "report.json"), "valid": report.valid}


def dispatch(cfg: RunConfig) -> int:
    """Run the selected subcommand; returns the process exit code."""
    logging.basicConfig(level=logging.WARNING - 10 * min(cfg.verbosity, 2), format="%(levelname)s %(message)s")
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    model, _ = _resolve_model(cfg.model)
    try:
        if cfg.subcommand in ("simulate", "mc"):
            cfg.output_dir.mkdir(parents=True, exist_ok=True)
        runner = {
            "simulate": _run_simulate,
            "estimate": _run_estimate,
            "mc": _run_mc,
            "info": _run_info,
            "validate-loss": _run_validate_loss,
        }[cfg.subcommand]
        result = runner(cfg, model)
        if cfg.subcommand in ("simulate", "mc"):
            _write_metadata(cfg, started)
        if cfg.subcommand != "mc":
            sys.stdout.write(_dump(result))
        return 0
    except QlaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        name = exc.filename if getattr(exc, "filename", None) else ""
        print(f"error: {exc}" + (f" [{name}]" if name and str(name) not in str(exc) else ""), file=sys.stderr)
        return 1


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse
        return int(exc.code or 0)
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
