"""Command-line front end: ``simulate``, ``sweep`` and ``verify-w``.

Exit codes: 0 success, 1 numerical failure, 2 usage or config error,
3 infeasible generation.
"""
import argparse
import configparser
import csv
import io
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .corrector import dump_decisions
from .debias import closed_form_W, radii, verify_constraints
from .errors import InfeasibleError, ParameterError, PoolfixError
from .evalbench import report
from .evalbench.experiments import (
    SETTINGS, ExperimentConfig, _pipeline_cfg, aggregate, config_dict, generate, preset, run_experiment,
    stage_table,
)
from .evalbench.metrics import rrmse, sens_spec
from .evalbench.pipelines import ESTIMATORS, PIPELINES
from .detector import LAMBDA_MODES
from .rng import derive_seed
from .simkit import MODELS, center, dump_matrix, dump_records, gen_pooling

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2, 3
ENV_OUT = "POOLFIX_OUT"
ENV_WORKERS = "POOLFIX_WORKERS"

_SKIP = {"setting", "sweep_name", "sweep_values"}
_TYPES = {"s": int, "r": int, "epsilon": float}


class ConfigError(Exception):
    pass


def _convert(name, text, default):
    text = text.strip()
    if text.lower() in ("none", "") and (default is None or name in _TYPES):
        return None
    if name == "estimators":
        return tuple(t.strip() for t in text.split(",") if t.strip())
    kind = _TYPES.get(name, type(default))
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def read_config(path):
    """Flat ``key = value`` settings from an INI-style file (sections optional and merged)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text if text.lstrip().startswith("[") else "[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    defaults = {f.name: f.default for f in fields(ExperimentConfig) if f.name not in _SKIP}
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            key = key.strip().strip('"')
            value = value.strip().strip('"')
            if key not in defaults:
                raise ConfigError(f"{path}: unknown key {key!r}")
            try:
                out[key] = _convert(key, value, defaults[key])
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {key!r}: {exc}") from exc
    return out


def _single_config(values, seed):
    values = dict(values)
    if seed is not None:
        values["seed"] = seed
    if values.get("r") is not None:
        sweep = ("r", (values["r"],))
    else:
        sweep = ("f_adv", (values.get("f_adv", 0.02),))
    values.setdefault("trials", 1)
    return ExperimentConfig(setting="EA", sweep_name=sweep[0], sweep_values=sweep[1], **values)


def _out_dir(arg, fallback):
    return Path(arg or os.environ.get(ENV_OUT) or fallback)


def _workers(arg):
    if arg is not None:
        return arg
    env = os.environ.get(ENV_WORKERS)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS} must be an integer, got {env!r}")
    return 1


def _rows_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([report.fmt(v) for v in row])
    return buf.getvalue()


def cmd_simulate(args):
    cfg = _single_config(read_config(args.config), args.seed)
    out = _out_dir(args.out, "poolfix_simulate")
    system, signal, B_tilde, records, ms, spec = generate(cfg, 0, 0)
    pcfg = _pipeline_cfg(cfg, spec, ms.sigma_tilde, 0, 0)
    metrics, failures, stages, decisions, B_hat = [], [], [], [], None
    for est in cfg.estimators:
        try:
            if est == "CAPE":
                beta_hat, support, aux = PIPELINES[est](ms.z, system.B, cfg.theta, pcfg, B_true=B_tilde)
                res = aux["correction"]
                B_hat, decisions = res.B_hat, res.decisions
                for st in res.stages:
                    stages.append([st.stage, " ".join(map(str, st.J)), " ".join(map(str, st.rows)), st.f_ape,
                                   st.n_changed, st.n_wrong, st.n_true_flag, st.n_false_flag])
            else:
                beta_hat, support, aux = PIPELINES[est](ms.z, system.B, cfg.theta, pcfg)
        except InfeasibleError:
            raise
        except PoolfixError as exc:
            failures.append((est, f"{type(exc).__name__}: {exc}"))
            continue
        sens, spc = sens_spec(signal.support, support, spec.p)
        err = float("nan") if est == "ODRLT" or signal.s == 0 else rrmse(signal.beta, beta_hat)
        metrics.append([est, sens, spc, err])

    put = report.write_text
    put(out / "B.txt", dump_matrix(system.B))
    put(out / "B_tilde.txt", dump_matrix(B_tilde))
    put(out / "records.csv", dump_records(records))
    put(out / "beta.csv", _rows_csv(["index", "beta"], [[j, float(v)] for j, v in enumerate(signal.beta)]))
    put(out / "z.csv", _rows_csv(["row", "z"], [[i, float(v)] for i, v in enumerate(ms.z)]))
    put(out / "metrics.csv", _rows_csv(["estimator", "sensitivity", "specificity", "rrmse"], metrics))
    put(out / "stages.csv", _rows_csv(["stage", "J", "rows", "f_ape", "n_changed", "n_wrong", "n_true_flag",
                                       "n_false_flag"], stages))
    if B_hat is not None:
        put(out / "B_hat.txt", dump_matrix(B_hat))
        put(out / "decisions.csv", dump_decisions(decisions))
    if failures:
        put(out / "failures.csv", _rows_csv(["estimator", "error"], failures))
    put(out / "config.json", json.dumps(config_dict(cfg), indent=2, sort_keys=True, default=str) + "\n")

    print(f"n={spec.n} p={spec.p} s={spec.s} r={spec.r} r_U={spec.r_U} sigma={report.short(ms.sigma_tilde)}")
    for est, sens, spc, err in metrics:
        print(f"{est:6s} sens={report.short(sens)} spec={report.short(spc)} rrmse={report.short(err)}")
    for est, msg in failures:
        print(f"{est:6s} FAILED {msg}", file=sys.stderr)
    print(f"wrote {out}")
    return EXIT_NUMERIC if failures else EXIT_OK


def cmd_sweep(args):
    if args.setting not in SETTINGS:
        raise ConfigError(f"unknown setting {args.setting!r}; choose from {', '.join(SETTINGS)}")
    overrides = read_config(args.config) if args.config else {}
    for key in ("trials", "theta", "model", "seed", "lambda_mode"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.estimators:
        overrides["estimators"] = tuple(args.estimators.split(","))
    cfg = preset(args.setting, **overrides)
    out = _out_dir(args.out, f"poolfix_{cfg.setting.lower()}")
    workers = _workers(args.workers)

    def progress(done, total):
        if args.verbose:
            print(f"  {done}/{total} trials", file=sys.stderr)

    results = run_experiment(cfg, workers=workers, progress=progress)
    agg = aggregate(cfg, results)
    stages = stage_table(cfg, results) if "CAPE" in cfg.estimators else None
    paths = report.write_report(cfg, results, agg, out, timing=args.timing, figures=not args.no_figures,
                                stages=stages)
    report.write_text(out / f"{cfg.setting}_config.json",
                      json.dumps(config_dict(cfg), indent=2, sort_keys=True, default=str) + "\n")

    print(f"{cfg.setting}: {len(cfg.sweep_values)} values x {cfg.trials} trials, model {cfg.model}")
    for m in agg:
        print(f"  {cfg.sweep_name}={report.short(m.sweep_value):<8} {m.estimator:6s} "
              f"sens={report.short(m.sensitivity)} spec={report.short(m.specificity)} "
              f"rrmse={report.short(m.rrmse)} failed={m.failed}")
    if stages:
        print("  stage table (value, stage, N_E, N_ET, N_EF):")
        for v, st, ne, net, nef, _ in stages:
            print(f"    {report.short(v)} {st} {report.short(ne)} {report.short(net)} {report.short(nef)}")
    print(f"wrote {len(paths) + 1} files to {out}")
    failed = sum(len(r.failures) for r in results)
    total = sum(len(r.rows) + len(r.failures) for r in results)
    return EXIT_NUMERIC if total and failed == total else EXIT_OK


def verify_w(n_prime, p, theta, seeds, c_mu=2.0, radii_kind="main", seed=0):
    """C0-C3 pass counts of the closed-form operator over random centered designs.

    Returns ``(mu, rows)``: the radii ``(c0, mu1, mu2, mu3)`` and per seed either
    ``{name: (lhs, radius, passed)}`` or ``None`` when the program is infeasible.
    """
    mu = radii(n_prime, p, theta, c_mu, radii_kind)
    rows = []
    for k in range(seeds):
        if mu[3] >= 1.0:
            rows.append(None)
            continue
        if p <= 2 * n_prime:
            raise ParameterError("need p > 2n' (the pooling matrix has 2n' rows)")
        system = gen_pooling(2 * n_prime, p, theta, derive_seed(seed, k))
        cs = center(np.zeros(2 * n_prime), system.B, theta)
        try:
            op = closed_form_W(cs.A, theta, c_mu=c_mu, radii_kind=radii_kind)
        except InfeasibleError:
            rows.append(None)
            continue
        rows.append(verify_constraints(op.W, cs.A, theta, c_mu, radii_kind))
    return mu, rows


def cmd_verify(args):
    if args.n < 2 or args.p < 2 or args.seeds < 1:
        raise ConfigError("need --n >= 2, --p >= 2 and --seeds >= 1")
    mu, rows = verify_w(args.n, args.p, args.theta, args.seeds, args.c_mu, args.radii, args.seed)
    names = ("C0", "C1", "C2", "C3")
    print(f"n'={args.n} p={args.p} theta={report.short(args.theta)} seeds={args.seeds} radii={args.radii}")
    print("  " + " ".join(f"{k}={report.short(v)}" for k, v in zip(("c0", "mu1", "mu2", "mu3"), mu)))
    for k, row in enumerate(rows):
        if row is None:
            print(f"  seed {k}: infeasible (mu3 = {report.short(mu[3])} >= 1)")
    ok = [r for r in rows if r is not None]
    if ok:
        for name in names:
            rate = sum(r[name][2] for r in ok) / len(ok)
            worst = max(r[name][0] for r in ok)
            print(f"  {name}: pass rate {report.short(rate)}  max lhs {report.short(worst)}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="poolfix", description="Pooled-testing mismatch simulation, detection and "
                                                              "correction.")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="one end-to-end trial with a full trace")
    sim.add_argument("--config", required=True, help="INI-style key = value file")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", help=f"output directory (env {ENV_OUT})")
    sim.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="run a named experiment")
    sw.add_argument("--setting", required=True, help="one of " + ", ".join(SETTINGS))
    sw.add_argument("--config", help="optional key = value overrides")
    sw.add_argument("--trials", type=int)
    sw.add_argument("--theta", type=float)
    sw.add_argument("--model", choices=MODELS)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--lambda-mode", dest="lambda_mode", choices=LAMBDA_MODES)
    sw.add_argument("--estimators", help="comma list from " + ",".join(ESTIMATORS))
    sw.add_argument("--out", help=f"output directory (env {ENV_OUT})")
    sw.add_argument("--workers", type=int, help=f"worker processes (env {ENV_WORKERS})")
    sw.add_argument("--timing", action="store_true", help="record runtimes (output no longer byte-stable)")
    sw.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    sw.add_argument("-v", "--verbose", action="store_true")
    sw.set_defaults(func=cmd_sweep)

    vw = sub.add_parser("verify-w", help="check the closed-form debiasing constraints")
    vw.add_argument("--n", type=int, required=True, help="centered rows n'")
    vw.add_argument("--p", type=int, required=True)
    vw.add_argument("--theta", type=float, default=0.5)
    vw.add_argument("--seeds", type=int, default=50)
    vw.add_argument("--seed", type=int, default=0)
    vw.add_argument("--c-mu", dest="c_mu", type=float, default=2.0)
    vw.add_argument("--radii", choices=("main", "h"), default="main")
    vw.set_defaults(func=cmd_verify)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except PoolfixError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
