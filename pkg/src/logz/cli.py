"""Command line front end: ``logz <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 failed
``estimate --check`` against the target's exact normalizer.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
import time

import jsonschema
import numpy as np

from . import hardness, oracles
from .annealing import EstimationError, PipelineSettings, run_method
from .mlmc import MlmcError
from .potentials import AnnealStagePotential, make_diag_quadratic, make_gaussian
from .rng import RngStream
from .samplers import SamplerError, mala_chain, rmm_chain, uld_chain

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
METHODS = ("mlmc-uld", "mlmc-rmm", "mala")
_SETTING_FIELDS = {f.name: f.type for f in dataclasses.fields(PipelineSettings)}


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}

TARGET_SCHEMA = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": ["gaussian", "diag_quadratic", "hard_instance"]},
        "d": _POS_INT,
        "sigma2": _POS,
        "lambdas": {"type": "array", "items": _POS, "minItems": 1},
        "instance": {"type": "object"},
        "path": {"type": "string"},
    },
    "additionalProperties": False,
}

SETTINGS_SCHEMA = {
    "type": "object",
    "properties": {
        "profile": {"enum": ["desk", "full"]},
        "uld_variance_const": _POS, "rmm_variance_const": _POS, "C_F": _POS,
        "eta_max_factor": _POS, "rmm_step_c": _POS, "mala_step_c": _POS, "mala_steps_C": _POS,
        "block_size": _POS_INT, "stage_batch": _POS_INT,
        "max_stages": {"type": ["integer", "null"], "minimum": 1},
        "max_levels": {"type": ["integer", "null"], "minimum": 0},
        "max_level0_samples": {"type": ["integer", "null"], "minimum": 2},
        "max_radius_samples": {"type": ["integer", "null"], "minimum": 1},
        "mala_max_samples": {"type": ["integer", "null"], "minimum": 1},
        "eta_floor": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "max_horizon_kappa": {"type": ["number", "null"], "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["target", "method", "eps"],
    "properties": {
        "target": TARGET_SCHEMA,
        "method": {"enum": list(METHODS)},
        "eps": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
        "seed": {"type": "integer", "minimum": 0},
        "settings": SETTINGS_SCHEMA,
        "output": {
            "type": "object",
            "properties": {"report": {"type": "string"}, "stages_csv": {"type": "string"}},
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


# ------------------------------------------------------------------ config

def parse_json(text: str, source: str = "<config>"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        line = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}\n"
                          f"    {' ' * (exc.colno - 1)}^") from None


def validate(config, schema=CONFIG_SCHEMA):
    try:
        jsonschema.validate(config, schema)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    return config


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return validate(parse_json(text, path))


def build_target(spec: dict, base_dir: str = "."):
    validate(spec, TARGET_SCHEMA)
    kind = spec["type"]
    try:
        if kind == "gaussian":
            if "d" not in spec:
                raise ConfigError("config error at target.d: gaussian target needs d")
            return make_gaussian(spec["d"], spec.get("sigma2", 1.0))
        if kind == "diag_quadratic":
            if "lambdas" not in spec:
                raise ConfigError("config error at target.lambdas: diag_quadratic needs lambdas")
            return make_diag_quadratic(spec["lambdas"])
        if "instance" in spec:
            return hardness.HardInstance.from_dict(spec["instance"])
        if "path" in spec:
            path = os.path.join(base_dir, spec["path"])
            with open(path, encoding="utf-8") as fh:
                return hardness.HardInstance.from_json(fh.read())
        raise ConfigError("config error at target: hard_instance needs instance or path")
    except (KeyError, TypeError, ValueError, OSError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"config error at target: {exc}") from None


def build_settings(spec: dict | None, threads: int | None = None) -> PipelineSettings:
    spec = dict(spec or {})
    validate(spec, SETTINGS_SCHEMA)
    profile = spec.pop("profile", "desk")
    if threads is not None:
        spec["threads"] = int(threads)
    try:
        return PipelineSettings.desk(**spec) if profile == "desk" else PipelineSettings(**spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config error at settings: {exc}") from None


def seed_from(config: dict) -> int:
    env = os.environ.get("LOGZ_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"LOGZ_SEED must be an integer, got {env!r}") from None
    return int(config.get("seed", 0))


# ------------------------------------------------------------------ output

def fmt(v) -> str:
    """Floats with 17 significant digits (round-trip exact); others via str."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_csv(rows, header, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])


def strip_timing(report: dict) -> dict:
    out = dict(report)
    out.pop("wall_time", None)
    out["stages"] = [{k: v for k, v in s.items() if k != "seconds"} for s in report.get("stages", [])]
    return out


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


STAGE_COLUMNS = ("stage", "sigma_sq", "r_hat", "r_plus", "R_hat", "queries", "seconds")


def stage_rows(report: dict):
    return [[s.get(c) for c in STAGE_COLUMNS] for s in report.get("stages", [])]


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


# ------------------------------------------------------------------ commands

def cmd_estimate(args) -> int:
    config = load_config(args.config)
    base_dir = os.path.dirname(os.path.abspath(args.config))
    target = build_target(config["target"], base_dir)
    settings = build_settings(config.get("settings"), args.threads)
    seed = seed_from(config)
    out = dict(config.get("output", {}))
    report_path = args.out or out.get("report")
    csv_path = args.csv or out.get("stages_csv")
    if report_path and not os.path.isabs(report_path) and not args.out:
        report_path = os.path.join(base_dir, report_path)
    if csv_path and not os.path.isabs(csv_path) and not args.csv:
        csv_path = os.path.join(base_dir, csv_path)
    echoed = dict(config, seed=seed)
    status = EXIT_OK
    try:
        rep = run_method(target, config["eps"], config["method"], seed, settings)
        report = rep.to_dict()
    except EstimationError as exc:
        report = exc.report.to_dict() if exc.report is not None else {"status": "failed"}
        print(f"estimation failed at stage {exc.stage}: {exc}", file=sys.stderr)
        status = EXIT_NUMERIC
    except (MlmcError, SamplerError, FloatingPointError) as exc:
        report = {"status": "failed", "message": str(exc)}
        print(f"numerical failure: {exc}", file=sys.stderr)
        status = EXIT_NUMERIC
    report["config"] = echoed
    if args.check and status == EXIT_OK:
        exact = target.log_z()
        if exact is None:
            raise ConfigError("--check needs a target with an exact normalizer")
        rel = math.expm1(report["log_z_hat"] - exact)
        report["check"] = {"log_z": exact, "rel_error": rel, "passed": abs(rel) <= config["eps"]}
        if not report["check"]["passed"]:
            print(f"check failed: relative error {rel:.4g} exceeds eps={config['eps']}",
                  file=sys.stderr)
            status = EXIT_CHECK
    if args.strip_timing:
        report = strip_timing(report)
    _write(report_path, dump_report(report))
    if csv_path:
        buf = io.StringIO()
        write_csv(stage_rows(report), STAGE_COLUMNS, buf)
        _write(csv_path, buf.getvalue())
    return status


BENCH_COLUMNS = ("method", "d", "kappa", "eps", "queries", "rel_error", "seconds", "seed")


def bench_target(d, kappa):
    if kappa == 1:
        return make_gaussian(d, 1.0)
    return make_diag_quadratic(np.geomspace(1.0, kappa, d))


def cmd_bench(args) -> int:
    methods, ds, epss, kappas, seeds = args.methods, args.d, args.eps, args.kappa, args.seeds
    for name, vals in (("methods", methods), ("d", ds), ("eps", epss), ("kappa", kappas),
                       ("seeds", seeds)):
        if not vals:
            raise ConfigError(f"config error at {name}: sweep list is empty")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"config error at methods: unknown method {m!r}")
    settings = build_settings({"profile": args.profile}, args.threads)
    fh = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    status = EXIT_OK
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        fh.flush()
        for m in methods:
            for d in ds:
                for kappa in kappas:
                    for eps in epss:
                        for seed in seeds:
                            target = bench_target(d, kappa)
                            t0 = time.perf_counter()
                            try:
                                rep = run_method(target, eps, m, seed, settings)
                            except EstimationError as exc:
                                print(f"bench run failed ({m}, d={d}): {exc}", file=sys.stderr)
                                status = EXIT_NUMERIC
                                continue
                            exact = target.log_z()
                            rel = None if exact is None else math.expm1(rep.log_z_hat - exact)
                            secs = None if args.strip_timing else time.perf_counter() - t0
                            w.writerow([fmt(v) for v in (m, d, float(kappa), float(eps),
                                                         rep.predicted_grad_queries, rel, secs, seed)])
                            fh.flush()
    finally:
        if fh is not sys.stdout:
            fh.close()
    return status


def cmd_oracle(args) -> int:
    if args.kind == "gaussian":
        lz = oracles.analytic_gaussian_Z(args.lambdas)
        out = {"kind": "gaussian", "lambdas": args.lambdas, "log_z": lz, "z": math.exp(lz)}
    elif args.kind == "stage-ratio":
        nxt = math.inf if args.sigma_next_sq is None else args.sigma_next_sq
        lr = oracles.log_gaussian_stage_ratio(args.s2, args.sigma_sq, nxt, args.d)
        out = {"kind": "stage-ratio", "log_ratio": lr, "ratio": math.exp(lr)}
    elif args.kind == "variance-ratio":
        lr = oracles.log_gaussian_variance_ratio(args.s2, args.sigma_sq, args.alpha, args.d)
        out = {"kind": "variance-ratio", "log_ratio": lr, "ratio": math.exp(lr),
               "bound": math.exp(4 * args.alpha**2 * args.d)}
    else:
        if args.instance:
            with open(args.instance, encoding="utf-8") as fh:
                target = hardness.HardInstance.from_json(fh.read())
        elif args.lambdas:
            target = make_diag_quadratic(args.lambdas)
        else:
            raise ConfigError("quadrature needs --lambdas or --instance")
        res = oracles.trapezoid_Z(target, args.quad_eps, h_override=args.h)
        out = {"kind": "quadrature", **res.to_dict()}
    sys.stdout.write(json.dumps(out, indent=2) + "\n")
    return EXIT_OK


def cmd_sample(args) -> int:
    base = make_gaussian(args.d, args.sigma2)
    stage = base if args.stage_sigma2 is None else AnnealStagePotential(base, args.stage_sigma2)
    gen = RngStream(args.seed).child(0).generator()
    x0 = np.zeros(args.d)
    d = args.d
    if args.sampler in ("uld", "rmm"):
        run = uld_chain if args.sampler == "uld" else rmm_chain
        _, tr = run(x0, stage, args.eta, args.T, gen, n=args.chains, trace=True)
        header = ["chain", "t"] + [f"x{j + 1}" for j in range(d)] + [f"v{j + 1}" for j in range(d)]
    else:
        res = mala_chain(x0, stage, args.h, args.steps, gen, n_chains=args.chains, trace=True)
        tr = res.trace
        header = ["chain", "iter"] + [f"x{j + 1}" for j in range(d)]
    rows = []
    for c in range(tr.shape[1]):
        for row in tr[:, c, :]:
            rows.append([c] + [float(v) for v in row])
    for r in rows:
        if args.sampler == "mala":
            r[1] = int(r[1])
    buf = io.StringIO()
    write_csv(rows, header, buf)
    _write(args.out, buf.getvalue())
    return EXIT_OK


def _parse_types(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"config error at types: expected comma-separated 1/2, got {text!r}") from None


def cmd_hardgen(args) -> int:
    types = _parse_types(args.types) if args.types else None
    if types is None and args.p_type1 is None:
        raise ConfigError("hardgen needs --types or --p-type1")
    try:
        inst = hardness.generate(args.k, args.n, types=types, p_type1=args.p_type1, seed=args.seed,
                                 mode=args.mode, target=args.target)
    except ValueError as exc:
        raise ConfigError(f"config error: {exc}") from None
    _write(args.out, inst.to_json() + "\n")
    return EXIT_OK


def cmd_hardverify(args) -> int:
    try:
        with open(args.path, encoding="utf-8") as fh:
            data = parse_json(fh.read(), args.path)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.path}: {exc.strerror}") from None
    try:
        inst = hardness.HardInstance.from_dict(data)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"config error: {exc}") from None
    report = hardness.verify_instance(inst, count=args.points, seed=args.seed)
    report["n_type2"] = inst.n_type2
    report["log_z"] = inst.log_z()
    sys.stdout.write(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logz", description="Normalizing-constant estimation.")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="run one estimate from a JSON config")
    e.add_argument("config")
    e.add_argument("--out", help="report JSON path (default: config output.report or stdout)")
    e.add_argument("--csv", help="per-stage CSV path")
    e.add_argument("--threads", type=int, default=None)
    e.add_argument("--strip-timing", action="store_true")
    e.add_argument("--check", action="store_true", help="compare against the exact normalizer")
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("bench", help="sweep methods and sizes, emit a CSV table")
    b.add_argument("--methods", nargs="+", default=["mlmc-uld", "mala"])
    b.add_argument("--d", nargs="+", type=int, default=[2, 4, 8])
    b.add_argument("--eps", nargs="+", type=float, default=[0.3])
    b.add_argument("--kappa", nargs="+", type=float, default=[1.0])
    b.add_argument("--seeds", nargs="+", type=int, default=[0])
    b.add_argument("--profile", choices=["desk", "full"], default="desk")
    b.add_argument("--threads", type=int, default=None)
    b.add_argument("--strip-timing", action="store_true")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    o = sub.add_parser("oracle", help="closed-form or quadrature ground truth")
    o.add_argument("kind", choices=["gaussian", "stage-ratio", "variance-ratio", "quadrature"])
    o.add_argument("--lambdas", nargs="+", type=float)
    o.add_argument("--s2", type=float, default=1.0)
    o.add_argument("--sigma-sq", type=float, default=1.0)
    o.add_argument("--sigma-next-sq", type=float, default=None)
    o.add_argument("--alpha", type=float, default=0.25)
    o.add_argument("--d", type=int, default=1)
    o.add_argument("--instance", help="hardness instance JSON for quadrature")
    o.add_argument("--quad-eps", type=float, default=1e-3)
    o.add_argument("--h", type=float, default=None)
    o.set_defaults(func=cmd_oracle)

    s = sub.add_parser("sample", help="dump a sampler trace as CSV")
    s.add_argument("sampler", choices=["uld", "rmm", "mala"])
    s.add_argument("--d", type=int, default=1)
    s.add_argument("--sigma2", type=float, default=1.0)
    s.add_argument("--stage-sigma2", type=float, default=None)
    s.add_argument("--eta", type=float, default=0.1)
    s.add_argument("--T", type=float, default=1.0)
    s.add_argument("--h", type=float, default=0.1)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--chains", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    g = sub.add_parser("hardgen", help="generate a hardness instance")
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--types", help="comma-separated cell types, e.g. 1,2,1,1")
    g.add_argument("--p-type1", type=float, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--mode", choices=["uniform", "equalized"], default="uniform")
    g.add_argument("--target", choices=["all", "type2"], default="all")
    g.add_argument("--out")
    g.set_defaults(func=cmd_hardgen)

    v = sub.add_parser("hardverify", help="check smoothness and convexity of an instance")
    v.add_argument("path")
    v.add_argument("--points", type=int, default=10_000)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_hardverify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("config error at threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (MlmcError, SamplerError, EstimationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
