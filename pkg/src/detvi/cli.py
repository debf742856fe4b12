"""Command-line interface: train, benchmark, verify, predict.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical failure.  ``DETVI_OUTPUT_DIR`` overrides the output directory
named in a config.
"""

import argparse
import concurrent.futures
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from detvi import datasets, network, oracle, trainkit
from detvi import gaussmoments as gm

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

OUTPUT_DIR_ENV = "DETVI_OUTPUT_DIR"
MODEL_FORMAT = "detvi-model"
MODEL_VERSION = 1
SUMMARY_COLUMNS = ("dataset", "method", "mean_test_ll", "std_err", "n_splits", "n_failed")
METHODS = ("DVI", "dDVI", "MCVI", "hoDVI")
TOY_X = 0.25
TOY_SIZES = (1, 128, 128, 2)

log = logging.getLogger("detvi")


class ConfigError(ValueError):
    pass


_NETWORK_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "nonlinearity": {"enum": list(gm.KINDS)},
        "head": {"enum": [network.HETERO, network.HOMO]},
        "cov_mode": {"enum": list(gm.MODES)},
        "skip_layers": {"type": "array", "items": {"type": "integer", "minimum": 1}},
    },
}

_TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "inference": {"enum": list(trainkit.INFERENCE)},
        "mc_samples": {"type": "integer", "minimum": 1},
        "mc_mode": {"enum": ["weight", "local"]},
    },
}

_PRIOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["type"],
    "properties": {
        "type": {"enum": [trainkit.EB, trainkit.FIXED]},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "beta": {"type": "number", "exclusiveMinimum": 0},
        "variance": {"type": "number", "exclusiveMinimum": 0},
    },
}

TRAIN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "output_dir"],
    "properties": {
        "dataset": {"type": "string", "minLength": 1},
        "registry": {"type": "string"},
        "network": _NETWORK_SCHEMA,
        "train": _TRAIN_SCHEMA,
        "prior": _PRIOR_SCHEMA,
        "split_seed": {"type": "integer", "minimum": 0},
        "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "output_dir": {"type": "string", "minLength": 1},
    },
}

BENCHMARK_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["datasets", "methods", "output_dir"],
    "properties": {
        "datasets": {"type": "array", "minItems": 1, "items": {"type": "string", "minLength": 1}},
        "registry": {"type": "string"},
        "methods": {"type": "array", "items": {"enum": list(METHODS)}},
        "n_splits": {"type": "integer", "minimum": 1},
        "network": _NETWORK_SCHEMA,
        "train": _TRAIN_SCHEMA,
        "prior": _PRIOR_SCHEMA,
        "fixed_prior_variances": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "jobs": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string", "minLength": 1},
    },
}


# --------------------------------------------------------------------------
# config handling


def load_config(path, schema):
    """Read and validate a JSON config; any problem becomes a ConfigError naming the field."""
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from None
    return cfg


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def output_dir(cfg):
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg["output_dir"])


def build_spec(net_cfg, d_x, head=None):
    net_cfg = dict(net_cfg or {})
    head = head or net_cfg.get("head", network.HETERO)
    out = 2 if head == network.HETERO else 1
    try:
        return network.NetworkSpec(
            (d_x, *net_cfg.get("hidden", [50]), out),
            nonlinearity=net_cfg.get("nonlinearity", gm.RELU),
            head=head,
            cov_mode=net_cfg.get("cov_mode", gm.FULL),
            skip_layers=frozenset(net_cfg.get("skip_layers", [])),
        )
    except ValueError as exc:
        raise ConfigError(f"config field network: {exc}") from None


def build_train_config(train_cfg, prior_cfg, **overrides):
    fields = dict(train_cfg or {})
    prior_cfg = dict(prior_cfg or {"type": trainkit.EB})
    fields["prior"] = prior_cfg["type"]
    if "alpha" in prior_cfg:
        fields["prior_alpha"] = prior_cfg["alpha"]
    if "beta" in prior_cfg:
        fields["prior_beta"] = prior_cfg["beta"]
    if "variance" in prior_cfg:
        fields["prior_variance"] = prior_cfg["variance"]
    fields.update(overrides)
    fields.setdefault("epochs", 2000)
    try:
        return trainkit.TrainConfig(**fields)
    except ValueError as exc:
        raise ConfigError(f"config field train: {exc}") from None


def load_dataset(name, registry=None):
    if name == "toy":
        return datasets.toy_dataset()
    try:
        return datasets.load(name, registry)
    except datasets.DatasetError as exc:
        raise ConfigError(f"config field dataset: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"config field dataset: cannot read {name!r}: {exc.strerror}") from None


# --------------------------------------------------------------------------
# model artifacts


def save_model(path, spec, params, standardization, chash):
    doc = dict(
        format=MODEL_FORMAT,
        version=MODEL_VERSION,
        config_hash=chash,
        spec=spec.to_dict(),
        params={k: np.asarray(v).tolist() for k, v in params.items()},
        standardization={k: np.asarray(v).tolist() for k, v in standardization.items()},
    )
    Path(path).write_text(json.dumps(doc))


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from None
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ConfigError(f"{path} is not a version-{MODEL_VERSION} model file")
    s = doc["spec"]
    spec = network.NetworkSpec(
        tuple(s["layer_sizes"]), s["nonlinearity"], s["head"], s["cov_mode"], frozenset(s["skip_layers"])
    )
    params = {k: np.asarray(v, dtype=np.float64) for k, v in doc["params"].items()}
    std = {k: np.asarray(v, dtype=np.float64) for k, v in doc["standardization"].items()}
    return spec, params, std


def _standardization(part):
    return dict(
        feature_mean=part.feature_mean,
        feature_std=part.feature_std,
        target_mean=part.target_mean,
        target_std=part.target_std,
    )


# --------------------------------------------------------------------------
# commands


def _write_jsonl(path, records):
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def cmd_train(args):
    cfg = load_config(args.config, TRAIN_CONFIG_SCHEMA)
    data = load_dataset(cfg["dataset"], cfg.get("registry"))
    train_set, test_set = datasets.split(data, cfg.get("split_seed", 0), cfg.get("train_fraction", 0.9))
    spec = build_spec(cfg.get("network"), data.d_x)
    tcfg = build_train_config(cfg.get("train"), cfg.get("prior"))
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    run_id = f"{data.name}-split{cfg.get('split_seed', 0)}-{chash}"
    metrics_path = out / "metrics.jsonl"

    def sink(rec):
        _write_jsonl(metrics_path, [dict(run_id=run_id, config_hash=chash, **rec)])

    with np.errstate(all="ignore"):
        params, metrics = trainkit.train(spec, train_set, test_set, tcfg, on_epoch=sink)
    save_model(out / "model.json", spec, params, _standardization(train_set), chash)
    log.info("run %s finished: test LL %s", run_id, metrics.final_test_ll)
    print(json.dumps(dict(run_id=run_id, final_test_ll=metrics.final_test_ll)))
    return EXIT_OK


def _method_setup(method, base_train, prior_cfg, net_cfg, d_x):
    """Map a benchmark method label to (NetworkSpec, TrainConfig)."""
    if method.startswith("DVI-fixed:"):
        variance = float(method.split(":", 1)[1])
        return build_spec(net_cfg, d_x, network.HETERO), build_train_config(
            base_train, {"type": trainkit.FIXED, "variance": variance}, inference=trainkit.DVI
        )
    head = network.HOMO if method == "hoDVI" else network.HETERO
    inference = {"DVI": trainkit.DVI, "hoDVI": trainkit.DVI, "dDVI": trainkit.DDVI, "MCVI": trainkit.MCVI}[method]
    return build_spec(net_cfg, d_x, head), build_train_config(base_train, prior_cfg, inference=inference)


def _benchmark_run(job):
    """Worker: train one (dataset, method, split); returns a result dict, never raises."""
    name, registry, method, split_seed, cfg = job
    result = dict(dataset=name, method=method, split=split_seed, records=[], test_ll=None, error=None)
    try:
        data = load_dataset(name, registry)
        train_set, test_set = datasets.split(data, split_seed, cfg.get("train_fraction", 0.9))
        spec, tcfg = _method_setup(method, cfg.get("train"), cfg.get("prior"), cfg.get("network"), data.d_x)
        tcfg = dataclasses.replace(tcfg, seed=tcfg.seed + split_seed)
        with np.errstate(all="ignore"):
            _, metrics = trainkit.train(spec, train_set, test_set, tcfg)
        result["records"] = metrics.records
        result["test_ll"] = metrics.final_test_ll
    except Exception as exc:  # grid continues past individual failures
        result["error"] = f"{type(exc).__name__}: {exc}"
    return result


def summarize(results):
    """Table-style rows: mean test LL and its standard error across splits."""
    groups = {}
    for res in results:
        groups.setdefault((res["dataset"], res["method"]), []).append(res)
    rows = []
    for (name, method), runs in groups.items():
        lls = np.array([r["test_ll"] for r in runs if r["error"] is None], dtype=np.float64)
        n = lls.size
        rows.append(
            dict(
                dataset=name,
                method=method,
                mean_test_ll="" if n == 0 else repr(float(lls.mean())),
                std_err="" if n < 2 else repr(float(lls.std(ddof=1) / math.sqrt(n))),
                n_splits=n,
                n_failed=len(runs) - n,
            )
        )
    return rows


def cmd_benchmark(args):
    cfg = load_config(args.config, BENCHMARK_CONFIG_SCHEMA)
    methods = list(cfg["methods"]) + [f"DVI-fixed:{v:g}" for v in cfg.get("fixed_prior_variances", [])]
    if not methods:
        raise ConfigError("config field methods: no methods and no fixed_prior_variances given")
    for name in cfg["datasets"]:
        load_dataset(name, cfg.get("registry"))
    jobs = [
        (name, cfg.get("registry"), method, k, cfg)
        for name in cfg["datasets"]
        for method in methods
        for k in range(cfg.get("n_splits", 20))
    ]
    workers = args.jobs or cfg.get("jobs") or os.cpu_count() or 1
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    if workers == 1:
        results = [_benchmark_run(job) for job in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_benchmark_run, jobs))

    for res in results:
        run_id = f"{res['dataset']}-{res['method']}-split{res['split']}-{chash}"
        recs = [dict(run_id=run_id, config_hash=chash, dataset=res["dataset"], method=res["method"], **r) for r in res["records"]]
        if res["error"] is not None:
            recs.append(dict(run_id=run_id, config_hash=chash, dataset=res["dataset"], method=res["method"], error=res["error"]))
            print(f"run {run_id} failed: {res['error']}", file=sys.stderr)
        _write_jsonl(out / "metrics.jsonl", recs)

    rows = summarize(results)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(f"{row['dataset']:>12s} {row['method']:>16s} {row['mean_test_ll']:>22s} +/- {row['std_err'] or '-'}")
    return EXIT_OK if all(r["error"] is None for r in results) else EXIT_NUMERIC


def parse_grid(text):
    """``lo:hi:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            lo, hi, step = (float(t) for t in text.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(round((hi - lo) / step))
            return tuple(float(lo + i * step) for i in range(n + 1))
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"bad grid {text!r}; use lo:hi:step or a comma list") from None


def _verify_moments(args, out):
    kind = args.kind
    mu_grid = parse_grid(args.grid)
    rho_list = parse_grid(args.rho) if args.rho else oracle.DEFAULT_RHO_LIST
    if any(abs(r) > 0.999 for r in rho_list):
        raise ConfigError("--rho values must satisfy |rho| <= 0.999")
    rows = oracle.residual_map(kind, mu_grid, rho_list)
    tail_rows = oracle.residual_map(kind, (-8.0, 8.0), rho_list) if not args.skip_tail else []
    oracle.write_residual_csv(rows + tail_rows, out / f"residuals_{kind}.csv")

    failures = []
    worst = max(rows, key=lambda r: r["abs_err"])
    if worst["abs_err"] > args.tolerance:
        failures.append(("grid", worst))
    for r in rows:
        if r["rho"] == 0.0 and r["abs_err"] > 1e-12:
            failures.append(("rho=0", r))
    tail_worst = None
    for r in tail_rows:
        mu1, mu2, rho = r["mu1"], r["mu2"], r["rho"]
        asym = float(gm.asymptote(mu1 if abs(mu1) == 8 else mu2, mu2 if abs(mu1) == 8 else mu1, rho, kind))
        dev = max(r["abs_err"], abs(r["approx"] - asym))
        if tail_worst is None or dev > tail_worst[0]:
            tail_worst = (dev, r)
        if dev > 1e-3:
            failures.append(("|mu1|=8", r))
    report = dict(
        kind=kind,
        max_abs_err=worst["abs_err"],
        worst=worst,
        tolerance=args.tolerance,
        tail_max_dev=None if tail_worst is None else tail_worst[0],
        passed=not failures,
    )
    (out / f"report_{kind}.json").write_text(json.dumps(report, indent=2))
    print(f"{kind}: max |I - I_exact| = {worst['abs_err']:.3g} (tolerance {args.tolerance})")
    if failures:
        label, r = max(failures, key=lambda f: f[1]["abs_err"])
        print(f"FAIL [{label}] worst offender mu1={r['mu1']} mu2={r['mu2']} rho={r['rho']} err={r['abs_err']:.3g}")
        return EXIT_VERIFY
    print("PASS")
    return EXIT_OK


def toy_agreement(spec, params, samples=20000, seed=0, x=TOY_X):
    """Rows comparing DVI and MC output means/stds of (m, l) at input x."""
    act = network.forward_moments(spec, params, np.array([[x]]))
    mean = np.asarray(act.mean)[0]
    std = np.sqrt(np.asarray(act.variances())[0])
    mc = oracle.mc_forward(spec, params, np.array([[x]]), samples, seed)
    rows = []
    for i, unit in enumerate(("m", "l")):
        for stat, dvi, emp, se in (
            ("mean", mean[i], mc.mean[0, i], mc.mean_se[0, i]),
            ("std", std[i], mc.std[0, i], mc.std_se[0, i]),
        ):
            z = abs(dvi - emp) / se if se > 0 else (0.0 if dvi == emp else math.inf)
            rows.append(dict(unit=unit, stat=stat, dvi=float(dvi), mc=float(emp), mc_se=float(se), z=float(z)))
    return rows


def _verify_toy(args, out):
    x = TOY_X
    if args.model:
        spec, params, std = load_model(args.model)
        x = float((TOY_X - std["feature_mean"][0]) / std["feature_std"][0])
    else:
        spec = network.NetworkSpec(TOY_SIZES)
        params = network.init_params(spec, args.seed)
    rows = toy_agreement(spec, params, args.samples, args.seed, x)
    with open(out / "toy_agreement.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("unit", "stat", "dvi", "mc", "mc_se", "z"))
        writer.writeheader()
        writer.writerows(rows)
    worst = max(rows, key=lambda r: r["z"])
    print(f"toy: worst deviation {worst['z']:.2f} standard errors ({worst['unit']} {worst['stat']})")
    if worst["z"] > 3.0:
        print(f"FAIL worst offender {worst}")
        return EXIT_VERIFY
    print("PASS")
    return EXIT_OK


def cmd_verify(args):
    out = Path(os.environ.get(OUTPUT_DIR_ENV) or args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "toy":
        return _verify_toy(args, out)
    return _verify_moments(args, out)


def read_features(path):
    """Numeric CSV of features only, optional header; returns ``(n, d)`` (n may be 0)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    except OSError as exc:
        raise ConfigError(f"cannot read input {path}: {exc.strerror}") from None
    if rows and not all(datasets._is_number(c) for c in rows[0]):
        rows = rows[1:]
    if not rows:
        return None
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ConfigError(f"input {path}: rows have differing column counts {sorted(widths)}")
    try:
        return np.array([[float(c) for c in r] for r in rows])
    except ValueError as exc:
        raise ConfigError(f"input {path}: {exc}") from None


def cmd_predict(args):
    spec, params, std = load_model(args.model)
    x = read_features(args.input)
    if x is not None and x.shape[1] != spec.layer_sizes[0]:
        raise ConfigError(f"input has {x.shape[1]} columns, model expects {spec.layer_sizes[0]}")
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("row_id", "mean", "std"))
        if x is None:
            return EXIT_OK
        xs = (x - std["feature_mean"]) / std["feature_std"]
        mean, var = network.predictive(spec, params, xs)
        sigma_y, mu_y = float(std["target_std"]), float(std["target_mean"])
        for i, (m, v) in enumerate(zip(mean, var)):
            writer.writerow((i, repr(float(m * sigma_y + mu_y)), repr(float(math.sqrt(v) * sigma_y))))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="detvi", description="Deterministic variational inference for Bayesian networks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="run a dataset x method x split grid")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: config or CPU count)")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("verify", help="check the moment approximations against brute-force references")
    p.add_argument("--kind", choices=("relu", "heaviside", "toy"), required=True)
    p.add_argument("--grid", default="-6:6:1", help="mu grid as lo:hi:step or a comma list")
    p.add_argument("--rho", default=None, help="correlations as a comma list or lo:hi:step")
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--skip-tail", action="store_true", help="skip the |mu1| = 8 asymptote rows")
    p.add_argument("--model", default=None, help="trained model for --kind toy (default: fresh init)")
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="verify_out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("predict", help="predictive mean and std for feature rows")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except trainkit.NumericalDivergence as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
