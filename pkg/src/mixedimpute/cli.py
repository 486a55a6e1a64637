"""``mixedimpute`` command line: simulate, fit, impute, replicate.

Each subcommand reads an optional YAML config; flags override config keys.
Every output is written atomically and listed with its SHA-256 in
``manifest.json`` inside the output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import itertools
import json
import math
import os
import sys
import warnings

import numpy as np
import yaml

from .data import DesignSpec, build_design, export_csv, ingest_csv, write_csv_rows, write_text_atomic
from .errors import InvalidConfig, MixedImputeError
from .evaluation import (
    ALL_PIPELINES,
    StudyConfig,
    compute_bic,
    elpd_for_fit,
    fit_summary,
    run_replication_study,
)
from .imputation import DEFAULT_CUTOFFS, ordinalize, sequential_impute
from .inference.draws import PosteriorDrawSet, Z95
from .inference.fit import fit_model
from .inference.mcmc import McmcConfig, PriorSpec
from .models import MODELS
from .simulation import ScenarioConfig, generate


# ---------------------------------------------------------------------------
# config helpers
# ---------------------------------------------------------------------------

def load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise InvalidConfig(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise InvalidConfig(f"{path}: not valid YAML ({exc})") from None
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise InvalidConfig(f"{path}: top level must be a mapping")
    return cfg


def _check_keys(cfg, allowed, where):
    extra = sorted(set(cfg) - set(allowed))
    if extra:
        raise InvalidConfig(f"{where}{extra[0]}: unknown key")


def _mcmc_config(cfg, seed, jobs=None):
    cfg = dict(cfg or {})
    names = {f.name for f in dataclasses.fields(McmcConfig)}
    _check_keys(cfg, names, "mcmc.")
    if "prior_spec" in cfg:
        ps = cfg["prior_spec"] or {}
        _check_keys(ps, {f.name for f in dataclasses.fields(PriorSpec)}, "mcmc.prior_spec.")
        cfg["prior_spec"] = PriorSpec(**ps)
    cfg.setdefault("seed", seed)
    if jobs is not None:
        cfg["jobs"] = jobs
    return McmcConfig(**cfg)


def _seed(args, cfg):
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise InvalidConfig("seed: required (pass --seed or set it in the config)")
    try:
        return int(seed)
    except (TypeError, ValueError):
        raise InvalidConfig(f"seed: must be an integer, got {seed!r}") from None


def _design(cfg, where):
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise InvalidConfig(f"{where}: must be a mapping")
    _check_keys(cfg, {"mean", "variance", "missing"}, f"{where}.")
    return DesignSpec.from_mapping(cfg)


def _load_data(cfg):
    if not isinstance(cfg, dict) or "path" not in cfg:
        raise InvalidConfig("data.path: required")
    _check_keys(cfg, {"path", "schema", "missing_tokens", "missingness_covariates"}, "data.")
    kwargs = {}
    if "missing_tokens" in cfg:
        kwargs["sentinels"] = tuple(cfg["missing_tokens"])
    if "missingness_covariates" in cfg:
        kwargs["missingness_covariate_names"] = tuple(cfg["missingness_covariates"])
    return ingest_csv(cfg["path"], schema=cfg.get("schema"), **kwargs)


class Outputs:
    """Collects written files for the manifest."""

    def __init__(self, out_dir, command, config):
        self.dir = out_dir
        self.command = command
        self.config = config
        self.files = {}
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.dir, name)

    def add(self, name):
        with open(self.path(name), "rb") as fh:
            self.files[name] = hashlib.sha256(fh.read()).hexdigest()

    def csv(self, name, rows):
        write_csv_rows(self.path(name), rows)
        self.add(name)

    def json(self, name, obj):
        write_text_atomic(self.path(name), _dumps(obj))
        self.add(name)

    def finish(self):
        manifest = {"command": self.command, "config": self.config, "outputs": dict(sorted(self.files.items()))}
        write_text_atomic(self.path("manifest.json"), _dumps(manifest))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _dumps(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def _r(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    scen_cfg = dict(cfg)
    scen_cfg["seed"] = seed
    scenario = ScenarioConfig.from_mapping(scen_cfg)
    sim = generate(scenario, replication=args.replication)
    out = Outputs(args.out, "simulate", {"scenario": scenario.to_mapping(), "replication": args.replication})
    export_csv(sim.dataset, out.path("data.csv"))
    out.add("data.csv")
    out.json("truth.json", sim.truth_record())
    out.finish()
    print(f"wrote {sim.dataset.n_rows} rows ({sim.dataset.missing_rate('y'):.1%} of y missing) to {args.out}")


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

FIT_KEYS = {"data", "response", "model", "design", "mcmc", "seed", "elpd_draws"}


def _fit_from_config(args):
    cfg = load_config(args.config)
    _check_keys(cfg, FIT_KEYS, "")
    seed = _seed(args, cfg)
    model = (args.model or cfg.get("model") or "").lower()
    if model not in MODELS:
        raise InvalidConfig(f"model: must be one of {MODELS}, got {model!r}")
    if "response" not in cfg:
        raise InvalidConfig("response: required")
    return cfg, seed, model


def cmd_fit(args):
    cfg, seed, model = _fit_from_config(args)
    ds = _load_data(cfg.get("data"))
    spec = _design(cfg.get("design"), "design")
    design = build_design(ds, spec, cfg["response"])
    mcmc = _mcmc_config(cfg.get("mcmc"), seed, args.jobs)
    fit = fit_model(model, design, mcmc)
    summary = fit_summary(fit, design)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    el = elpd_for_fit(fit, design, rng, n_draws=int(cfg.get("elpd_draws", 1000)))

    resolved = {"model": model, "response": cfg["response"], "design": spec.to_mapping(), "seed": seed,
                "data": cfg.get("data"), "mcmc": dataclasses.asdict(mcmc) if model != "rilm" else None}
    out = Outputs(args.out, "fit", resolved)
    rows = [["parameter", "estimate", "lower_2.5", "upper_97.5"]]
    rows += [[r["parameter"], _r(r["estimate"]), _r(r["lower"]), _r(r["upper"])] for r in summary.table()]
    out.csv("summary.csv", rows)
    draws = fit if isinstance(fit, PosteriorDrawSet) else fit.draw_set(1000, rng)
    out.csv("draws.csv", [[_cell(v) for v in row] for row in draws.csv_rows()])
    diag = {
        "model": model, "method": summary.method, "n_obs": summary.n_obs, "k_params": summary.k_params,
        "loglik": summary.loglik, "bic": compute_bic(summary.loglik, summary.k_params, summary.n_obs),
        "elpd": el.elpd, "elpd_unstable_weights": el.unstable_weights,
    }
    if isinstance(fit, PosteriorDrawSet):
        diag["chains"] = fit.n_chains
        diag["acceptance_by_chain"] = [
            {blk: rates[c] for blk, rates in fit.acceptance.items()} for c in range(fit.n_chains)
        ]
        diag["parameters"] = fit.diagnostics
    else:
        diag["boundary"] = fit.boundary
        diag["within_variance"] = summary.extra.get("within_variance")
    out.json("diagnostics.json", diag)
    out.finish()
    for r in summary.table():
        print(f"{r['parameter']:24s} {r['estimate']:10.4f} [{r['lower']:10.4f}, {r['upper']:10.4f}]")


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# impute
# ---------------------------------------------------------------------------

IMPUTE_KEYS = {"data", "order", "m", "mode", "mcmc", "seed", "cutoffs", "labels"}


def _order(cfg, model_override):
    order = cfg.get("order")
    if not order:
        raise InvalidConfig("order: required (list of {variable, model, design})")
    steps = []
    for i, step in enumerate(order):
        if not isinstance(step, dict):
            raise InvalidConfig(f"order[{i}]: must be a mapping")
        _check_keys(step, {"variable", "model", "design"}, f"order[{i}].")
        model = (model_override or step.get("model") or "").lower()
        if model not in MODELS:
            raise InvalidConfig(f"order[{i}].model: must be one of {MODELS}, got {model!r}")
        if "variable" not in step:
            raise InvalidConfig(f"order[{i}].variable: required")
        steps.append((step["variable"], model, _design(step.get("design"), f"order[{i}].design")))
    return steps


def _caterpillar(fit, design, rng):
    """Per-subject random scale effect (location effect for RILM) with a 95% interval."""
    rows = [["subject", "effect", "estimate", "lower", "upper"]]
    if isinstance(fit, PosteriorDrawSet):
        if fit.model == "mels":
            arr = fit.effects["v2"]
        else:
            arr = fit.effects["eta2"] + fit.column("delta")[:, None] * fit.effects["lambda"]
        est = arr.mean(axis=0)
        lo, hi = np.percentile(arr, [2.5, 97.5], axis=0)
        name = "v2"
    else:
        est, var = fit.conditional_intercepts(fit.theta)
        lo, hi = est - Z95 * np.sqrt(var), est + Z95 * np.sqrt(var)
        name = "v1"
    for sid, e, a, b in zip(design.subject_ids, est, lo, hi):
        rows.append([sid, name, _r(e), _r(a), _r(b)])
    return rows


def cmd_impute(args):
    cfg = load_config(args.config)
    _check_keys(cfg, IMPUTE_KEYS, "")
    seed = _seed(args, cfg)
    mode = args.mode or cfg.get("mode", "multiple")
    if mode not in ("single", "multiple"):
        raise InvalidConfig(f"mode: must be single or multiple, got {mode!r}")
    m = int(args.m if args.m is not None else cfg.get("m", 10))
    order = _order(cfg, args.model)
    ds = _load_data(cfg.get("data"))
    mcmc = _mcmc_config(cfg.get("mcmc"), seed, args.jobs)
    cutoffs = cfg.get("cutoffs", DEFAULT_CUTOFFS)
    labels = cfg.get("labels")

    results = sequential_impute(ds, order, m=m, mode=mode, seed=seed, mcmc=mcmc)
    pooled = ds
    for res in results:
        pooled = pooled.with_column(res.variable, res.pooled.column(res.variable))

    resolved = {
        "data": cfg.get("data"), "seed": seed, "m": m, "mode": mode, "cutoffs": list(cutoffs),
        "order": [{"variable": v, "model": mo, "design": s.to_mapping()} for v, mo, s in order],
        "mcmc": dataclasses.asdict(mcmc),
    }
    out = Outputs(args.out, "impute", resolved)
    final = results[-1]
    long_rows = [results[0].long_rows()[0]]
    for res in results:
        # draws of every variable read from the final chained datasets
        long_rows += _long_from(final, res)
    out.csv("imputations_long.csv", long_rows)
    export_csv(pooled, out.path("pooled.csv"))
    out.add("pooled.csv")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    for (var, model, spec), res in zip(order, results):
        imputed = np.zeros(ds.n_rows, dtype=bool)
        imputed[res.rows] = True
        vals = pooled.column(var)
        ords = ordinalize(vals, cutoffs, labels)
        lab = np.arange(1, len(cutoffs) + 2, dtype=float) if labels is None else np.asarray(labels, float)
        hist = [["bin", "count", "source"]]
        for source, sel in (("observed", ~imputed), ("imputed", imputed)):
            for b in lab:
                hist.append([_fmt_label(b), int(np.sum(ords[sel] == b)), source])
        out.csv(f"histogram_{var}.csv", hist)
        out.csv(f"caterpillar_{var}.csv", _caterpillar(res.fit, build_design(pooled, spec, var), rng))
        traj = [["subject", "day", "beep", "value", "source"]]
        sids = ds.subject_ids
        for r in range(ds.n_rows):
            traj.append([sids[ds.subject_index[r]], int(ds.day[r]), int(ds.beep[r]), _r(vals[r]),
                         "imputed" if imputed[r] else "observed"])
        out.csv(f"trajectory_{var}.csv", traj)
    out.finish()
    for res in results:
        print(f"imputed {res.rows.size} cells of {res.variable} with {res.model} (m={res.m}, {res.mode})")


def _fmt_label(b):
    return str(int(b)) if float(b).is_integer() else repr(float(b))


def _long_from(final, res):
    rows = []
    flag = np.zeros(final.pooled.n_rows, dtype=int)
    flag[res.rows] = 1
    sids = final.pooled.subject_ids
    for k, ds in enumerate(final.completed):
        col = ds.column(res.variable)
        for r in range(ds.n_rows):
            rows.append([k, sids[ds.subject_index[r]], int(ds.day[r]), int(ds.beep[r]), res.variable,
                         repr(float(col[r])), int(flag[r])])
    return rows


# ---------------------------------------------------------------------------
# replicate
# ---------------------------------------------------------------------------

REPLICATE_KEYS = {"seed", "scenario", "grid", "pipelines", "modes", "replications", "m", "mcmc", "param_models",
                  "compare"}


def _scenarios(cfg):
    base = ScenarioConfig.from_mapping(cfg.get("scenario") or {})
    grid = cfg.get("grid") or {}
    if not isinstance(grid, dict):
        raise InvalidConfig("grid: must map dotted scenario keys to lists of values")
    keys = list(grid)
    values = []
    for k in keys:
        v = grid[k]
        values.append(v if isinstance(v, list) else [v])
    return [base.with_overrides(dict(zip(keys, combo))) for combo in itertools.product(*values)]


def cmd_replicate(args):
    cfg = load_config(args.config)
    _check_keys(cfg, REPLICATE_KEYS, "")
    seed = _seed(args, cfg)
    pipelines = cfg.get("pipelines", "all")
    pipelines = ALL_PIPELINES if pipelines == "all" else tuple(tuple(p) for p in pipelines)
    mcmc_cfg = dict({"warmup_iters": 1000, "sampling_iters": 1500}, **(cfg.get("mcmc") or {}))
    study = StudyConfig(
        scenarios=_scenarios(cfg),
        pipelines=pipelines,
        modes=tuple(cfg.get("modes", ("single", "multiple"))),
        replications=int(cfg.get("replications", 100)),
        m=int(args.m if args.m is not None else cfg.get("m", 10)),
        seed=seed,
        mcmc=_mcmc_config(mcmc_cfg, seed),
        param_models=tuple(cfg.get("param_models", MODELS)),
        compare=bool(cfg.get("compare", True)),
        jobs=int(args.jobs or 1),
    )
    resolved = {
        "seed": seed, "replications": study.replications, "m": study.m, "modes": list(study.modes),
        "pipelines": [list(p) for p in study.pipelines], "scenarios": [s.to_mapping() for s in study.scenarios],
        "mcmc": dataclasses.asdict(study.mcmc), "param_models": list(study.param_models), "compare": study.compare,
    }
    out = Outputs(args.out, "replicate", resolved)
    try:
        report = run_replication_study(study, out_dir=args.out)
    finally:
        for name in ("errors.csv", "bias_coverage.csv", "comparison.csv"):
            if os.path.exists(out.path(name)):
                out.add(name)
        out.finish()
    for row in report.errors:
        print(f"{row['scenario']} {row['x1_model']:>6s}->{row['y_model']:<6s} {row['mode']:8s} {row['error']:.4f}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="mixedimpute", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="random seed (required here or in the config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=None, help="worker processes")

    p = sub.add_parser("simulate", help="generate one MNAR panel dataset")
    common(p)
    p.add_argument("--replication", type=int, default=0, help="replication index (RNG stream)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit RILM / MELS / SPLSME to a dataset")
    common(p)
    p.add_argument("--model", choices=MODELS)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("impute", help="sequential two-step imputation")
    common(p)
    p.add_argument("--model", choices=MODELS, help="model for every step (overrides the config)")
    p.add_argument("--m", type=int, help="number of imputations")
    p.add_argument("--mode", choices=("single", "multiple"))
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("replicate", help="Monte Carlo replication study")
    common(p)
    p.add_argument("--m", type=int, help="number of imputations")
    p.set_defaults(func=cmd_replicate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            args.func(args)
    except (MixedImputeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, InvalidConfig) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
