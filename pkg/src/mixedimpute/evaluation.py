"""Scoring metrics, model comparison and the replication-study driver."""
from __future__ import annotations

import json
import math
import os
import re
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import build_design, write_csv_rows, write_text_atomic
from .errors import EmptyMask, InvalidConfig, MissingInterval, MixedImputeError
from .imputation import impute_variable
from .inference.draws import PosteriorDrawSet
from .inference.fit import fit_model
from .inference.mcmc import McmcConfig
from .inference.ml import RilmFit, rilm_marginal_loglik
from . import kernels
from .models import MODELS, location_scale
from .simulation import default_designs, generate, resolve_tau0, truth_parameters


class StudyFailed(MixedImputeError, RuntimeError):
    """More than 10% of a scenario's replications failed."""


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def replication_error(truth, imputed, mask, subject):
    """Mean over subjects of the per-subject mean squared error on masked cells.

    Subjects without masked cells do not enter the average.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("no masked cells to score")
    sq = (np.asarray(imputed, dtype=float)[mask] - np.asarray(truth, dtype=float)[mask]) ** 2
    subj = np.asarray(subject)[mask]
    _, inv = np.unique(subj, return_inverse=True)
    per_subject = np.bincount(inv, weights=sq) / np.bincount(inv)
    return float(per_subject.mean())


def imputation_error(truths, imputeds, masks, subjects):
    """Average of :func:`replication_error` over replications (one entry per replication)."""
    if len(truths) == 0:
        raise InvalidConfig("no replications to score")
    errs = [replication_error(t, i, m, s) for t, i, m, s in zip(truths, imputeds, masks, subjects, strict=True)]
    return float(np.mean(errs))


def bias_and_coverage(estimates, lowers, uppers, truth):
    """``(bias, coverage)`` with coverage counting strictly interior truths."""
    est = np.asarray(estimates, dtype=float)
    lo = np.asarray(lowers, dtype=float)
    hi = np.asarray(uppers, dtype=float)
    if est.size == 0:
        raise InvalidConfig("no replications to score")
    if lo.shape != est.shape or hi.shape != est.shape or np.isnan(lo).any() or np.isnan(hi).any():
        raise MissingInterval("every replication must supply a lower and an upper bound")
    bias = float(np.mean(est - truth))
    coverage = float(np.mean((lo < truth) & (truth < hi)))
    return bias, coverage


def difference_ratio(errors):
    """``(worst - best) / worst`` over a collection of pipeline errors."""
    vals = np.asarray(list(errors.values()) if isinstance(errors, dict) else errors, dtype=float)
    worst, best = vals.max(), vals.min()
    if worst <= 0:
        return 0.0
    return float((worst - best) / worst)


def compute_bic(loglik, k_params, n_obs):
    return float(k_params * math.log(n_obs) - 2.0 * loglik)


# ---------------------------------------------------------------------------
# marginal log-likelihood at an estimate
# ---------------------------------------------------------------------------

def _gh_nodes(cov, n_nodes):
    t, w = np.polynomial.hermite.hermgauss(n_nodes)
    L = np.linalg.cholesky(cov)
    g1, g2 = np.meshgrid(t, t, indexing="ij")
    pts = math.sqrt(2.0) * np.column_stack([g1.ravel(), g2.ravel()]) @ L.T
    log_w = (np.log(w)[:, None] + np.log(w)[None, :]).ravel() - math.log(math.pi)
    return pts[:, 0], pts[:, 1], log_w


def random_effect_covariance(model, est):
    """Covariance of ``(v1, v2)`` implied by natural-scale estimates (dict)."""
    if model == "mels":
        s1, s2, r = est["sigma_v1"], est["sigma_v2"], est["rho_v1v2"]
        return np.array([[s1 * s1, r * s1 * s2], [r * s1 * s2, s2 * s2]])
    s1, s2, r, sl = est["sigma_eta1"], est["sigma_eta2"], est["rho_eta"], est["sigma_lambda"]
    g, d = est["gamma"], est["delta"]
    return np.array([
        [s1 * s1 + g * g * sl * sl, r * s1 * s2 + g * d * sl * sl],
        [r * s1 * s2 + g * d * sl * sl, s2 * s2 + d * d * sl * sl],
    ])


def marginal_loglik(model, estimate, design, n_nodes=20):
    """Log-likelihood of the observed responses with random effects integrated out.

    ``estimate`` maps natural parameter names to values. RILM is exact; MELS
    and SPLSME use tensor Gauss-Hermite quadrature over ``(v1, v2)`` (the
    shared effect of SPLSME is folded into their covariance).
    """
    use = design.observed
    get = estimate.get
    beta = np.array([get(f"beta[{c}]") for c in design.mean_names], dtype=float)
    if model == "rilm":
        theta = np.concatenate([[get("beta0")], beta, [get("alpha0"), get("sigma_v1")]])
        return rilm_marginal_loglik(theta, design)
    alpha = np.array([get(f"alpha[{c}]") for c in design.var_names], dtype=float)
    mu = np.zeros(design.n_rows)
    lv = np.zeros(design.n_rows)
    mu[use] = get("beta0") + (design.X_mean[use] @ beta if beta.size else 0.0)
    lv[use] = get("alpha0") + (design.X_var[use] @ alpha if alpha.size else 0.0)
    loc, ls, log_w = _gh_nodes(random_effect_covariance(model, estimate), n_nodes)
    per = kernels.node_marginal_by_subject(design.y, mu, lv, use, design.subj, design.n_subjects, loc, ls, log_w)
    return float(per.sum())


def fit_summary(fit, design):
    """:class:`FitSummary` with the marginal log-likelihood at the estimate filled in."""
    summary = fit.summary if isinstance(fit, RilmFit) else fit.summary(n_obs=design.n_obs)
    est = dict(zip(summary.names, summary.estimate))
    return replace(summary, loglik=marginal_loglik(summary.model, est, design), n_obs=design.n_obs)


# ---------------------------------------------------------------------------
# ELPD
# ---------------------------------------------------------------------------

@dataclass
class ElpdResult:
    elpd: float
    pointwise: np.ndarray
    min_ess: float
    unstable_weights: bool


def pointwise_loglik(draws, design):
    """``(S, n_obs)`` matrix of ``log p(y_ij | theta_s)`` over observed cells."""
    use = design.observed
    y = design.y[use]
    out = np.empty((draws.n_draws, int(use.sum())))
    for s in range(draws.n_draws):
        mu, lv = location_scale(draws.params(s), design)
        r = y - mu[use]
        out[s] = -0.5 * (kernels.LOG_2PI + lv[use] + r * r * np.exp(-lv[use]))
    return out


def compute_elpd(draws, design, truncation=99.5, min_ess=10.0):
    """Importance-sampling leave-one-out ELPD with truncated weights.

    Weights ``w_s = 1 / p(y_ij | theta_s)`` are capped at their
    ``truncation`` percentile (on the log scale) per point. ``unstable_weights``
    flags any point whose weight effective sample size falls below ``min_ess``.
    """
    ll = pointwise_loglik(draws, design)
    log_w = -ll
    cap = np.percentile(log_w, truncation, axis=0)
    log_w = np.minimum(log_w, cap[None, :])
    num = _logsumexp(log_w + ll)
    den = _logsumexp(log_w)
    point = num - den
    wn = np.exp(log_w - den[None, :])
    ess = 1.0 / np.sum(wn * wn, axis=0)
    return ElpdResult(float(point.sum()), point, float(ess.min()), bool((ess < min_ess).any()))


def _logsumexp(a):
    peak = a.max(axis=0)
    return peak + np.log(np.exp(a - peak[None, :]).sum(axis=0))


def elpd_for_fit(fit, design, rng, n_draws=1000):
    """ELPD for any fit; RILM uses asymptotic-normal draws."""
    draws = fit.draw_set(n_draws, rng) if isinstance(fit, RilmFit) else fit
    return compute_elpd(draws, design)


# ---------------------------------------------------------------------------
# replication study
# ---------------------------------------------------------------------------

ALL_PIPELINES = tuple((a, b) for a in MODELS for b in MODELS)


@dataclass
class StudyConfig:
    scenarios: list
    pipelines: tuple = ALL_PIPELINES
    modes: tuple = ("single", "multiple")
    replications: int = 100
    m: int = 10
    seed: int = 0
    mcmc: McmcConfig = field(default_factory=lambda: McmcConfig(warmup_iters=1000, sampling_iters=1500))
    param_models: tuple = MODELS
    compare: bool = True
    jobs: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise InvalidConfig("replications must be >= 1")
        if self.m < 1:
            raise InvalidConfig("m must be >= 1")
        if not self.scenarios:
            raise InvalidConfig("scenario grid is empty")
        for a, b in self.pipelines:
            if a not in MODELS or b not in MODELS:
                raise InvalidConfig(f"unknown pipeline {(a, b)}")
        for mode in self.modes:
            if mode not in ("single", "multiple"):
                raise InvalidConfig(f"unknown mode {mode!r}")


@dataclass
class EvaluationReport:
    errors: list
    bias_coverage: list
    comparison: list
    failures: dict
    replications: int
    records: list = field(default_factory=list, repr=False)

    def error_of(self, scenario, x1_model, y_model, mode):
        for row in self.errors:
            if (row["scenario"], row["x1_model"], row["y_model"], row["mode"]) == (scenario, x1_model, y_model, mode):
                return row["error"]
        raise KeyError((scenario, x1_model, y_model, mode))

    def coverage_of(self, scenario, model, parameter, variable="y"):
        for row in self.bias_coverage:
            if (row["scenario"], row["variable"], row["model"], row["parameter"]) == (scenario, variable, model, parameter):
                return row["coverage"]
        raise KeyError((scenario, model, parameter))

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        paths = {}
        for name, rows in (("errors", self.errors), ("bias_coverage", self.bias_coverage),
                           ("comparison", self.comparison)):
            path = os.path.join(out_dir, f"{name}.csv")
            header = list(rows[0]) if rows else _EMPTY_HEADERS[name]
            write_csv_rows(path, [header] + [[_cell(r[h]) for h in header] for r in rows])
            paths[name] = path
        return paths


_EMPTY_HEADERS = {
    "errors": ["scenario", "x1_model", "y_model", "mode", "error", "n_ok", "failures"],
    "bias_coverage": ["scenario", "variable", "model", "parameter", "truth", "bias", "coverage", "n_ok", "failures"],
    "comparison": ["scenario", "model", "bic", "elpd", "n_ok", "unstable_weights"],
}


def _cell(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("NA" if math.isnan(v) else str(v))
    return v


def scenario_id(index, scenario):
    return f"{index:02d}_" + re.sub(r"[^0-9A-Za-z.=,-]+", "_", scenario.label()).replace(",", "_")


def _derived_seed(*parts):
    words = [int(p) & (2**63 - 1) if isinstance(p, (int, np.integer)) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


def _fit(model, design, mcmc, seed):
    cfg = replace(mcmc, seed=seed)
    return fit_model(model, design, cfg)


def _error_type(exc):
    return f"{type(exc).__name__}: {exc}"


def run_replication(scenario, tau0, replication, study):
    """One replication of one scenario; returns a JSON-serialisable record."""
    sim = generate(scenario, replication, tau0=tau0)
    designs = default_designs(scenario.n_beeps)
    ds = sim.dataset
    mask = sim.mask
    subj = ds.subject_index
    seed = study.seed
    rec = {"replication": int(replication), "errors": {}, "params": {}, "comparison": {}, "failures": []}

    x1_models = sorted({a for a, _ in study.pipelines})
    y_models = sorted({b for _, b in study.pipelines} | set(study.param_models))
    x1_design = build_design(ds, designs["x1"], "x1")
    y_design = build_design(ds, designs["y"], "y")

    x1_fits, y_fits = {}, {}
    for model in x1_models:
        try:
            x1_fits[model] = _fit(model, x1_design, study.mcmc, _derived_seed(seed, replication, "x1", model))
        except MixedImputeError as exc:
            rec["failures"].append({"stage": "fit", "variable": "x1", "model": model, "error": _error_type(exc)})
    for model in y_models:
        try:
            y_fits[model] = _fit(model, y_design, study.mcmc, _derived_seed(seed, replication, "y", model))
        except MixedImputeError as exc:
            rec["failures"].append({"stage": "fit", "variable": "y", "model": model, "error": _error_type(exc)})

    for model in study.param_models:
        if model not in y_fits:
            continue
        summ = fit_summary(y_fits[model], y_design)
        truth = truth_parameters(scenario, "y", model, y_design, tau0=tau0)
        rec["params"][model] = {
            nm: [float(e), float(lo), float(hi), float(truth[nm])]
            for nm, e, lo, hi in zip(summ.names, summ.estimate, summ.lower, summ.upper)
        }
        if study.compare:
            rng = np.random.default_rng(_derived_seed(seed, replication, "elpd", model))
            el = elpd_for_fit(y_fits[model], y_design, rng)
            rec["comparison"][model] = {
                "bic": compute_bic(summ.loglik, summ.k_params, summ.n_obs), "elpd": el.elpd,
                "unstable_weights": el.unstable_weights,
            }

    impute_seed = _derived_seed(seed, replication, "impute")
    x1_imputed = {}
    for model in x1_models:
        if model not in x1_fits:
            continue
        for mode in study.modes:
            x1_imputed[model, mode] = impute_variable(
                ds, "x1", x1_fits[model], designs["x1"], m=study.m, mode=mode, seed=impute_seed
            )
    for a, b in study.pipelines:
        for mode in study.modes:
            key = f"{a}|{b}|{mode}"
            if (a, mode) not in x1_imputed or b not in y_fits:
                rec["errors"][key] = None
                continue
            res = impute_variable(
                ds, "y", y_fits[b], designs["y"], m=study.m, mode=mode, seed=impute_seed,
                datasets=x1_imputed[a, mode].completed,
            )
            rec["errors"][key] = replication_error(sim.truth["y"], res.pooled.column("y"), mask, subj)
    return rec


def _run_job(args):
    scenario, tau0, r, study, path = args
    rec = run_replication(scenario, tau0, r, study)
    if path is not None:
        write_text_atomic(path, json.dumps(rec, sort_keys=True, indent=1))
    return rec


def run_replication_study(study, out_dir=None):
    """Run every scenario x replication, aggregate, and (optionally) write the report.

    With ``out_dir``, per-replication records are stored under
    ``out_dir/records`` and reused on rerun.
    """
    records_by_scenario = []
    for si, scenario in enumerate(study.scenarios):
        sid = scenario_id(si, scenario)
        tau0 = resolve_tau0(scenario)
        rec_dir = os.path.join(out_dir, "records", sid) if out_dir else None
        todo, recs = [], {}
        for r in range(study.replications):
            path = os.path.join(rec_dir, f"rep_{r:04d}.json") if rec_dir else None
            if path and os.path.exists(path):
                with open(path, encoding="utf-8") as fh:
                    recs[r] = json.load(fh)
            else:
                todo.append((scenario, tau0, r, study, path))
        if study.jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=study.jobs) as pool:
                for job, rec in zip(todo, pool.map(_run_job, todo)):
                    recs[job[2]] = rec
        else:
            for job in todo:
                recs[job[2]] = _run_job(job)
        records_by_scenario.append((sid, scenario, [recs[r] for r in range(study.replications)]))

    report = aggregate(records_by_scenario, study)
    if out_dir:
        report.write(out_dir)
    bad = [sid for sid, frac in report.failures.items() if frac > 0.10]
    if bad:
        raise StudyFailed(f"more than 10% of replications failed in scenario(s) {bad}")
    return report


def aggregate(records_by_scenario, study):
    errors, bias_rows, comp_rows, failures = [], [], [], {}
    for sid, _scenario, recs in records_by_scenario:
        n = len(recs)
        failures[sid] = sum(1 for r in recs if r["failures"]) / n
        for mode in study.modes:
            for a in sorted({p[0] for p in study.pipelines}, key=MODELS.index):
                group = []
                for b in [p[1] for p in study.pipelines if p[0] == a]:
                    vals = [r["errors"].get(f"{a}|{b}|{mode}") for r in recs]
                    ok = [v for v in vals if v is not None]
                    row = {
                        "scenario": sid, "x1_model": a, "y_model": b, "mode": mode,
                        "error": float(np.mean(ok)) if ok else float("nan"), "n_ok": len(ok),
                        "failures": n - len(ok),
                    }
                    group.append(row)
                finite = {row["y_model"]: row["error"] for row in group if math.isfinite(row["error"])}
                best = min(finite, key=finite.get) if finite else ""
                worst = max(finite, key=finite.get) if finite else ""
                ratio = difference_ratio(finite) if finite else float("nan")
                for row in group:
                    row.update(best_y_model=best, worst_y_model=worst, difference_ratio=ratio)
                errors.extend(group)
        for model in study.param_models:
            ok = [r["params"][model] for r in recs if model in r["params"]]
            if not ok:
                continue
            for nm in ok[0]:
                arr = np.array([p[nm] for p in ok])
                bias, cov = bias_and_coverage(arr[:, 0], arr[:, 1], arr[:, 2], arr[0, 3])
                bias_rows.append({
                    "scenario": sid, "variable": "y", "model": model, "parameter": nm, "truth": float(arr[0, 3]),
                    "bias": bias, "coverage": cov, "n_ok": len(ok), "failures": n - len(ok),
                })
            if study.compare:
                cs = [r["comparison"][model] for r in recs if model in r["comparison"]]
                comp_rows.append({
                    "scenario": sid, "model": model, "bic": float(np.mean([c["bic"] for c in cs])),
                    "elpd": float(np.mean([c["elpd"] for c in cs])), "n_ok": len(cs),
                    "unstable_weights": sum(bool(c["unstable_weights"]) for c in cs),
                })
    recs_flat = [r for _, _, rs in records_by_scenario for r in rs]
    return EvaluationReport(errors, bias_rows, comp_rows, failures, study.replications, recs_flat)
