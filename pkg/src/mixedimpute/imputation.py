"""Two-step Bayesian imputation, sequential chaining, pooling and ordinal display.

Step 1 takes ``m`` parameter sets (with per-subject random effects) from a
fit; step 2 draws every missing cell from the model's conditional normal
under each set. A set's mean and log-variance at a cell are

* RILM: ``beta0 + x'beta + v1``, ``alpha0``
* MELS: ``beta0 + x'beta + v1``, ``alpha0 + x'alpha + v2``
* SPLSME: as MELS with ``v1 = eta1 + gamma lambda`` and ``v2 = eta2 + delta lambda``.
"""
from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import build_design, export_csv, format_float, write_csv_rows
from .errors import CyclicDependency, InvalidConfig, MissingCovariateInMeanModel, NoMissingCells, NonAscendingCutoffs
from .inference.draws import draw_parameter_sets
from .inference.fit import fit_kind, fit_model
from .models import location_scale

DEFAULT_CUTOFFS = (1.5, 2.5, 3.5, 4.5, 5.5, 6.5)
MODES = ("single", "multiple")


@dataclass
class ImputationDraw:
    draw_index: int
    rows: np.ndarray
    mu_hat: np.ndarray
    sigma2_hat: np.ndarray
    y_hat: np.ndarray


@dataclass
class ImputationResult:
    """``m`` completed datasets for one variable plus their per-cell mean."""

    variable: str
    model: str
    mode: str
    m: int
    seed: int
    source: str
    rows: np.ndarray
    draws: list
    completed: list
    pooled: object
    provenance: dict = field(default_factory=dict)
    fit: object = field(default=None, repr=False)

    def values(self):
        """``(m, n_missing)`` array of imputed values."""
        return np.stack([d.y_hat for d in self.draws]) if self.draws else np.zeros((self.m, 0))

    def long_rows(self):
        """Long-format rows ``draw, subject, day, beep, variable, value, imputed``."""
        header = ["draw", "subject", "day", "beep", "variable", "value", "imputed"]
        out = [header]
        flag = np.zeros(self.pooled.n_rows, dtype=int)
        flag[self.rows] = 1
        sids = self.pooled.subject_ids
        for k, ds in enumerate(self.completed):
            col = ds.column(self.variable)
            for r in range(ds.n_rows):
                out.append([
                    k, sids[ds.subject_index[r]], int(ds.day[r]), int(ds.beep[r]), self.variable,
                    format_float(col[r]), int(flag[r]),
                ])
        return out

    def write_long_csv(self, path):
        write_csv_rows(path, self.long_rows())

    def write_pooled_csv(self, path):
        export_csv(self.pooled, path)


def _variable_stream(seed, variable):
    return np.random.SeedSequence([int(seed) & (2**63 - 1), zlib.crc32(variable.encode("utf-8"))])


def _cell_moments(params, design, rows):
    mu, logvar = location_scale(params, design)
    mu, logvar = mu[rows], logvar[rows]
    if np.isnan(mu).any() or np.isnan(logvar).any():
        raise MissingCovariateInMeanModel(
            f"a covariate of {design.response!r} is missing at a cell being imputed; impute it first"
        )
    return mu, np.exp(logvar)


def impute_variable(dataset, variable, fit, spec, m=10, mode="multiple", seed=0, datasets=None, param_sets=None):
    """Impute the missing cells of ``variable``.

    Parameters
    ----------
    dataset : PanelDataset
    variable : str
    fit : RilmFit or PosteriorDrawSet
        Draw source for step 1.
    spec : DesignSpec
        Design used by ``fit``.
    m : int
        Number of imputations (``mode="single"`` forces ``m = 1``).
    seed : int
    datasets : list of PanelDataset, optional
        Per-draw conditioning data (draw ``k`` reads its covariates from
        ``datasets[k]``); defaults to ``dataset`` for every draw.
    param_sets : list, optional
        Pre-drawn parameter sets, bypassing step 1.
    """
    if mode not in MODES:
        raise InvalidConfig(f"mode must be 'single' or 'multiple', got {mode!r}")
    if mode == "single":
        m = 1
    if m < 1:
        raise InvalidConfig("m must be >= 1")
    if datasets is not None and len(datasets) != m:
        raise InvalidConfig(f"{len(datasets)} conditioning datasets for m={m}")
    datasets = list(datasets) if datasets is not None else [dataset] * m
    col = np.asarray(dataset.column(variable))
    rows = np.flatnonzero(np.isnan(col))
    ss = _variable_stream(seed, variable)
    param_ss, *draw_ss = ss.spawn(m + 1)
    provenance = {"model": fit.model, "seed": int(seed), "source": fit_kind(fit)}
    if rows.size == 0:
        warnings.warn(NoMissingCells(f"{variable!r} has no missing cells; nothing imputed"), stacklevel=2)
        return ImputationResult(
            variable, fit.model, mode, m, int(seed), fit_kind(fit), rows, [], list(datasets), dataset, provenance
        )
    if param_sets is None:
        param_sets = draw_parameter_sets(fit, m, rng=np.random.default_rng(param_ss))
    draws, completed = [], []
    for k in range(m):
        base = datasets[k]
        design = build_design(base, spec, variable)
        mu, s2 = _cell_moments(param_sets[k], design, rows)
        y_hat = mu + np.sqrt(s2) * np.random.default_rng(draw_ss[k]).standard_normal(rows.size)
        filled = np.array(base.column(variable), dtype=float)
        filled[rows] = y_hat
        draws.append(ImputationDraw(k, rows, mu, s2, y_hat))
        completed.append(base.with_column(variable, filled))
    pooled_col = col.copy()
    pooled_col[rows] = np.mean([d.y_hat for d in draws], axis=0)
    pooled = dataset.with_column(variable, pooled_col)
    return ImputationResult(
        variable, fit.model, mode, m, int(seed), fit_kind(fit), rows, draws, completed, pooled, provenance
    )


def pool(result):
    """Per-cell arithmetic mean of the completed datasets."""
    if not result.completed:
        raise InvalidConfig("result has no completed datasets")
    if not result.draws:
        return result.pooled
    base = result.completed[0]
    vals = np.mean([ds.column(result.variable) for ds in result.completed], axis=0)
    return base.with_column(result.variable, vals)


def _check_order(dataset, order):
    position = {}
    for i, (var, _model, _spec) in enumerate(order):
        if var in position:
            raise CyclicDependency(f"{var!r} appears twice in the imputation order")
        position[var] = i
    for i, (var, _model, spec) in enumerate(order):
        for dep in spec.variables():
            if dep in ("day", "beep") or dep not in dataset.variable_names:
                continue
            if dep in position and position[dep] >= i and np.isnan(dataset.column(dep)).any():
                raise CyclicDependency(f"{var!r} depends on {dep!r}, which is imputed later")


def sequential_impute(dataset, order, m=10, mode="multiple", seed=0, mcmc=None, fits=None):
    """Impute variables in ``order``, chaining completed datasets draw by draw.

    ``order`` is a list of ``(variable, model, DesignSpec)``. Each later model
    is fitted once, on the data completed by the pooled values of the earlier
    variables, and its draw ``k`` is taken on completed dataset ``k`` of the
    earlier steps. ``fits`` may supply ready fits per variable.
    """
    if mode == "single":
        m = 1
    _check_order(dataset, order)
    fits = dict(fits or {})
    results = []
    chain = [dataset] * m
    fit_data = dataset
    for var, model, spec in order:
        fit = fits.get(var)
        if fit is None:
            fit = fit_model(model, build_design(fit_data, spec, var), mcmc)
        elif fit.model != model:
            raise InvalidConfig(f"supplied fit for {var!r} is {fit.model}, order says {model}")
        res = impute_variable(dataset, var, fit, spec, m=m, mode=mode, seed=seed, datasets=chain)
        res.fit = fit
        results.append(res)
        chain = res.completed
        fit_data = fit_data.with_column(var, res.pooled.column(var))
    return results


def ordinalize(values, cutoffs=DEFAULT_CUTOFFS, labels=None):
    """Map continuous values to ordinal labels with left-closed bins.

    ``v`` falls in bin ``k`` iff ``cutoffs[k-1] <= v < cutoffs[k]``; the two
    outer bins are open. ``NaN`` stays ``NaN``.
    """
    cut = np.asarray(cutoffs, dtype=float)
    if cut.ndim != 1 or cut.size == 0 or np.any(np.diff(cut) <= 0):
        raise NonAscendingCutoffs(f"cutoffs must be strictly ascending, got {list(cutoffs)}")
    labels = np.arange(1, cut.size + 2, dtype=float) if labels is None else np.asarray(labels, dtype=float)
    if labels.size != cut.size + 1:
        raise InvalidConfig(f"need {cut.size + 1} labels for {cut.size} cutoffs")
    v = np.asarray(values, dtype=float)
    idx = np.searchsorted(cut, np.where(np.isnan(v), 0.0, v), side="right")
    out = labels[idx]
    out = np.where(np.isnan(v), np.nan, out)
    return float(out) if np.ndim(values) == 0 else out
