import math

import numpy as np
import pytest

from mixedimpute import DesignSpec, PanelDataset, build_design
from mixedimpute.errors import EmptyMask, InvalidConfig, MissingInterval
from mixedimpute.evaluation import (
    StudyConfig,
    aggregate,
    bias_and_coverage,
    compute_bic,
    compute_elpd,
    difference_ratio,
    fit_summary,
    imputation_error,
    marginal_loglik,
    replication_error,
)
from mixedimpute.inference import McmcConfig, PosteriorDrawSet, fit_rilm_ml, run_mh
from mixedimpute.simulation import ScenarioConfig

from conftest import make_panel


def test_perfect_imputation_scores_zero():
    t = np.arange(6.0)
    assert replication_error(t, t, [1, 0, 1, 0, 1, 1], [0, 0, 0, 1, 1, 1]) == 0.0


def test_error_hand_values():
    assert replication_error([0.0, 0.0], [1.0, -1.0], [True, True], [0, 0]) == 1.0
    # subject a: cells (1, 3) -> mse 5; subject b: one cell 1 -> but masked pattern below gives 2 and 4
    truth = np.zeros(5)
    imputed = np.array([np.sqrt(2), np.sqrt(2), 2.0, 0.0, 9.0])
    mask = np.array([1, 1, 1, 0, 0], dtype=bool)
    subj = np.array([0, 0, 1, 1, 2])
    # subject 0 mse 2, subject 1 mse 4, subject 2 has nothing masked and is excluded
    assert replication_error(truth, imputed, mask, subj) == pytest.approx(3.0, abs=1e-14)
    # cell-equal weighting would give 8/3
    assert replication_error(truth, imputed, mask, subj) != pytest.approx(8 / 3)


def test_error_ordering_invariance():
    rng = np.random.default_rng(0)
    reps = [(rng.normal(size=12), rng.normal(size=12), rng.random(12) < 0.5, np.repeat([0, 1, 2], 4)) for _ in range(4)]
    for r in reps:
        r[2][0] = True
    base = imputation_error(*zip(*reps))
    assert imputation_error(*zip(*reps[::-1])) == pytest.approx(base, abs=1e-14)
    perm = rng.permutation(12)
    shuffled = [(t[perm], i[perm], m[perm], (2 - s)[perm]) for t, i, m, s in reps]
    assert imputation_error(*zip(*shuffled)) == pytest.approx(base, abs=1e-14)
    # two replications averaging 1 and 3
    one = ([0.0, 0.0], [1.0, -1.0], [True, True], [0, 0])
    three = ([0.0], [np.sqrt(3.0)], [True], [0])
    assert imputation_error(*zip(one, three)) == pytest.approx(2.0)


def test_error_preconditions():
    with pytest.raises(EmptyMask):
        replication_error([1.0], [1.0], [False], [0])
    with pytest.raises(InvalidConfig):
        imputation_error([], [], [], [])


def test_bias_and_coverage_hand_oracle():
    assert bias_and_coverage([1.0, 1.0], [0.5, 0.9], [1.5, 1.1], 1.0) == (0.0, 1.0)
    assert bias_and_coverage([2.0, 3.0], [1.5, 2.0], [2.5, 4.0], 1.0)[1] == 0.0
    est = [1.2, 0.9, 1.5, 0.8]
    lo = [0.5, 0.95, 1.0, 0.0]
    hi = [1.5, 1.2, 2.0, 0.99]
    # deviations 0.2, -0.1, 0.5, -0.2; a bound equal to the truth does not cover it
    bias, cov = bias_and_coverage(est, lo, hi, 1.0)
    assert bias == pytest.approx(0.1, abs=1e-15)
    assert cov == 0.5
    with pytest.raises(MissingInterval):
        bias_and_coverage([1.0], [np.nan], [2.0], 1.0)


def test_unbiased_synthetic_estimator():
    rng = np.random.default_rng(1)
    est = 3.0 + rng.standard_t(5, size=1000)
    bias, cov = bias_and_coverage(est, est - 1.96, est + 1.96, 3.0)
    assert abs(bias) < 3 * est.std(ddof=1) / math.sqrt(1000)
    assert 0.0 <= cov <= 1.0


def test_difference_ratio_table_note():
    r = difference_ratio({"rilm": 9.51, "mels": 9.35, "splsme": 9.40})
    assert r == pytest.approx((9.51 - 9.35) / 9.51, abs=1e-15)
    assert round(100 * r, 2) == 1.68


def test_bic():
    assert compute_bic(0.0, 2, math.e**2) == pytest.approx(4.0, abs=1e-12)
    assert compute_bic(-12.5, 0, 50) == 25.0
    ks = [compute_bic(-100.0, k, 30) for k in range(6)]
    assert all(b > a for a, b in zip(ks, ks[1:]))


def test_bic_recomputation_for_rilm_fit():
    ds = make_panel(n_subjects=6, n_days=3, n_beeps=4, seed=4, missing_frac=0.2)
    d = build_design(ds, DesignSpec(["x"]), "y")
    fit = fit_rilm_ml(d)
    s = fit_summary(fit, d)
    assert s.k_params == 4 and s.n_obs == d.n_obs
    assert s.loglik == pytest.approx(fit.summary.loglik, abs=1e-10)
    assert compute_bic(s.loglik, s.k_params, s.n_obs) == 4 * math.log(d.n_obs) - 2 * s.loglik


def test_quadrature_marginal_matches_rilm_limit():
    ds = make_panel(n_subjects=5, n_days=2, n_beeps=4, seed=6, missing_frac=0.2)
    d = build_design(ds, DesignSpec(["x"], ["x"]), "y")
    est = {"beta0": 1.9, "beta[x]": 0.2, "alpha0": -0.1, "alpha[x]": 0.0,
           "sigma_v1": 0.8, "sigma_v2": 1e-6, "rho_v1v2": 0.0}
    rilm = marginal_loglik("rilm", {"beta0": 1.9, "beta[x]": 0.2, "alpha0": -0.1, "sigma_v1": 0.8}, d)
    gaps = [abs(marginal_loglik("mels", est, d, n_nodes=k) - rilm) for k in (20, 30, 40, 60)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-8


def _single_draw_set(d, n_draws=1):
    names = ["beta0", "beta[x]", "alpha0", "sigma_v1"]
    return PosteriorDrawSet(
        model="rilm", names=names, values=np.tile([2.0, 0.3, 0.1, 1.0], (n_draws, 1)),
        effects={"v1": np.tile(np.linspace(-0.5, 0.5, d.n_subjects), (n_draws, 1))},
        chain=np.zeros(n_draws, dtype=int), subject_ids=d.subject_ids, mean_names=["x"], var_names=[], miss_names=[],
    )


def test_elpd_single_draw_is_direct_log_density():
    ds = make_panel(n_subjects=4, seed=7, missing_frac=0.2)
    d = build_design(ds, DesignSpec(["x"]), "y")
    draws = _single_draw_set(d)
    p = draws.params(0)
    obs = d.observed
    mu = p.beta0 + p.beta[0] * d.X_mean[obs, 0] + p.v1[d.subj[obs]]
    direct = np.sum(-0.5 * np.log(2 * np.pi * np.exp(p.alpha0)) - (d.y[obs] - mu) ** 2 / (2 * np.exp(p.alpha0)))
    assert compute_elpd(draws, d).elpd == pytest.approx(direct, abs=1e-12)
    assert compute_elpd(_single_draw_set(d, 7), d).elpd == pytest.approx(direct, abs=1e-12)


def _mels_panel(rng, n=20, ni=30):
    x = rng.normal(size=n * ni)
    s = np.repeat(np.arange(n), ni)
    v1, v2 = rng.normal(size=n), 0.5 * rng.normal(size=n)
    y = 1.0 + x + v1[s] + np.exp(0.5 * (0.8 * x + v2[s])) * rng.normal(size=n * ni)
    y[rng.random(n * ni) < 0.2] = np.nan
    occ = np.tile(np.arange(ni), n)
    return PanelDataset([f"s{i}" for i in s], 1 + occ // 10, 1 + occ % 10, {"x": x, "y": y})


def test_elpd_prefers_true_generator():
    reps, wins = 100, 0
    for r in range(reps):
        ds = _mels_panel(np.random.default_rng(1000 + r))
        cfg = McmcConfig(chains=1, warmup_iters=500, sampling_iters=1000, seed=r)
        scores = []
        for spec in (DesignSpec(["x"], ["x"]), DesignSpec(["x"], [])):
            d = build_design(ds, spec, "y")
            scores.append(compute_elpd(run_mh("mels", d, cfg), d).elpd)
        wins += scores[0] > scores[1]
    assert wins >= 90


def test_zero_replications_is_an_error():
    with pytest.raises(InvalidConfig):
        StudyConfig(scenarios=[ScenarioConfig()], replications=0)


def test_aggregate_from_records():
    study = StudyConfig(scenarios=[ScenarioConfig()], pipelines=(("rilm", "rilm"), ("rilm", "mels")),
                        modes=("multiple",), replications=2, param_models=("rilm",), compare=False)
    recs = [
        {"replication": 0, "errors": {"rilm|rilm|multiple": 9.0, "rilm|mels|multiple": 8.0},
         "params": {"rilm": {"alpha0": [1.0, 0.5, 1.5, 0.0]}}, "comparison": {}, "failures": []},
        {"replication": 1, "errors": {"rilm|rilm|multiple": 11.0, "rilm|mels|multiple": None},
         "params": {"rilm": {"alpha0": [1.5, 1.0, 2.0, 0.0]}}, "comparison": {},
         "failures": [{"stage": "fit", "variable": "y", "model": "mels", "error": "x"}]},
    ]
    rep = aggregate([("00_s", None, recs)], study)
    assert rep.error_of("00_s", "rilm", "rilm", "multiple") == 10.0
    row = [r for r in rep.errors if r["y_model"] == "mels"][0]
    assert row["error"] == 8.0 and row["failures"] == 1
    assert row["best_y_model"] == "mels" and row["difference_ratio"] == pytest.approx(0.2)
    assert rep.failures["00_s"] == 0.5
    assert rep.coverage_of("00_s", "rilm", "alpha0") == 0.0
