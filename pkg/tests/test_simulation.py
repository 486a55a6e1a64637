import math

import numpy as np
import pytest

from mixedimpute.errors import InvalidConfig, NoBracket
from mixedimpute.inference import natural_names
from mixedimpute.simulation import (
    ScenarioConfig,
    calibrate_tau0,
    default_designs,
    design_for,
    expected_missing_rate,
    generate,
    truth_parameters,
)

NO_TIME = {"tau1": 0.0, "tau2": 0.0, "tau3": 0.0, "sigma_lambda": 0.0}


def test_negative_infinity_intercept_gives_no_missing_cells():
    cfg = ScenarioConfig.from_mapping({"missing": dict(NO_TIME, tau0="-inf")})
    sim = generate(cfg)
    assert not sim.mask.any()
    assert not np.isnan(sim.dataset.column("y")).any()


def test_calibration_analytic_cases():
    cfg = ScenarioConfig.from_mapping({"missing": NO_TIME})
    assert abs(calibrate_tau0(cfg, 0.5)) < 1e-6
    assert calibrate_tau0(cfg, 0.2) == pytest.approx(math.log(0.25), abs=1e-3)
    with pytest.raises(NoBracket):
        calibrate_tau0(cfg, 1 - 1e-12)
    with pytest.raises(InvalidConfig):
        calibrate_tau0(cfg, 1.5)


def test_expected_rate_increases_in_tau0():
    cfg = ScenarioConfig.from_mapping({})
    rates = [expected_missing_rate(cfg, t) for t in np.linspace(-6, 4, 41)]
    assert np.all(np.diff(rates) > 0)


def test_calibrated_rate_over_100_datasets():
    cfg = ScenarioConfig.from_mapping({})
    tau0 = calibrate_tau0(cfg)
    assert abs(expected_missing_rate(cfg, tau0) - 0.20) < 0.005
    rates = [generate(cfg, r, tau0=tau0).mask.mean() for r in range(100)]
    assert abs(np.mean(rates) - 0.20) < 0.01


def test_masks_coincide_and_layout():
    sim = generate(ScenarioConfig.from_mapping({}), replication=3)
    ds = sim.dataset
    assert ds.n_rows == 600 and ds.n_subjects == 20
    np.testing.assert_array_equal(np.isnan(ds.column("x1")), sim.mask)
    np.testing.assert_array_equal(np.isnan(ds.column("y")), sim.mask)
    assert not np.isnan(ds.column("x2")).any()
    obs = ~sim.mask
    np.testing.assert_array_equal(ds.column("y")[obs], sim.truth["y"][obs])


def test_generation_is_seeded():
    cfg = ScenarioConfig.from_mapping({"seed": 5})
    a, b = generate(cfg, 2), generate(cfg, 2)
    assert a.dataset == b.dataset
    np.testing.assert_array_equal(a.truth["y"], b.truth["y"])
    assert generate(cfg, 3).dataset != a.dataset


def _noise_only(n_subjects=500):
    zero = {"gamma": 0.0, "delta": 0.0, "sigma_eta1": 0.0, "sigma_eta2": 0.0}
    return ScenarioConfig.from_mapping({
        "n_subjects": n_subjects, "x2": {"mu": 2.0, "var": 0.0},
        "missing": {"sigma_lambda": 0.0}, "x1": zero, "y": zero,
    })


def test_grand_mean_matches_law_of_large_numbers():
    cfg = _noise_only()
    y = generate(cfg).truth["y"]
    a, b = cfg.x1, cfg.y
    want = b["beta0"] + b["beta1"] * (a["beta0"] + a["beta2"] * 2.0) + b["beta2"] * 2.0
    assert abs(y.mean() - want) < 3 * y.std(ddof=1) / math.sqrt(y.size)


def test_regression_on_truth_recovers_mean_coefficients():
    cfg = ScenarioConfig.from_mapping({"n_subjects": 500})
    sim = generate(cfg)
    n, J = cfg.n_subjects, cfg.n_days * cfg.n_beeps
    y = sim.truth["y"].reshape(n, J)
    x1 = sim.truth["x1"].reshape(n, J)
    x2 = sim.truth["x2"]
    # within-subject slope on x1 removes every subject-level effect
    xc, yc = x1 - x1.mean(1, keepdims=True), y - y.mean(1, keepdims=True)
    b1 = (xc * yc).sum() / (xc * xc).sum()
    r = yc - b1 * xc
    se1 = math.sqrt((r * r).sum() / (n * (J - 1) - 1) / (xc * xc).sum())
    assert abs(b1 - cfg.y["beta1"]) < 3 * se1
    # subject means given beta1 against x2 give the intercept and x2 slope
    ybar = y.mean(1) - cfg.y["beta1"] * x1.mean(1)
    X = np.column_stack([np.ones(n), x2])
    coef, res, *_ = np.linalg.lstsq(X, ybar, rcond=None)
    cov = res[0] / (n - 2) * np.linalg.inv(X.T @ X)
    assert abs(coef[0] - cfg.y["beta0"]) < 3 * math.sqrt(cov[0, 0])
    assert abs(coef[1] - cfg.y["beta2"]) < 3 * math.sqrt(cov[1, 1])


def test_invalid_scenarios_name_the_key():
    with pytest.raises(InvalidConfig, match=r"y\.rho"):
        ScenarioConfig.from_mapping({"y": {"rho": 1.5}})
    with pytest.raises(InvalidConfig, match=r"x1\.bogus"):
        ScenarioConfig.from_mapping({"x1": {"bogus": 1}})
    with pytest.raises(InvalidConfig, match="target_missing_rate"):
        ScenarioConfig.from_mapping({"target_missing_rate": 0.0})
    with pytest.raises(InvalidConfig, match="colour"):
        ScenarioConfig.from_mapping({"colour": 1})
    with pytest.raises(InvalidConfig, match=r"y\.nope"):
        ScenarioConfig.from_mapping({}).with_overrides({"y.nope": 1})


def test_overrides_and_label():
    cfg = ScenarioConfig.from_mapping({}).with_overrides({"y.alpha0": 2, "y.rho": -0.8})
    assert cfg.y["alpha0"] == 2.0
    assert cfg.label() == "alpha0=2,rho=-0.8,gamma=-0.5,delta=0.5"


def test_truth_parameters_marginalize_shared_effect():
    cfg = ScenarioConfig.from_mapping({})
    sim = generate(cfg)
    d = design_for(sim, "y")
    mels = truth_parameters(cfg, "y", "mels", d)
    assert mels["sigma_v1"] == pytest.approx(math.sqrt(1.0 + 0.25))
    assert mels["rho_v1v2"] == pytest.approx((-0.2 - 0.25) / 1.25)
    assert mels["beta[x1]"] == 1.0 and mels["beta[dummy(beep=1)]"] == 0.0
    spl = truth_parameters(cfg, "y", "splsme", d, tau0=-2.0)
    assert spl["tau0"] == -2.0 and spl["tau[dummy(beep=6)]"] == 0.5
    assert set(spl) == set(default_names("splsme", d))


def default_names(model, d):
    return natural_names(model, d.mean_names, d.var_names, d.miss_names)


def test_default_designs_time_terms():
    spec = default_designs(6)["y"]
    assert [t.name for t in spec.missing_covariates] == ["cont(day)", "dummy(beep=1)", "dummy(beep=6)"]
