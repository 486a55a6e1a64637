import numpy as np
import pytest

from mixedimpute import DesignSpec, PanelDataset, build_design, kernels
from mixedimpute.errors import DivergedChain, InvalidConfig, NonFiniteTarget
from mixedimpute.inference import McmcConfig, run_mh
from mixedimpute.simulation import ScenarioConfig, design_for, generate

DEGENERATE = {"s11": 1e-12, "s21": 0.0, "s22": 1e-12, "alpha0": 0.0}


def _normal_mean_design(seed=0, n=20):
    y = np.random.default_rng(seed).normal(1.0, 1.0, size=n)
    ds = PanelDataset(np.repeat(["a", "b"], n // 2), np.ones(n, int), np.tile(np.arange(1, n // 2 + 1), 2), {"y": y})
    return y, build_design(ds, DesignSpec(), "y")


def test_conjugate_normal_mean():
    y, d = _normal_mean_design()
    cfg = McmcConfig(chains=2, warmup_iters=2000, sampling_iters=10_000, seed=1, fixed=DEGENERATE)
    draws = run_mh("mels", d, cfg)
    b = draws.column("beta0")
    assert b.size == 20_000
    # prior N(0, 10^2), unit known variance
    prec = y.size + 1.0 / 100.0
    assert abs(b.mean() - y.sum() / prec) < 0.02
    assert abs(b.std() - 1.0 / np.sqrt(prec)) < 0.02


def test_discrete_target_stationary_distribution():
    steps = 1_000_000
    x = np.array([-1.0, 0.0, 1.0])
    target = np.exp(-0.5 * x**2)
    target /= target.sum()
    rng = np.random.default_rng(5)
    counts = kernels.discrete_metropolis(
        np.log(target), 0, rng.integers(1, 3, size=steps), np.log(rng.random(steps))
    )
    tv = 0.5 * np.abs(counts / steps - target).sum()
    assert tv < 0.01


def test_uphill_move_always_accepted():
    log_p = np.log([0.1, 0.9])
    # largest possible uniform draw still accepts a move to higher density
    counts = kernels.discrete_metropolis(log_p, 0, np.ones(1, dtype=np.int64), np.log(np.array([1.0 - 1e-16])))
    np.testing.assert_array_equal(counts, [0, 1])


@pytest.fixture(scope="module")
def sim():
    return generate(ScenarioConfig.from_mapping({"seed": 11}), replication=0)


@pytest.fixture(scope="module")
def splsme_draws(sim):
    cfg = McmcConfig(chains=2, warmup_iters=1000, sampling_iters=1500, seed=3)
    return run_mh("splsme", design_for(sim, "y"), cfg)


def test_seeded_runs_are_identical(sim):
    d = design_for(sim, "x1")
    cfg = McmcConfig(chains=2, warmup_iters=100, sampling_iters=200, seed=9)
    a, b = run_mh("mels", d, cfg), run_mh("mels", d, cfg)
    np.testing.assert_array_equal(a.values, b.values)
    for k in a.effects:
        np.testing.assert_array_equal(a.effects[k], b.effects[k])
    c = run_mh("mels", d, McmcConfig(chains=2, warmup_iters=100, sampling_iters=200, seed=10))
    assert not np.array_equal(a.values, c.values)


def test_parallel_chains_match_serial(sim):
    d = design_for(sim, "x1")
    serial = run_mh("mels", d, McmcConfig(chains=2, warmup_iters=50, sampling_iters=100, seed=4))
    parallel = run_mh("mels", d, McmcConfig(chains=2, warmup_iters=50, sampling_iters=100, seed=4, jobs=2))
    np.testing.assert_array_equal(serial.values, parallel.values)


def test_draw_invariants(splsme_draws):
    for nm in splsme_draws.names:
        col = splsme_draws.column(nm)
        assert np.all(np.isfinite(col))
        if nm.startswith("sigma_"):
            assert np.all(col > 0)
        if nm.startswith("rho_"):
            assert np.all(np.abs(col) < 1)
    assert {"gamma", "delta", "tau0", "sigma_lambda", "rho_eta"} <= set(splsme_draws.names)


def test_adaptation_reaches_target_band(sim, splsme_draws):
    mels = run_mh("mels", design_for(sim, "y"), McmcConfig(chains=2, warmup_iters=1000, sampling_iters=1500, seed=3))
    for draws in (mels, splsme_draws):
        for block, rates in draws.acceptance.items():
            for r in rates:
                assert 0.15 <= r <= 0.45, (draws.model, block, r)


def test_stuck_block_raises_diverged_chain():
    _, d = _normal_mean_design()
    cfg = McmcConfig(
        chains=1, warmup_iters=0, sampling_iters=200, seed=0, fixed=DEGENERATE,
        proposal_scales={"beta": 1e6}, divergence_window=50,
    )
    with pytest.raises(DivergedChain):
        run_mh("mels", d, cfg)


def test_non_finite_start_is_rejected():
    _, d = _normal_mean_design()
    with pytest.raises(NonFiniteTarget):
        run_mh("mels", d, McmcConfig(chains=1, warmup_iters=0, sampling_iters=20, fixed={"alpha0": 800.0}))


def test_config_validation():
    with pytest.raises(InvalidConfig):
        McmcConfig(chains=2, sampling_iters=15)
    with pytest.raises(InvalidConfig):
        McmcConfig(proposal_scales={"beta": 0.0})
    with pytest.raises(InvalidConfig):
        McmcConfig(prior_spec={"coefficient_sd": -1})
    _, d = _normal_mean_design()
    with pytest.raises(InvalidConfig):
        run_mh("mels", d, McmcConfig(chains=1, sampling_iters=20, fixed={"bogus": 1.0}))
