import numpy as np
import pytest

from mixedimpute.errors import InsufficientDraws
from mixedimpute.inference import ess, evenly_spaced_indices, split_rhat, summarize


def test_constant_chains_report_unit_rhat_with_flag():
    rhat, flat = split_rhat(np.full((2, 100), 3.0))
    assert rhat == 1.0 and flat


def test_stationary_chains_have_small_rhat():
    x = np.random.default_rng(0).standard_normal((2, 10_000))
    assert split_rhat(x)[0] < 1.05


def test_separated_chains_have_large_rhat():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 10_000)) + np.array([[0.0], [10.0]])
    assert split_rhat(x)[0] > 2


def test_ess_of_white_noise_and_ar1():
    rng = np.random.default_rng(2)
    iid = rng.standard_normal((2, 5000))
    assert 8000 < ess(iid) < 12_000
    phi = 0.9
    ar = np.zeros((2, 5000))
    for t in range(1, 5000):
        ar[:, t] = phi * ar[:, t - 1] + rng.standard_normal(2)
    # AR(1) integrated autocorrelation time is (1 + phi) / (1 - phi) = 19
    assert ess(ar) == pytest.approx(10_000 / 19, rel=0.3)


def test_summarize_shape():
    rng = np.random.default_rng(3)
    out = summarize({"a": rng.standard_normal((2, 200)), "b": np.ones((2, 200))}, acceptance={"a": 0.3})
    assert set(out) == {"a", "b"}
    assert out["b"]["zero_variance"] and out["a"]["acceptance"] == 0.3


def test_evenly_spaced_indices():
    idx = evenly_spaced_indices(5000, 10)
    assert idx == list(range(250, 5000, 500))
    assert evenly_spaced_indices(1, 1) == [0]
    with pytest.raises(InsufficientDraws):
        evenly_spaced_indices(3, 4)
