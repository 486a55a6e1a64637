"""Split-R-hat and effective sample size for multi-chain draws."""
import numpy as np


def _as_chains(draws):
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("draws must be (n_chains, n_draws)")
    return x


def split_chains(draws):
    x = _as_chains(draws)
    half = x.shape[1] // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain")
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def split_rhat(draws):
    """Split potential scale reduction factor.

    Returns ``(rhat, zero_variance)``; a chain set with no within- and no
    between-chain variance reports ``(1.0, True)``.
    """
    x = split_chains(draws)
    m, n = x.shape
    means = x.mean(axis=1)
    within = x.var(axis=1, ddof=1).mean()
    between = n * means.var(ddof=1)
    if within <= 0.0:
        if between <= 1e-300:
            return 1.0, True
        return float("inf"), False
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within)), False


def _autocov(x):
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n]
    return acov / n


def ess(draws):
    """Multi-chain effective sample size (Geyer initial monotone sequence)."""
    x = _as_chains(draws)
    m, n = x.shape
    if n < 4:
        return float(m * n)
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1)
    within = chain_var.mean()
    var_plus = within * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative pair, made monotone
    tau = -1.0
    prev = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        tau += 2.0 * pair
        prev = pair
        t += 2
    tau = max(tau, 1.0 / np.log10(m * n + 10))
    return float(m * n / tau)


def summarize(chains_by_param, acceptance=None):
    """Per-parameter ``{"rhat", "ess", "zero_variance"}`` (+ acceptance if given).

    ``chains_by_param`` maps a name to an ``(n_chains, n_draws)`` array.
    """
    out = {}
    for name, arr in chains_by_param.items():
        rhat, flat = split_rhat(arr)
        out[name] = {"rhat": rhat, "ess": ess(arr), "zero_variance": flat}
        if acceptance is not None and name in acceptance:
            out[name]["acceptance"] = acceptance[name]
    return out
