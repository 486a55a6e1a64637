"""Single entry point that fits any of the three models."""
from ..errors import InvalidConfig
from .draws import PosteriorDrawSet
from .mcmc import McmcConfig, run_mh
from .ml import RilmFit, fit_rilm_ml


def fit_model(model, design, mcmc=None):
    """RILM by marginal ML, MELS and SPLSME by MH.

    Returns a :class:`RilmFit` or a :class:`PosteriorDrawSet`; both are valid
    inputs to :func:`draw_parameter_sets`.
    """
    model = str(model).lower()
    if model == "rilm":
        return fit_rilm_ml(design)
    if model in ("mels", "splsme"):
        return run_mh(model, design, mcmc or McmcConfig())
    raise InvalidConfig(f"unknown model {model!r}; expected rilm, mels or splsme")


def fit_kind(fit):
    if isinstance(fit, RilmFit):
        return "ml-asymptotic"
    if isinstance(fit, PosteriorDrawSet):
        return "mcmc"
    raise TypeError(f"not a fit: {type(fit).__name__}")
