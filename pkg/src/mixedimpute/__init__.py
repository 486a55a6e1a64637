"""Multiple imputation for intensive longitudinal panels with mixed location-scale models."""
from ._accel import BACKEND
from .data import DesignSpec, PanelDataset, build_design, export_csv, ingest_csv
from .models import (
    MelsParams,
    RilmParams,
    SplsmeParams,
    cholesky_inverse,
    cholesky_reparam,
    logistic,
    loglik,
    loglik_mels,
    loglik_rilm,
    loglik_splsme,
    missing_variance_share,
)

__version__ = "0.1.0"
