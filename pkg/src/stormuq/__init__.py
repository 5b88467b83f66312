"""Hierarchical Gaussian-process uncertainty quantification for storm precipitation forecasts.

Modules
-------
grid         rasters, buffers and error fields
covariance   exponential covariance and Gaussian log-likelihood
mle          per-storm maximum likelihood and Hessians
hier         Gibbs sampler for the parameter hierarchy
bias         spatial forecast-bias field
predict      predictive ensembles, maps and log scores
modelselect  Laplace-Metropolis evidence
simstudy     coverage simulation study and synthetic geometry
cli          file-based command-line pipeline
"""

__version__ = "0.1.0"

from .errors import DataError, NumericalError, StormUQError  # noqa: E402

__all__ = ["__version__", "DataError", "NumericalError", "StormUQError"]
