"""McKean-Vlasov / nonlinear Fokker-Planck solver with common-noise transform."""

__version__ = "0.1.0"

from .core import (
    DensityField,
    Grid1D,
    SignedField,
    TimeGrid,
    gaussian_density,
    l1_distance,
    l1_norm,
    mittag_leffler_half,
    mollified_delta,
    pair,
)

__all__ = [
    "__version__",
    "DensityField",
    "Grid1D",
    "SignedField",
    "TimeGrid",
    "gaussian_density",
    "l1_distance",
    "l1_norm",
    "mittag_leffler_half",
    "mollified_delta",
    "pair",
]
