"""LFMC mapping toolkit: from field fuel-moisture labels and multimodal
rasters to trained regressors and wall-to-wall 10 m moisture maps."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    DEFAULT_CAP,
    ElevationBand,
    FreshDryWeights,
    LandCoverClass,
    LfmcSample,
    Season,
    cap_lfmc,
    compute_lfmc,
    denormalize_target,
    elevation_band,
    ndvi,
    normalize_target,
    season_of,
)
from .errors import ConfigError, DataError, DomainError, LfmcError  # noqa: F401
