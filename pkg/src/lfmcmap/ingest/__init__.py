from .labels import (  # noqa: F401
    DEFAULT_COLUMN_MAP,
    DEFAULT_DATE_RANGE,
    ParseResult,
    RejectedRow,
    SiteObservation,
    aggregate_same_day_site,
    enrich_observations,
    filter_samples,
    parse_labels,
)
from .cube import (  # noqa: F401
    DEFAULT_MODALITIES,
    MODALITY_ORDER,
    Aggregator,
    InputCube,
    ManifestEntry,
    ModalitySpec,
    Variability,
    add_months,
    composite_scenes,
    horn_slope,
    load_cube,
    load_manifest,
    month_of,
    month_range,
    resample_raster,
    resample_to_monthly,
)
