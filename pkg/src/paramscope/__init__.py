"""Spectral and checkpoint-delta diagnostics for transformer weight checkpoints."""

__version__ = "0.1.0"

from .checkpoint_io import (  # noqa: E402
    ContainerHandle,
    LayerMeta,
    WeightMatrix,
    as_weight_matrix,
    list_matrices,
    load_matrix,
    open_container,
)
from .classify import ComponentGroup, Ruleset, classify_layer  # noqa: E402
from .dynamics import DeltaStats, delta_stats, diff_checkpoints, layer_change_profile  # noqa: E402
from .report import (  # noqa: E402
    ModelReport,
    TrendSeries,
    alpha_histogram,
    analyze_container,
    band_color,
    band_proportion,
    classify_trend,
    compare_against_ancestor,
    emit_report,
)
from .spectral import (  # noqa: E402
    Esd,
    FitConfig,
    PowerLawFit,
    SpectralStats,
    effective_feature_number,
    effective_rank,
    esd,
    fit_power_law,
    layer_spectral_stats,
    matrix_effective_rank,
    singular_values,
)
