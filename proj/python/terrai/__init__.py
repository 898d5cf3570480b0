"""Nitrogen prescription maps from soil-health rasters."""

from ._terrai import (
    NODATA,
    ConfigError,
    DependencyError,
    IngestError,
    ShapeError,
    TerraiError,
    UNet,
    co2_equivalent,
    default_channels,
    default_config,
    delta_energy,
    efficiency_gain,
    expected_parameter_count,
    extract_patches,
    generate_scene,
    green_report,
    iqr_partition,
    joules_to_kwh,
    masked_rmse,
    patch_metrics,
    reconstruct_map,
    remap_nodata,
    run_eval,
    run_green_report,
    run_prep,
    run_synth,
    run_train,
    vegetation_index,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
