"""Reading plates into model-ready arrays, plus synthetic toy plates."""
from .manifest import (
    ALL_CHANNELS,
    BF_CHANNELS,
    IF_CHANNELS,
    MOA_GROUPS,
    ManifestError,
    PlateManifest,
    SitePair,
    SiteRef,
    build_manifest,
    check_disjoint,
    is_informative,
    load_plate,
    load_site,
    load_split_config,
    read_manifest,
    reference_split_config,
    write_manifest,
)
from .preprocess import EPS_BLACK, PreprocessParams, percentile_stretch, resize_area
from .toy import GroupEffect, ToyPlateConfig, generate_toy_dataset, generate_toy_plate, read_truth

__all__ = [
    "ALL_CHANNELS", "BF_CHANNELS", "IF_CHANNELS", "MOA_GROUPS", "EPS_BLACK",
    "ManifestError", "PlateManifest", "SitePair", "SiteRef", "PreprocessParams",
    "GroupEffect", "ToyPlateConfig",
    "build_manifest", "check_disjoint", "is_informative", "load_plate", "load_site", "load_split_config",
    "read_manifest", "reference_split_config", "write_manifest", "percentile_stretch",
    "resize_area", "generate_toy_plate", "generate_toy_dataset", "read_truth",
]
