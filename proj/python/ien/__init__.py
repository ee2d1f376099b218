"""Early intention estimation from affordance maps and reaching-hand frames."""

from ._ien import (
    BboxOutOfGrid,
    CenterOutOfGrid,
    ConfigMismatch,
    CorruptArchive,
    Dataset,
    IenError,
    LengthMismatch,
    Model,
    NotNormalized,
    SequenceTooLong,
    ShapeMismatch,
    build_dataset,
    decide,
    f_value,
    gaussian_heatmap,
    generate_scene,
    init_model,
    kl_divergence,
    normalize_confidences,
    object_confidences,
    parameter_count,
    probability_trace,
    reference_config,
    render_affordance_channels,
    train,
    window_count,
)

__all__ = [name for name in dir() if not name.startswith("_")]
