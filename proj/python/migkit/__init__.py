"""Layout-guided diffusion toolkit: layout DSL, annotation curation, synthetic
benchmark and a toy LoRA denoiser, backed by a C++ core."""

from ._migkit import (
    LayoutError,
    Model,
    RecordError,
    bbox_iou,
    detect,
    filter_records,
    generate_scenes,
    grad_check,
    layout_adherence,
    layout_validity_score,
    param_count,
    parse_layout,
    render_layout,
    score_record,
    serialize_layout,
)

__all__ = [
    "LayoutError",
    "Model",
    "RecordError",
    "bbox_iou",
    "detect",
    "filter_records",
    "generate_scenes",
    "grad_check",
    "layout_adherence",
    "layout_validity_score",
    "param_count",
    "parse_layout",
    "render_layout",
    "score_record",
    "serialize_layout",
]
