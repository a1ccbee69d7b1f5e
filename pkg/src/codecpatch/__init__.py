"""codecpatch: codec-guided sparse video patchification toolkit."""

__version__ = "0.1.0"

from .errors import (
    CodecPatchError,
    ConfigError,
    GeometryError,
    InfeasibleBudgetError,
    InputFormatError,
    InvariantError,
)
from .ingest import GopPartition, RawClip, load_clip, partition_gops
from .motion import (
    MotionField,
    ResidualMap,
    broadcast_motion,
    compute_residual,
    estimate_clip_motion,
    estimate_motion,
    export_signals,
    import_codec_signals,
)
from .saliency import (
    FusionConfig,
    PatchMask,
    PatchSaliencyGrid,
    aggregate_patch_saliency,
    allocate_clip_budget,
    frame_saliency,
    select_mask_fixed_ratio,
)
from .patchify import (
    TokenLayout,
    intervene,
    patchify_chunk,
    patchify_codec,
    patchify_image,
    token_accounting,
)
from .layout_io import read_layout, write_layout
from .rope import PositionTriple, RopeConfig, relative_offset, rotate
from .cluster import (
    CentroidBank,
    Embedding,
    LabelAssignment,
    assign_topL,
    discrimination_loss,
    kmeans,
    video_embed,
)

__all__ = [
    "CodecPatchError", "ConfigError", "GeometryError", "InfeasibleBudgetError",
    "InputFormatError", "InvariantError",
    "RawClip", "GopPartition", "load_clip", "partition_gops",
    "MotionField", "ResidualMap", "estimate_motion", "estimate_clip_motion",
    "broadcast_motion", "compute_residual", "export_signals",
    "import_codec_signals",
    "FusionConfig", "PatchSaliencyGrid", "PatchMask",
    "aggregate_patch_saliency", "frame_saliency", "select_mask_fixed_ratio",
    "allocate_clip_budget",
    "TokenLayout", "patchify_codec", "patchify_chunk", "patchify_image",
    "token_accounting", "intervene", "read_layout", "write_layout",
    "RopeConfig", "PositionTriple", "rotate", "relative_offset",
    "Embedding", "CentroidBank", "LabelAssignment", "kmeans", "assign_topL",
    "video_embed", "discrimination_loss",
    "__version__",
]
