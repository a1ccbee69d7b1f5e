"""ovpt_bridge: array-batch loader for .ovpt token layouts.

Read-only consumer of the exchange format written by the codecpatch CLI,
plus an independent reference implementation of the 3D rotary position
rotation for cross-implementation agreement checks.
"""

__version__ = "0.1.0"

from .loader import LayoutFormatError, TokenBatch, load_layout, serialize_records
from .rope_ref import rope_reference, split_pairs

__all__ = [
    "LayoutFormatError",
    "TokenBatch",
    "load_layout",
    "serialize_records",
    "rope_reference",
    "split_pairs",
    "__version__",
]
