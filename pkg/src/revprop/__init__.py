"""Memory-efficient backpropagation for volumetric super-resolution networks.

Reversible (RevNet) blocks plus stack-boundary checkpointing, applied to a
3D ESPCN, with an element-counting ledger that makes the memory/compute
tradeoff measurable.
"""

from revprop.tensor import (
    MemoryLedger,
    ShapeError,
    Tensor,
    concat_channels,
    elementwise,
    ledger_scope,
    ledger_snapshot,
    split_channels,
)

__all__ = [
    "MemoryLedger",
    "ShapeError",
    "Tensor",
    "concat_channels",
    "elementwise",
    "ledger_scope",
    "ledger_snapshot",
    "split_channels",
]

__version__ = "0.1.0"
