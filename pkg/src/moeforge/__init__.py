"""moeforge: desk-scale tooling for hybrid dense-MoE training infrastructure.

Subpackages cover the bit-exact tensor container (FP8-E4M3FN/BF16/FP32),
parallel layout planning, bidirectional checkpoint sharding, deterministic
collective-schedule simulation, adaptive multi-task weighting, and the
evaluation/reward metric suite, all behind one CLI.
"""

__version__ = "0.1.0"

from . import collectives, convert, layout, metrics, scheduler, tensor_store
from .errors import MoeforgeError

__all__ = [
    "collectives",
    "convert",
    "layout",
    "metrics",
    "scheduler",
    "tensor_store",
    "MoeforgeError",
    "__version__",
]
