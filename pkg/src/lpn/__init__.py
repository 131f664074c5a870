"""Latent program networks: learn a continuous space of grid programs and search it at test time."""

__version__ = "0.1.0"

from .errors import LPNError  # noqa: E402
from .grids import Grid, TaskInstance, load_arc_json  # noqa: E402
from .model import LPN  # noqa: E402
from .nncore import ARCH_PRESETS, ArchConfig  # noqa: E402
from .search import SearchConfig, latent_optimize  # noqa: E402

__all__ = [
    "ARCH_PRESETS",
    "ArchConfig",
    "Grid",
    "LPN",
    "LPNError",
    "SearchConfig",
    "TaskInstance",
    "latent_optimize",
    "load_arc_json",
]
