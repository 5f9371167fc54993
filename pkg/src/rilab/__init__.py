"""rilab: exact random-interlacement sampling and a vacant-set percolation
laboratory on Z^d, d >= 3."""

__version__ = "0.1.0"

from .geometry import BoxRegion, Window, boundary, enumerate_neighbors
from .green import GreenTable, build_green_table
from .equilibrium import (
    EquilibriumMeasure,
    capacity,
    equilibrium_measure,
    escape_probability_mc,
    hitting_probability,
)
from .rng import RngStream
from .sampler import (
    InterlacementSample,
    SamplerConfig,
    WindowSampler,
    sample_interlacement,
)

__all__ = [
    "BoxRegion",
    "Window",
    "boundary",
    "enumerate_neighbors",
    "GreenTable",
    "build_green_table",
    "EquilibriumMeasure",
    "capacity",
    "equilibrium_measure",
    "escape_probability_mc",
    "hitting_probability",
    "RngStream",
    "InterlacementSample",
    "SamplerConfig",
    "WindowSampler",
    "sample_interlacement",
    "__version__",
]
