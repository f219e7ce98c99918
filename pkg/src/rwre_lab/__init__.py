"""Monte Carlo laboratory for large deviations of nearest-neighbor random
walks in uniformly elliptic i.i.d. random environments.

The lab estimates logarithmic moment generating functions and rate functions
from regeneration blocks, builds harmonic functions and their Doob transform
kernels, samples the tilted chain, and certifies the variational identities
numerically against exact oracles on small instances.
"""

from .engine import EstimatorSummary, RunManifest, substream
from .environment import (
    EnvironmentModel,
    EnvironmentRealization,
    SiteLawMixture,
    Step,
    TransitionVector,
    classify_nestling,
    make_model,
    site_moment,
)
from .walk import KernelSpec, PathRecord, base_kernel, mean_velocity, simulate_path

__version__ = "0.1.0"

__all__ = [
    "EnvironmentModel",
    "EnvironmentRealization",
    "EstimatorSummary",
    "KernelSpec",
    "PathRecord",
    "RunManifest",
    "SiteLawMixture",
    "Step",
    "TransitionVector",
    "base_kernel",
    "classify_nestling",
    "make_model",
    "mean_velocity",
    "simulate_path",
    "site_moment",
    "substream",
]
