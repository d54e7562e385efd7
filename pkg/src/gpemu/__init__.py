"""Neural surrogate priors for Gaussian processes.

Train decoder networks that emulate exact GP prior draws, then use them as
drop-in latent-field priors inside gradient-based MCMC, alongside exact,
random-feature and inducing-point baselines.
"""

__version__ = "0.1.0"

from ._perf import tune_allocator as _tune_allocator

_tune_allocator()

from .autodiff import Tape, Tensor, backward  # noqa: F401,E402
from .kernels import KernelSpec, Locations, kernel_value, materialize  # noqa: F401,E402
