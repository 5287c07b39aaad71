"""Joint optimization of VLBI site selection and image reconstruction.

Modules:
    autodiff  -- reverse-mode automatic differentiation over float64 arrays
    ising     -- fully-connected binary Ising models and exact oracles
    gibbs     -- exact and relaxed (differentiable) Gibbs sampling
    vlbi      -- array geometry, uv coverage, visibilities, closures, masking
    recon     -- blur kernels, image losses, and the two decoder networks
    train     -- the joint objective, optimizer loop, and experiment protocols
    cli       -- command-line entry point
"""

__version__ = "1.0.0"

from . import autodiff, gibbs, ising, recon, train, vlbi  # noqa: F401
