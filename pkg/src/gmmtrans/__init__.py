"""Patch-based unpaired image translation with a shared Gaussian-mixture latent space."""

__version__ = "0.1.0"

from .gmm_latent import (  # noqa: E402
    GmmParams,
    LatentSample,
    PosteriorParams,
    gaussian_kl_diag,
    kl_matched_upper_bound,
    kl_mc_estimate,
    mixture_log_density,
    sample_posterior,
)
from .losses import LossReport, LossWeights, total_objective  # noqa: E402
from .networks import ModelBundle, NetSpec, discriminate, encode, generate, init_params  # noqa: E402
from .patches import PatchGrid, make_grid, sample_random_patches, stitch  # noqa: E402
from .phantom import PhantomPair, PhantomSpec, build_dataset, generate_phantom_pair  # noqa: E402
