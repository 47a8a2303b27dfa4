"""Objective terms: VAE, adversarial and cycle-consistency losses and their composition.

Per-patch terms are averaged over the batch. KL terms use either the Monte
Carlo estimator (``"mc"``, one draw per patch) or the matched-component
upper bound (``"matched"``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractViolation
from .gmm_latent import PosteriorParams, kl_matched_upper_bound, kl_mc_estimate, sample_posterior
from .networks import ModelBundle, discriminator_logits, encode, generate

KL_ESTIMATORS = ("mc", "matched")


@dataclass
class LossWeights:
    lambda0: float = 1.0  # adversarial
    lambda1: float = 0.1  # VAE KL
    lambda2: float = 10.0  # VAE reconstruction
    lambda3: float = 0.1  # cycle KL on the source code
    lambda4: float = 10.0  # cycle KL on the translated code and cycle reconstruction

    def __post_init__(self):
        bad = [f.name for f in fields(self) if not (math.isfinite(getattr(self, f.name)) and getattr(self, f.name) >= 0)]
        if bad:
            raise ConfigError(f"loss weights must be finite and >= 0: {', '.join(bad)}", bad)


@dataclass
class LossReport:
    vae_1: torch.Tensor
    vae_2: torch.Tensor
    gan_1: torch.Tensor
    gan_2: torch.Tensor
    cc_1: torch.Tensor
    cc_2: torch.Tensor
    disc_1: torch.Tensor
    disc_2: torch.Tensor
    total_gen: torch.Tensor
    total_disc: torch.Tensor

    def floats(self) -> dict:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    def first_non_finite(self) -> Optional[str]:
        for f in fields(self):
            if not math.isfinite(float(getattr(self, f.name).detach())):
                return f.name
        return None

    def to_json(self, step: int) -> str:
        return json.dumps({"step": step, **self.floats()})


def reconstruction_nll(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Unit-scale Laplace negative log-likelihood without its constant: per-patch sum of |x - x_hat|.

    A (P, P) pair gives a scalar; batched input gives one value per patch.
    """
    if x.shape != x_hat.shape:
        raise ContractViolation(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    diff = (x - x_hat).abs()
    if diff.dim() == 2:
        return diff.sum()
    return diff.reshape(diff.shape[0], -1).sum(1)


def kl_term(q: PosteriorParams, bundle: ModelBundle, estimator: str, generator) -> torch.Tensor:
    prior = bundle.prior.params()
    if estimator == "mc":
        return kl_mc_estimate(q, prior, 1, generator)
    if estimator == "matched":
        return kl_matched_upper_bound(q, prior)
    raise ConfigError(f"unknown KL estimator {estimator!r}", ["kl_estimator"])


def _other(domain: int) -> int:
    if domain not in (1, 2):
        raise ContractViolation(f"domain must be 1 or 2, got {domain!r}")
    return 3 - domain


def vae_loss(
    bundle: ModelBundle,
    domain: int,
    patch: torch.Tensor,
    weights: LossWeights,
    generator: Optional[torch.Generator] = None,
    temperature: float = 1.0,
    kl_estimator: str = "mc",
) -> torch.Tensor:
    """lambda1 KL(q_d || p) + lambda2 NLL(x_d | G_d(z)), z ~ q_d(z | x_d)."""
    q = encode(bundle, domain, patch)
    z = sample_posterior(q, temperature, "relaxed", generator)
    recon = generate(bundle, domain, z)
    kl = kl_term(q, bundle, kl_estimator, generator)
    nll = reconstruction_nll(patch.reshape(recon.shape).to(recon.dtype), recon)
    return (weights.lambda1 * kl + weights.lambda2 * nll).mean()


def gan_loss_generator(
    bundle: ModelBundle,
    source_domain: int,
    target_domain: int,
    patch: torch.Tensor,
    weights: LossWeights,
    generator: Optional[torch.Generator] = None,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Non-saturating -lambda0 log D_t(G_t(z)), z ~ q_s(z | x_s); D_t receives no gradient."""
    if source_domain == target_domain:
        raise ContractViolation("source and target domains must differ")
    q = encode(bundle, source_domain, patch)
    z = sample_posterior(q, temperature, "relaxed", generator)
    fake = generate(bundle, target_domain, z)
    logits = discriminator_logits(bundle, target_domain, fake, frozen=True)
    return weights.lambda0 * F.softplus(-logits).mean()


def gan_loss_discriminator(bundle: ModelBundle, domain: int, real_patch, fake_patch) -> torch.Tensor:
    """-log D(real) - log(1 - D(fake)), with the fake detached."""
    if real_patch.shape[-2:] != fake_patch.shape[-2:]:
        raise ContractViolation("real and fake patches differ in shape")
    real_logits = discriminator_logits(bundle, domain, real_patch)
    fake_logits = discriminator_logits(bundle, domain, fake_patch.detach())
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def cycle_loss(
    bundle: ModelBundle,
    source_domain: int,
    patch: torch.Tensor,
    weights: LossWeights,
    generator: Optional[torch.Generator] = None,
    temperature: float = 1.0,
    kl_estimator: str = "mc",
) -> torch.Tensor:
    """lambda3 KL(q_s(x_s)) + lambda4 KL(q_t(x_s->t)) + lambda4 NLL(x_s | G_s(z'))."""
    target = _other(source_domain)
    q_s = encode(bundle, source_domain, patch)
    z = sample_posterior(q_s, temperature, "relaxed", generator)
    translated = generate(bundle, target, z)
    q_t = encode(bundle, target, translated)
    z_back = sample_posterior(q_t, temperature, "relaxed", generator)
    back = generate(bundle, source_domain, z_back)
    kl_s = kl_term(q_s, bundle, kl_estimator, generator)
    kl_t = kl_term(q_t, bundle, kl_estimator, generator)
    nll = reconstruction_nll(patch.reshape(back.shape).to(back.dtype), back)
    return (weights.lambda3 * kl_s + weights.lambda4 * kl_t + weights.lambda4 * nll).mean()


def _direction_terms(bundle, source, x, weights, generator, temperature, kl_estimator):
    """Shared forward pass for one translation direction.

    Returns (vae_source, gan_target, cc_source, fake_target). The source
    code z feeds the reconstruction, the translation and the cycle.
    """
    target = _other(source)
    q_s = encode(bundle, source, x)
    z = sample_posterior(q_s, temperature, "relaxed", generator)
    kl_s = kl_term(q_s, bundle, kl_estimator, generator)

    recon = generate(bundle, source, z)
    vae = (weights.lambda1 * kl_s + weights.lambda2 * reconstruction_nll(x, recon)).mean()

    fake = generate(bundle, target, z)
    gan = weights.lambda0 * F.softplus(-discriminator_logits(bundle, target, fake, frozen=True)).mean()

    q_t = encode(bundle, target, fake)
    z_back = sample_posterior(q_t, temperature, "relaxed", generator)
    kl_t = kl_term(q_t, bundle, kl_estimator, generator)
    back = generate(bundle, source, z_back)
    cc = (weights.lambda3 * kl_s + weights.lambda4 * kl_t + weights.lambda4 * reconstruction_nll(x, back)).mean()
    return vae, gan, cc, fake


def _as_batch4(batch: torch.Tensor, dtype) -> torch.Tensor:
    if batch.dim() == 3:
        batch = batch[:, None]
    if batch.dim() != 4 or batch.shape[0] == 0:
        raise ContractViolation(f"batches must be nonempty (B, 1, P, P) tensors, got {tuple(batch.shape)}")
    return batch.to(dtype)


def total_objective(
    bundle: ModelBundle,
    batch_1: torch.Tensor,
    batch_2: torch.Tensor,
    weights: LossWeights,
    generator: Optional[torch.Generator] = None,
    temperature: float = 1.0,
    kl_estimator: str = "mc",
    with_disc: bool = True,
) -> LossReport:
    """Generator-side and discriminator-side totals of the min-max objective.

    ``total_gen`` only reaches encoders, generators, domain variances and the
    prior; ``total_disc`` only reaches the discriminators. With
    ``with_disc=False`` the discriminator terms are reported as zeros.
    """
    dtype = bundle.domain_log_vars_1.dtype
    x1, x2 = _as_batch4(batch_1, dtype), _as_batch4(batch_2, dtype)
    vae_1, gan_2, cc_1, fake_2 = _direction_terms(bundle, 1, x1, weights, generator, temperature, kl_estimator)
    vae_2, gan_1, cc_2, fake_1 = _direction_terms(bundle, 2, x2, weights, generator, temperature, kl_estimator)
    total_gen = vae_1 + vae_2 + cc_1 + cc_2 + gan_1 + gan_2
    if with_disc:
        disc_1 = gan_loss_discriminator(bundle, 1, x1, fake_1)
        disc_2 = gan_loss_discriminator(bundle, 2, x2, fake_2)
    else:
        disc_1 = disc_2 = torch.zeros((), dtype=dtype)
    return LossReport(
        vae_1=vae_1, vae_2=vae_2, gan_1=gan_1, gan_2=gan_2, cc_1=cc_1, cc_2=cc_2,
        disc_1=disc_1, disc_2=disc_2, total_gen=total_gen, total_disc=disc_1 + disc_2,
    )


@torch.no_grad()
def translate_batch(bundle, source, x, generator, temperature: float = 1.0) -> torch.Tensor:
    """Sampled translation x_s -> G_t(z), z ~ q_s(z | x_s), without gradients."""
    q = encode(bundle, source, x)
    z = sample_posterior(q, temperature, "relaxed", generator)
    return generate(bundle, _other(source), z)
