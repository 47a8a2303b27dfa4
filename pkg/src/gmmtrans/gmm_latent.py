"""Probability math for the shared Gaussian-mixture latent space.

All covariances are diagonal and stored as log-variances. Every function
accepts optional leading batch dimensions; mixture tensors are laid out as
``(..., K, d)`` for means/log-variances and ``(..., K)`` for logits.
Randomness always comes from an explicitly passed ``torch.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractViolation, NumericError

VAR_FLOOR = 1e-8
LOG_VAR_FLOOR = math.log(VAR_FLOOR)
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GmmParams:
    """Prior p(z) = sum_k pi_k N(z | mean_k, diag(exp(log_var_k)))."""

    weight_logits: torch.Tensor  # (K,)
    means: torch.Tensor  # (K, d)
    log_vars: torch.Tensor  # (K, d)

    def __post_init__(self):
        if self.means.dim() != 2:
            raise ContractViolation(f"prior means must be K x d, got {tuple(self.means.shape)}")
        if self.log_vars.shape != self.means.shape:
            raise ContractViolation(
                f"prior log_vars {tuple(self.log_vars.shape)} != means {tuple(self.means.shape)}"
            )
        if self.weight_logits.shape != self.means.shape[:1]:
            raise ContractViolation(
                f"prior weight_logits {tuple(self.weight_logits.shape)} do not match K={self.K}"
            )

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.weight_logits, dim=-1)


@dataclass
class PosteriorParams:
    """Encoder output defining q(z|x) as a K-component diagonal mixture."""

    comp_means: torch.Tensor  # (..., K, d)
    comp_log_vars: torch.Tensor  # broadcastable to comp_means, usually (K, d)
    mixture_logits: torch.Tensor  # (..., K)
    domain_id: int = 1

    def __post_init__(self):
        if self.comp_means.dim() < 2:
            raise ContractViolation("comp_means must have shape (..., K, d)")
        if self.mixture_logits.shape[-1] != self.K:
            raise ContractViolation(
                f"mixture_logits has {self.mixture_logits.shape[-1]} entries, expected K={self.K}"
            )
        if self.comp_log_vars.shape[-2:] != self.comp_means.shape[-2:]:
            raise ContractViolation(
                f"comp_log_vars {tuple(self.comp_log_vars.shape)} incompatible with "
                f"comp_means {tuple(self.comp_means.shape)}"
            )
        if self.domain_id not in (1, 2):
            raise ContractViolation(f"domain_id must be 1 or 2, got {self.domain_id}")

    @property
    def K(self) -> int:
        return self.comp_means.shape[-2]

    @property
    def d(self) -> int:
        return self.comp_means.shape[-1]

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.mixture_logits, dim=-1)


@dataclass
class LatentSample:
    z: torch.Tensor  # (..., d)
    soft_assignment: torch.Tensor  # (..., K)
    temperature: float


def _floored(log_var: torch.Tensor) -> torch.Tensor:
    return log_var.clamp(min=LOG_VAR_FLOOR)


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"{name} contains non-finite values")


def log_normal_diag(z: torch.Tensor, means: torch.Tensor, log_vars: torch.Tensor) -> torch.Tensor:
    """Per-component log N(z; mean_k, diag var_k); z is (..., d), result is (..., K)."""
    log_vars = _floored(log_vars)
    diff = z.unsqueeze(-2) - means
    quad = (diff * diff * torch.exp(-log_vars)).sum(-1)
    return -0.5 * (means.shape[-1] * _LOG_2PI + log_vars.sum(-1) + quad)


def _mixture_log_prob(z, logits, means, log_vars):
    log_w = torch.log_softmax(logits, dim=-1)
    # torch.logsumexp subtracts the running max before exponentiating
    return torch.logsumexp(log_w + log_normal_diag(z, means, log_vars), dim=-1)


def mixture_log_density(z: torch.Tensor, p: GmmParams) -> torch.Tensor:
    """log sum_k pi_k N(z; mu_k, diag sigma^2_k) for z of shape (..., d)."""
    if z.shape[-1] != p.d:
        raise ContractViolation(f"z has dimension {z.shape[-1]}, prior expects d={p.d}")
    _check_finite("z", z)
    return _mixture_log_prob(z, p.weight_logits, p.means, p.log_vars)


def posterior_log_density(z: torch.Tensor, q: PosteriorParams) -> torch.Tensor:
    """Mixture log-density of q(z|x); z must broadcast against q's batch shape."""
    if z.shape[-1] != q.d:
        raise ContractViolation(f"z has dimension {z.shape[-1]}, posterior expects d={q.d}")
    return _mixture_log_prob(z, q.mixture_logits, q.comp_means, q.comp_log_vars)


def sample_gumbel(shape, generator: Optional[torch.Generator], dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    neg_log_u = (-torch.log(u.clamp(min=tiny))).clamp(min=tiny)
    return -torch.log(neg_log_u)


def sample_posterior(
    q: PosteriorParams,
    temperature: float,
    mode: str = "relaxed",
    generator: Optional[torch.Generator] = None,
) -> LatentSample:
    """Reparameterized draw from q(z|x).

    ``relaxed`` mixes every component's reparameterized draw with a
    Gumbel-softmax assignment, so gradients reach means, log-variances and
    logits. ``hard`` draws a categorical component and uses only that
    component's draw.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}", ["temperature"])
    if mode not in ("relaxed", "hard"):
        raise ConfigError(f"unknown sampling mode {mode!r}", ["mode"])

    means = q.comp_means
    log_vars = _floored(q.comp_log_vars).expand_as(means)
    eps = torch.randn(means.shape, generator=generator, dtype=means.dtype)
    comps = means + torch.exp(0.5 * log_vars) * eps

    logits = q.mixture_logits.expand(means.shape[:-1])
    if mode == "relaxed":
        g = sample_gumbel(logits.shape, generator, dtype=logits.dtype)
        assign = torch.softmax((logits + g) / temperature, dim=-1)
    else:
        probs = torch.softmax(logits.detach(), dim=-1).reshape(-1, q.K)
        idx = torch.multinomial(probs, 1, generator=generator).reshape(logits.shape[:-1])
        assign = F.one_hot(idx, q.K).to(means.dtype)
    z = (assign.unsqueeze(-1) * comps).sum(-2)
    return LatentSample(z=z, soft_assignment=assign, temperature=float(temperature))


def kl_mc_samples(
    q: PosteriorParams,
    p: GmmParams,
    num_samples: int,
    generator: Optional[torch.Generator] = None,
    temperature: Optional[float] = None,
) -> torch.Tensor:
    """Per-draw Monte Carlo terms of KL(q || p), shape (num_samples, ...).

    With ``temperature=None`` each draw takes one reparameterized sample from
    every component and weights the log-ratio by q's mixture weights. That is
    an exact-distribution estimator of the mixture KL whose gradient reaches
    the weights too. With a temperature, draws come from the relaxed sampler
    and the estimate targets the relaxed surrogate distribution.
    """
    if num_samples < 1:
        raise ConfigError(f"num_samples must be >= 1, got {num_samples}", ["num_samples"])
    if q.d != p.d:
        raise ContractViolation(f"posterior d={q.d} does not match prior d={p.d}")

    if temperature is not None:
        terms = []
        for _ in range(num_samples):
            z = sample_posterior(q, temperature, "relaxed", generator).z
            terms.append(posterior_log_density(z, q) - mixture_log_density(z, p))
        return torch.stack(terms)

    means = q.comp_means
    log_vars = _floored(q.comp_log_vars).expand_as(means)
    eps = torch.randn((num_samples,) + tuple(means.shape), generator=generator, dtype=means.dtype)
    comps = means + torch.exp(0.5 * log_vars) * eps  # (S, ..., K, d)
    # evaluate both mixtures at every component's draw: add a K axis to q's params
    q_b = PosteriorParams(
        comp_means=q.comp_means.unsqueeze(-3),
        comp_log_vars=q.comp_log_vars,
        mixture_logits=q.mixture_logits.unsqueeze(-2),
        domain_id=q.domain_id,
    )
    ratio = posterior_log_density(comps, q_b) - _mixture_log_prob(comps, p.weight_logits, p.means, p.log_vars)
    return (q.weights * ratio).sum(-1)


def kl_mc_estimate(
    q: PosteriorParams,
    p: GmmParams,
    num_samples: int = 1,
    generator: Optional[torch.Generator] = None,
    temperature: Optional[float] = None,
) -> torch.Tensor:
    """Monte Carlo estimate of KL(q || p), averaged over ``num_samples`` draws."""
    return kl_mc_samples(q, p, num_samples, generator, temperature).mean(0)


def gaussian_kl_diag(mu_q, logvar_q, mu_p, logvar_p) -> torch.Tensor:
    """Closed-form KL(N(mu_q, var_q) || N(mu_p, var_p)) summed over the last axis."""
    for name, t in (("mu_q", mu_q), ("logvar_q", logvar_q), ("mu_p", mu_p), ("logvar_p", logvar_p)):
        _check_finite(name, t)
    logvar_q = _floored(logvar_q)
    logvar_p = _floored(logvar_p)
    var_ratio = torch.exp(logvar_q - logvar_p)
    mahal = (mu_q - mu_p) ** 2 * torch.exp(-logvar_p)
    return 0.5 * (logvar_p - logvar_q + var_ratio + mahal - 1.0).sum(-1)


def kl_matched_upper_bound(q: PosteriorParams, p: GmmParams) -> torch.Tensor:
    """KL(w_q || pi) + sum_k w_q,k KL(q_k || p_k), pairing components by index.

    By the chain rule for KL over the joint (component, z) this bounds the
    mixture KL from above.
    """
    if q.K != p.K:
        raise ContractViolation(f"matched bound needs equal K, got {q.K} and {p.K}")
    if q.d != p.d:
        raise ContractViolation(f"posterior d={q.d} does not match prior d={p.d}")
    log_wq = torch.log_softmax(q.mixture_logits, dim=-1)
    log_wp = torch.log_softmax(p.weight_logits, dim=-1)
    wq = log_wq.exp()
    cat_kl = (wq * (log_wq - log_wp)).sum(-1)
    comp_kl = gaussian_kl_diag(
        q.comp_means, q.comp_log_vars.expand_as(q.comp_means), p.means, p.log_vars
    )
    return cat_kl + (wq * comp_kl).sum(-1)
