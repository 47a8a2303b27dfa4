"""Encoders, generators and discriminators for the two image domains.

Patches are handled as ``(B, 1, P, P)`` tensors of intensities in [0, 1].
A single ``(P, P)`` patch is also accepted and gives unbatched results.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import torch
from torch import nn
from torch.func import functional_call

from .errors import ConfigError, ContractViolation
from .gmm_latent import GmmParams, LatentSample, PosteriorParams

ACTIVATIONS = {
    "leaky_relu": lambda: nn.LeakyReLU(0.2),
    "relu": nn.ReLU,
    "elu": nn.ELU,
    "silu": nn.SiLU,
    "tanh": nn.Tanh,
    "softplus": nn.Softplus,
}
MIXTURE_MODES = ("input", "global")


@dataclass
class NetSpec:
    patch_size: int = 32
    latent_dim: int = 64
    num_components: int = 25
    channel_widths: Sequence[int] = field(default_factory=lambda: (16, 32, 64))
    activation: str = "leaky_relu"
    mixture_weights: str = "input"

    def __post_init__(self):
        self.channel_widths = tuple(int(w) for w in self.channel_widths)
        self.validate()

    @property
    def downsample(self) -> int:
        return 2 ** len(self.channel_widths)

    @property
    def bottleneck(self) -> int:
        return self.patch_size // self.downsample

    def validate(self):
        bad = []
        if not self.channel_widths or any(w < 1 for w in self.channel_widths):
            bad.append("channel_widths")
        elif self.patch_size < 1 or self.patch_size % self.downsample:
            bad.append("patch_size")
        if self.latent_dim < 1:
            bad.append("latent_dim")
        if self.num_components < 1:
            bad.append("num_components")
        if self.activation not in ACTIVATIONS:
            bad.append("activation")
        if self.mixture_weights not in MIXTURE_MODES:
            bad.append("mixture_weights")
        if bad:
            raise ConfigError(f"invalid network spec fields: {', '.join(bad)}", bad)


def _conv_trunk(spec: NetSpec) -> nn.Sequential:
    layers, c_in = [], 1
    for width in spec.channel_widths:
        layers += [nn.Conv2d(c_in, width, 4, stride=2, padding=1), ACTIVATIONS[spec.activation]()]
        c_in = width
    layers.append(nn.Flatten())
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """Shared conv trunk, K linear mean heads and a mixture-logit head."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.K, self.d = spec.num_components, spec.latent_dim
        self.trunk = _conv_trunk(spec)
        features = spec.channel_widths[-1] * spec.bottleneck**2
        # one Linear holding all K heads; row block k is head k
        self.mean_heads = nn.Linear(features, self.K * self.d)
        if spec.mixture_weights == "input":
            self.logit_head = nn.Linear(features, self.K)
        else:
            self.logit_head = None
            self.global_logits = nn.Parameter(torch.zeros(self.K))

    def forward(self, x):
        h = self.trunk(x)
        means = self.mean_heads(h).view(-1, self.K, self.d)
        if self.logit_head is not None:
            logits = self.logit_head(h)
        else:
            logits = self.global_logits.expand(h.shape[0], self.K)
        return means, logits


class Generator(nn.Module):
    """Mirror of the encoder trunk with transposed convolutions and a sigmoid output."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        widths = spec.channel_widths
        self.base = (widths[-1], spec.bottleneck, spec.bottleneck)
        self.fc = nn.Linear(spec.latent_dim, widths[-1] * spec.bottleneck**2)
        self.act = ACTIVATIONS[spec.activation]()
        layers = []
        outs = list(reversed(widths[:-1])) + [1]
        c_in = widths[-1]
        for i, c_out in enumerate(outs):
            layers.append(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1))
            if i < len(outs) - 1:
                layers.append(ACTIVATIONS[spec.activation]())
            c_in = c_out
        self.deconv = nn.Sequential(*layers)

    def forward(self, z):
        h = self.act(self.fc(z)).view(-1, *self.base)
        return torch.sigmoid(self.deconv(h))


class Discriminator(nn.Module):
    """Patch discriminator returning a realness logit."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.trunk = _conv_trunk(spec)
        self.out = nn.Linear(spec.channel_widths[-1] * spec.bottleneck**2, 1)

    def forward(self, x):
        return self.out(self.trunk(x)).squeeze(-1)


class GmmPrior(nn.Module):
    def __init__(self, K: int, d: int):
        super().__init__()
        self.weight_logits = nn.Parameter(torch.zeros(K))
        self.means = nn.Parameter(torch.zeros(K, d))
        self.log_vars = nn.Parameter(torch.zeros(K, d))

    def params(self) -> GmmParams:
        return GmmParams(self.weight_logits, self.means, self.log_vars)


class ModelBundle(nn.Module):
    """The six sub-networks, the shared prior and the per-domain component log-variances."""

    def __init__(self, spec: NetSpec, encoders=None, generators=None, discriminators=None):
        super().__init__()
        self.spec = spec
        K, d = spec.num_components, spec.latent_dim
        e1, e2 = encoders or (Encoder(spec), Encoder(spec))
        g1, g2 = generators or (Generator(spec), Generator(spec))
        d1, d2 = discriminators or (Discriminator(spec), Discriminator(spec))
        self.encoder_1, self.encoder_2 = e1, e2
        self.generator_1, self.generator_2 = g1, g2
        self.discriminator_1, self.discriminator_2 = d1, d2
        self.prior = GmmPrior(K, d)
        self.domain_log_vars_1 = nn.Parameter(torch.zeros(K, d))
        self.domain_log_vars_2 = nn.Parameter(torch.zeros(K, d))

    def encoder(self, domain: int) -> nn.Module:
        return self.encoder_1 if _domain(domain) == 1 else self.encoder_2

    def generator(self, domain: int) -> nn.Module:
        return self.generator_1 if _domain(domain) == 1 else self.generator_2

    def discriminator(self, domain: int) -> nn.Module:
        return self.discriminator_1 if _domain(domain) == 1 else self.discriminator_2

    def domain_log_vars(self, domain: int) -> torch.Tensor:
        return self.domain_log_vars_1 if _domain(domain) == 1 else self.domain_log_vars_2

    @staticmethod
    def is_discriminator_param(name: str) -> bool:
        return name.startswith("discriminator_")

    def generator_side_parameters(self):
        """(name, param) pairs minimized by the generator-side objective."""
        return [(n, p) for n, p in self.named_parameters() if not self.is_discriminator_param(n)]

    def discriminator_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if self.is_discriminator_param(n)]


def _domain(domain) -> int:
    if domain not in (1, 2):
        raise ContractViolation(f"domain must be 1 or 2, got {domain!r}")
    return int(domain)


def _as_batch(patch: torch.Tensor, patch_size: int):
    """Return ((B,1,P,P) tensor, was_single)."""
    if patch.dim() == 2:
        x, single = patch[None, None], True
    elif patch.dim() == 3:
        x, single = patch[:, None], False
    elif patch.dim() == 4 and patch.shape[1] == 1:
        x, single = patch, False
    else:
        raise ContractViolation(f"unsupported patch shape {tuple(patch.shape)}")
    if x.shape[-2:] != (patch_size, patch_size):
        raise ContractViolation(
            f"patch is {tuple(x.shape[-2:])}, network expects {patch_size}x{patch_size}"
        )
    return x, single


def encode(bundle: ModelBundle, domain: int, patch: torch.Tensor) -> PosteriorParams:
    x, single = _as_batch(patch, bundle.spec.patch_size)
    means, logits = bundle.encoder(domain)(x.to(bundle.domain_log_vars_1.dtype))
    if single:
        means, logits = means[0], logits[0]
    return PosteriorParams(
        comp_means=means,
        comp_log_vars=bundle.domain_log_vars(domain),
        mixture_logits=logits,
        domain_id=domain,
    )


def generate(bundle: ModelBundle, domain: int, z: Union[LatentSample, torch.Tensor]) -> torch.Tensor:
    """Decode latent codes into patches in [0, 1]; z of shape (d,) gives a (P, P) patch."""
    if isinstance(z, LatentSample):
        z = z.z
    if z.shape[-1] != bundle.spec.latent_dim:
        raise ContractViolation(
            f"z has dimension {z.shape[-1]}, generator expects {bundle.spec.latent_dim}"
        )
    single = z.dim() == 1
    out = bundle.generator(domain)(z.reshape(-1, z.shape[-1]))
    return out[0, 0] if single else out


def discriminator_logits(bundle: ModelBundle, domain: int, patch: torch.Tensor, frozen: bool = False):
    """Realness logits. ``frozen`` evaluates with detached weights so no gradient reaches D."""
    x, single = _as_batch(patch, bundle.spec.patch_size)
    net = bundle.discriminator(domain)
    if frozen:
        params = {n: p.detach() for n, p in net.named_parameters()}
        logits = functional_call(net, params, (x,))
    else:
        logits = net(x)
    return logits[0] if single else logits


def discriminate(bundle: ModelBundle, domain: int, patch: torch.Tensor) -> torch.Tensor:
    """Realness score in (0, 1)."""
    return torch.sigmoid(discriminator_logits(bundle, domain, patch))


def init_params(spec: NetSpec, seed: int) -> ModelBundle:
    """Seeded initialization; does not disturb the global torch RNG."""
    if not isinstance(spec, NetSpec):
        raise ConfigError("init_params needs a NetSpec")
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        # default layer init is fan-in scaled (Kaiming-uniform)
        bundle = ModelBundle(spec)
        with torch.no_grad():
            bundle.prior.means.copy_(0.5 * torch.randn(spec.num_components, spec.latent_dim))
    return bundle
