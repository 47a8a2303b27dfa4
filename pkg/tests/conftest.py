import math

import numpy as np
import pytest
import torch
from scipy.integrate import trapezoid
from scipy.stats import norm
from torch import nn

from gmmtrans.networks import ModelBundle, NetSpec, init_params
from gmmtrans.phantom import PhantomSpec, build_dataset

FD_STEP = 1e-4
FD_RTOL = 1e-3


def finite_difference_check(fn, tensors, n_probe=None, seed=0, h=FD_STEP, rtol=FD_RTOL, atol=1e-8):
    """Compare autograd gradients of scalar ``fn()`` to central differences.

    ``tensors`` are float64 leaf tensors with requires_grad. At most
    ``n_probe`` randomly chosen entries per tensor are probed. Returns the
    list of (tensor index, flat index, analytic, numeric) mismatches.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    bad = []
    for ti, (t, g) in enumerate(zip(tensors, grads)):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        idx = np.arange(flat.numel())
        if n_probe is not None and flat.numel() > n_probe:
            idx = rng.choice(flat.numel(), n_probe, replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = float(fn())
                flat[i] = orig - h
                down = float(fn())
                flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(g.view(-1)[i])
            if abs(analytic - numeric) > rtol * max(abs(analytic), abs(numeric)) + atol:
                bad.append((ti, int(i), analytic, numeric))
    return bad


def count_params(module):
    return sum(p.numel() for p in module.parameters())


def tiny_spec(K=2, d=3, mixture_weights="input"):
    return NetSpec(patch_size=8, latent_dim=d, num_components=K, channel_widths=(2, 3),
                   activation="tanh", mixture_weights=mixture_weights)


@pytest.fixture
def tiny_bundle():
    """A double-precision bundle small enough for exhaustive finite-difference checks."""
    bundle = init_params(tiny_spec(), seed=3).double()
    assert count_params(bundle) <= 5000
    return bundle


class FlattenEncoder(nn.Module):
    """Single-component encoder whose mean is the flattened patch."""

    def __init__(self):
        super().__init__()
        self.anchor = nn.Parameter(torch.zeros(()))  # keeps the module on the optimizer's books

    def forward(self, x):
        b = x.shape[0]
        means = x.reshape(b, 1, -1) + 0.0 * self.anchor
        return means, torch.zeros(b, 1, dtype=x.dtype)


class ReshapeGenerator(nn.Module):
    """Decodes z back into a patch, snapping values to the 8-bit grid."""

    def __init__(self, patch_size, quantize=True):
        super().__init__()
        self.patch_size = patch_size
        self.quantize = quantize

    def forward(self, z):
        x = z.reshape(-1, 1, self.patch_size, self.patch_size)
        if self.quantize:
            x = torch.round(x * 256) / 256
        return x.clamp(0.0, 1.0)


def identity_bundle(patch, log_var=-20.0, quantize=True):
    """G∘E is the identity on ``patch`` and q(z|patch) equals the prior exactly."""
    P = patch.shape[-1]
    spec = NetSpec(patch_size=P, latent_dim=P * P, num_components=1, channel_widths=(2,), activation="tanh")
    bundle = ModelBundle(
        spec,
        encoders=(FlattenEncoder(), FlattenEncoder()),
        generators=(ReshapeGenerator(P, quantize), ReshapeGenerator(P, quantize)),
    ).double()
    with torch.no_grad():
        bundle.prior.means.copy_(patch.reshape(1, -1))
        bundle.prior.log_vars.fill_(log_var)
        bundle.domain_log_vars_1.fill_(log_var)
        bundle.domain_log_vars_2.fill_(log_var)
    return bundle


@pytest.fixture
def grid_patch():
    """An 8x8 patch on the 8-bit intensity grid."""
    rng = np.random.default_rng(11)
    return torch.from_numpy(rng.integers(0, 257, size=(8, 8)) / 256.0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantom")
    spec = PhantomSpec(image_size=64, num_organs=(1, 2))
    build_dataset(spec, 6, 6, 2, 2, root, seed=5)
    return root


def pooled_within(samples, target, n_se=3.0):
    """Mean of ``samples`` lies within n_se standard errors of ``target``."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    se = samples.std(ddof=1) / math.sqrt(samples.size)
    return abs(samples.mean() - target) <= n_se * se + 1e-12


def quadrature_kl(wq, mq, sq, wp, mp, sp):
    """KL between 1-D mixtures by trapezoid integration over [-12, 12], step 1e-3."""
    z = np.linspace(-12.0, 12.0, 24001)
    q = sum(w * norm.pdf(z, m, s) for w, m, s in zip(wq, mq, sq))
    p = sum(w * norm.pdf(z, m, s) for w, m, s in zip(wp, mp, sp))
    integrand = np.where(q > 0, q * (np.log(np.maximum(q, 1e-300)) - np.log(np.maximum(p, 1e-300))), 0.0)
    return float(trapezoid(integrand, z))


def random_1d_suite(n=50, seed=2024):
    rng = np.random.default_rng(seed)
    suite = []
    for _ in range(n):
        K = int(rng.integers(1, 4))
        wq, wp = rng.dirichlet(np.ones(K)), rng.dirichlet(np.ones(K))
        mq, mp = rng.uniform(-3, 3, K), rng.uniform(-3, 3, K)
        sq, sp = rng.uniform(0.4, 1.5, K), rng.uniform(0.4, 1.5, K)
        suite.append((wq, mq, sq, wp, mp, sp))
    return suite


# one "criterion N: PASS/FAIL ..." line per acceptance check, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
