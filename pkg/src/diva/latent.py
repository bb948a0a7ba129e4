"""Gaussian latent branches: inference networks, sampling, decoder, ELBO.

Three branches (t, c, y) share the pooled encoder output h. Each branch is a
diagonal Gaussian q(z|h) = N(mu(h), diag(exp(log_var(h)))) sampled with the
reparameterization z = mu + exp(log_var / 2) * eps, eps ~ N(0, I).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

LOG_VAR_RANGE = (-8.0, 8.0)

BRANCHES = ("t", "c", "y")


@dataclass
class LatentSample:
    """One reparameterized draw; z = mu + exp(log_var / 2) * eps by construction."""

    mu: torch.Tensor
    log_var: torch.Tensor
    z: torch.Tensor
    eps: torch.Tensor
    branch: str = ""


class InferenceNetwork(nn.Module):
    """Affine posterior head for one branch: h -> (mu, log_var)."""

    def __init__(self, dim: int, latent_dim: int, branch: str = ""):
        super().__init__()
        if branch and branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}")
        self.branch = branch
        self.mu = nn.Linear(dim, latent_dim)
        self.log_var = nn.Linear(dim, latent_dim)

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # clamp keeps exp(log_var) finite through long training runs
        return self.mu(h), self.log_var(h).clamp(*LOG_VAR_RANGE)


def infer(
    net: InferenceNetwork,
    h: torch.Tensor,
    *,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
    deterministic: bool = False,
) -> LatentSample:
    """Posterior parameters and a reparameterized sample for a batch of h.

    ``deterministic`` forces eps = 0 (so z = mu); otherwise ``eps`` may be
    supplied explicitly, or is drawn from ``generator``.
    """
    if not torch.isfinite(h).all():
        raise ValueError("encoder output contains non-finite values")
    mu, log_var = net(h)
    if deterministic:
        eps = torch.zeros_like(mu)
    elif eps is None:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    elif eps.shape != mu.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match mu {tuple(mu.shape)}")
    z = mu + torch.exp(0.5 * log_var) * eps
    return LatentSample(mu=mu, log_var=log_var, z=z, eps=eps, branch=net.branch)


class Decoder(nn.Module):
    """One affine layer from the concatenated latents [z_t; z_c; z_y] back to h."""

    def __init__(self, latent_dim: int, dim: int, activation: str = "none"):
        super().__init__()
        if activation not in ("none", "tanh"):
            raise ValueError("activation must be 'none' or 'tanh'")
        self.latent_dim = latent_dim
        self.activation = activation
        self.net = nn.Linear(3 * latent_dim, dim)

    def forward(self, z_t: torch.Tensor, z_c: torch.Tensor, z_y: torch.Tensor) -> torch.Tensor:
        for name, z in (("z_t", z_t), ("z_c", z_c), ("z_y", z_y)):
            if z.shape[-1] != self.latent_dim:
                raise ValueError(
                    f"{name} has width {z.shape[-1]}, decoder expects {self.latent_dim}"
                )
        out = self.net(torch.cat([z_t, z_c, z_y], dim=-1))
        return torch.tanh(out) if self.activation == "tanh" else out


def decode(decoder: Decoder, z_t: torch.Tensor, z_c: torch.Tensor, z_y: torch.Tensor) -> torch.Tensor:
    return decoder(z_t, z_c, z_y)


def kl_to_standard_normal(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag exp(log_var)) || N(0, I)), summed over the latent axis.

    Returns a scalar for 1-D inputs and a per-example vector for 2-D inputs.
    """
    if mu.shape != log_var.shape:
        raise ValueError("mu and log_var must have the same shape")
    return 0.5 * (mu.pow(2) + log_var.exp() - 1.0 - log_var).sum(dim=-1)


def elbo_loss(h: torch.Tensor, h_hat: torch.Tensor, samples: Sequence[LatentSample]) -> torch.Tensor:
    """Negative ELBO: mean squared reconstruction error plus the summed branch KLs.

    The reconstruction term is ||h - h_hat||^2 / d per example; both terms are
    averaged over the batch.
    """
    if h.shape != h_hat.shape:
        raise ValueError("h and h_hat must have the same shape")
    if not samples:
        raise ValueError("elbo_loss needs at least one latent sample")
    recon = (h - h_hat).pow(2).sum(dim=-1) / h.shape[-1]
    kl = sum(kl_to_standard_normal(s.mu, s.log_var) for s in samples)
    return (recon + kl).mean()
