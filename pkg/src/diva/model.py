"""The full model: encoder, three latent branches, decoder, and heads."""

from __future__ import annotations

import torch
import torch.nn as nn

from .disentangle import ClassifierHeads
from .encoder import TextEncoder, encode_batch
from .estimator import QHeads
from .latent import BRANCHES, Decoder, InferenceNetwork, LatentSample, infer


class DivaModel(nn.Module):
    """Disentangled variational effect model over token sequences.

    Pipeline: tokens -> pooled h -> three Gaussian branches (z_t, z_c, z_y)
    -> affine decoder reconstructing h, treatment classifiers, and two
    potential-outcome heads on [z_y; z_c].
    """

    def __init__(
        self,
        vocab_size: int,
        *,
        dim: int = 32,
        depth: int = 1,
        n_heads: int = 4,
        ffn_dim: int | None = None,
        max_len: int = 512,
        dropout: float = 0.0,
        latent_dim: int = 16,
        q_hidden: tuple[int, ...] = (),
        outcome_kind: str = "real",
        decoder_activation: str = "none",
        pad_id: int = 0,
        model_id: str = "diva",
    ):
        super().__init__()
        self.encoder = TextEncoder(
            vocab_size,
            dim=dim,
            depth=depth,
            n_heads=n_heads,
            ffn_dim=ffn_dim,
            max_len=max_len,
            dropout=dropout,
            pad_id=pad_id,
        )
        self.phi_t = InferenceNetwork(dim, latent_dim, branch="t")
        self.phi_c = InferenceNetwork(dim, latent_dim, branch="c")
        self.phi_y = InferenceNetwork(dim, latent_dim, branch="y")
        self.decoder = Decoder(latent_dim, dim, activation=decoder_activation)
        self.heads = ClassifierHeads(latent_dim)
        self.q_heads = QHeads(latent_dim, hidden=q_hidden, kind=outcome_kind, dropout=dropout)
        self.latent_dim = latent_dim
        self.outcome_kind = outcome_kind
        self.model_id = model_id
        self.train_seed: int | None = None

    def branch_net(self, branch: str) -> InferenceNetwork:
        return {"t": self.phi_t, "c": self.phi_c, "y": self.phi_y}[branch]

    def latents(
        self,
        h: torch.Tensor,
        *,
        generator: torch.Generator | None = None,
        deterministic: bool = False,
    ) -> dict[str, LatentSample]:
        """One reparameterized sample per branch for a batch of pooled vectors."""
        return {
            k: infer(self.branch_net(k), h, generator=generator, deterministic=deterministic)
            for k in BRANCHES
        }

    def document_latents(self, token_seqs) -> dict[str, torch.Tensor]:
        """Posterior-mean latents per branch for raw token sequences (eval mode)."""
        h = encode_batch(self.encoder, token_seqs)
        with torch.no_grad():
            return {k: self.branch_net(k)(h)[0] for k in BRANCHES}
