"""Shared test utilities: tiny corpora, float64 models, finite differences."""

from __future__ import annotations

import torch

from diva import (
    SimulationParams,
    SyntheticCorpusSpec,
    TrainConfig,
    assign_treatment,
    generate_synthetic_corpus,
    simulate_dataset,
    split_dataset,
)
from diva.trainer import build_model


def tiny_spec(n_docs: int = 60, vocab_size: int = 24, doc_length: int = 12) -> SyntheticCorpusSpec:
    return SyntheticCorpusSpec(n_docs=n_docs, vocab_size=vocab_size, doc_length=doc_length)


def make_corpus(seed: int = 0, n_docs: int = 60, k: int = 20):
    """Synthetic corpus with treatment assigned and splits in place."""
    ds = generate_synthetic_corpus(tiny_spec(n_docs=n_docs), seed=seed)
    ds = assign_treatment(ds, k, k)
    return split_dataset(ds, seed=seed)


def make_simulated(
    seed: int = 0,
    n_docs: int = 60,
    k: int = 20,
    alpha: float = 1.0,
    outcome_kind: str = "vol",
    noise: float = 0.5,
):
    ds = make_corpus(seed=seed, n_docs=n_docs, k=k)
    params = SimulationParams.from_caption(alpha, 1.0, 0.5, noise, outcome_kind)
    sim, _ = simulate_dataset(ds, params, seed=seed)
    return sim


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(
        epochs=2,
        batch_size=16,
        peak_lr=1e-3,
        dim=8,
        depth=1,
        n_heads=2,
        max_len=16,
        dropout=0.0,
        latent_dim=4,
        q_hidden=(),
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_model(config: TrainConfig | None = None, vocab_size: int = 27, *, double: bool = False):
    """Freshly initialized model; float64 when ``double`` for gradient checks."""
    config = config or tiny_train_config()
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = build_model(config, vocab_size)
    if double:
        model.double()
    model.train()
    return model


def fd_gradient_check(
    value_fn,
    params: list[torch.Tensor],
    *,
    step: float = 1e-5,
    max_coords_per_tensor: int = 4,
    tol: float = 1e-4,
) -> float:
    """Compare autograd gradients of ``value_fn()`` against central differences.

    ``value_fn`` must rebuild the loss from the current parameter values on
    every call (float64 throughout). A deterministic subset of coordinates is
    probed per tensor. Returns the worst relative discrepancy and asserts it
    is at most ``tol``.
    """
    for p in params:
        assert p.dtype == torch.float64, "gradient checks must run in float64"
        if p.grad is not None:
            p.grad = None
    value = value_fn()
    value.backward()
    worst = 0.0
    for p in params:
        grad = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        flat = p.detach().reshape(-1)
        n = flat.numel()
        stride = max(1, n // max_coords_per_tensor)
        for j in range(0, n, stride):
            orig = float(flat[j])
            with torch.no_grad():
                flat[j] = orig + step
            up = float(value_fn().detach())
            with torch.no_grad():
                flat[j] = orig - step
            down = float(value_fn().detach())
            with torch.no_grad():
                flat[j] = orig
            fd = (up - down) / (2 * step)
            an = float(grad.reshape(-1)[j])
            rel = abs(fd - an) / max(1.0, abs(an))
            worst = max(worst, rel)
            assert rel <= tol, f"coordinate {j}: fd={fd:.8g} autograd={an:.8g} rel={rel:.3g}"
    return worst
