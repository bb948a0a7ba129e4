"""Disentanglement losses and their weighted combination.

Four pressures act on the latent branches: an MMD term balancing treated and
control representations, a cross-Gram orthogonality term between branch
pairs, a treatment term making z_y uninformative about t while [z_t; z_c]
stays predictive, and a factual outcome term on the Q heads. The total adds
these to the negative ELBO with weights (alpha, beta, gamma, eta).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .latent import BRANCHES, LatentSample, elbo_loss


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the combined objective: alpha treatment, beta outcome,
    gamma orthogonality, eta MMD."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    eta: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "eta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class BatchLatents:
    """Per-branch latent matrices with the batch's treatments and outcomes."""

    z_t: torch.Tensor
    z_c: torch.Tensor
    z_y: torch.Tensor
    treatment: torch.Tensor
    outcome: torch.Tensor

    def __post_init__(self):
        b = self.z_t.shape[0]
        for name in ("z_c", "z_y", "treatment", "outcome"):
            if getattr(self, name).shape[0] != b:
                raise ValueError(f"{name} batch size does not match z_t")


def median_bandwidth(a: torch.Tensor, b: torch.Tensor) -> float:
    """Median pairwise distance over the pooled rows; 1.0 if degenerate."""
    pooled = torch.cat([a, b], dim=0).detach()
    dists = torch.cdist(pooled, pooled)
    n = pooled.shape[0]
    iu = torch.triu_indices(n, n, offset=1)
    vals = dists[iu[0], iu[1]]
    if vals.numel() == 0:
        return 1.0
    med = float(vals.median())
    return med if med > 0 else 1.0


def _rbf(a: torch.Tensor, b: torch.Tensor, bandwidth: float) -> torch.Tensor:
    sq = torch.cdist(a, b).pow(2)
    return torch.exp(-sq / (2.0 * bandwidth**2))


def mmd_loss(
    z_treat: torch.Tensor,
    z_ctrl: torch.Tensor,
    bandwidth: float | str = "median",
) -> torch.Tensor:
    """Squared biased-estimator MMD with a Gaussian RBF kernel.

    mean k(T,T) + mean k(C,C) - 2 mean k(T,C). ``bandwidth`` may be a positive
    number or "median" for the median heuristic over the pooled batch (treated
    as a constant, not differentiated through).
    """
    if z_treat.dim() != 2 or z_ctrl.dim() != 2:
        raise ValueError("mmd_loss expects 2-D latent matrices")
    if z_treat.shape[0] == 0 or z_ctrl.shape[0] == 0:
        raise ValueError("mmd_loss requires at least one example per group")
    if z_treat.shape[1] != z_ctrl.shape[1]:
        raise ValueError("latent widths differ between groups")
    if isinstance(bandwidth, str):
        if bandwidth not in ("median", "auto"):
            raise ValueError(f"unknown bandwidth mode {bandwidth!r}")
        bandwidth = median_bandwidth(z_treat, z_ctrl)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    value = (
        _rbf(z_treat, z_treat, bandwidth).mean()
        + _rbf(z_ctrl, z_ctrl, bandwidth).mean()
        - 2.0 * _rbf(z_treat, z_ctrl, bandwidth).mean()
    )
    # the estimator is nonnegative in exact arithmetic; guard rounding
    return value.clamp_min(0.0)


def orthogonality_loss(
    z_k: torch.Tensor, z_v: torch.Tensor, target: str = "identity"
) -> torch.Tensor:
    """Frobenius norm of the B x B cross-Gram Z_k Z_v^T minus the target.

    ``target`` is "identity" (as formulated) or "zero" (plain cross-correlation
    suppression).
    """
    if z_k.shape != z_v.shape:
        raise ValueError(f"shape mismatch {tuple(z_k.shape)} vs {tuple(z_v.shape)}")
    if z_k.dim() != 2:
        raise ValueError("orthogonality_loss expects 2-D latent matrices")
    if target not in ("identity", "zero"):
        raise ValueError(f"unknown ort target {target!r}")
    gram = z_k @ z_v.transpose(0, 1)
    if target == "identity":
        gram = gram - torch.eye(gram.shape[0], dtype=gram.dtype, device=gram.device)
    return torch.linalg.matrix_norm(gram, ord="fro")


class ClassifierHeads(nn.Module):
    """Two treatment classifiers: one on z_y alone, one on [z_t; z_c]."""

    def __init__(self, latent_dim: int):
        super().__init__()
        self.head_y_only = nn.Linear(latent_dim, 2)
        self.head_tc = nn.Linear(2 * latent_dim, 2)


def treatment_loss(
    heads: ClassifierHeads,
    batch: BatchLatents,
    mode: str = "joint",
) -> torch.Tensor:
    """Mean of log P(t | z_y) - log P(t | z_t, z_c) over the batch.

    Minimizing pushes the z_y head toward uninformative and the [z_t; z_c]
    head toward predictive. ``mode`` controls gradient routing through the
    first term:

    - "joint": head and latents trained together on the term as formulated.
      Caveat: the joint optimum makes the head anti-predictive, which keeps
      treatment information inside z_y.
    - "adversarial": same loss value, but the head receives gradients to
      detect t from z_y while z_y receives gradients pushing the detector's
      output toward uniform (non-saturating, so the pressure survives a
      confident detector). This is the routing that actually strips t
      from z_y.
    - "detach_z": only the head trains on the first term.
    - "detach_head": only z_y trains on the first term.
    """
    t = batch.treatment.long()

    def true_logp(logits: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(logits, dim=-1).gather(1, t.view(-1, 1)).squeeze(1)

    head_y = heads.head_y_only
    if mode == "joint":
        term_y = true_logp(head_y(batch.z_y)).mean()
    elif mode == "adversarial":
        # value is mean log P(t | z_y); gradients route min-max style
        ce_head = -true_logp(head_y(batch.z_y.detach())).mean()
        logits_frozen = F.linear(batch.z_y, head_y.weight.detach(), head_y.bias.detach())
        confusion = -F.log_softmax(logits_frozen, dim=-1).mean()
        routed = ce_head + confusion
        term_y = routed - routed.detach() - ce_head.detach()
    elif mode == "detach_z":
        term_y = true_logp(head_y(batch.z_y.detach())).mean()
    elif mode == "detach_head":
        term_y = true_logp(
            F.linear(batch.z_y, head_y.weight.detach(), head_y.bias.detach())
        ).mean()
    else:
        raise ValueError(f"unknown treatment loss mode {mode!r}")
    logits_tc = heads.head_tc(torch.cat([batch.z_t, batch.z_c], dim=-1))
    return term_y - true_logp(logits_tc).mean()


def outcome_loss(q_hat: torch.Tensor, y: torch.Tensor, kind: str) -> torch.Tensor:
    """MSE for real outcomes; binary cross-entropy on probabilities otherwise."""
    if q_hat.shape != y.shape:
        raise ValueError("q_hat and y must have the same shape")
    if kind == "real":
        return (q_hat - y).pow(2).mean()
    if kind == "binary":
        if bool((q_hat < 0).any()) or bool((q_hat > 1).any()):
            raise ValueError("binary outcome_loss expects probabilities in [0, 1]")
        if bool(((y != 0) & (y != 1)).any()):
            raise ValueError("binary outcomes must be 0 or 1")
        q = q_hat.clamp(0.0, 1.0)
        return -(y * torch.log(q) + (1.0 - y) * torch.log(1.0 - q)).mean()
    raise ValueError(f"unknown outcome kind {kind!r}")


def disentangle_total(
    model,
    tokens: torch.Tensor,
    treatment: torch.Tensor,
    outcome: torch.Tensor,
    weights: LossWeights,
    *,
    outcome_kind: str,
    generator: torch.Generator | None = None,
    samples: dict[str, LatentSample] | None = None,
    mmd_bandwidth: float | str = "median",
    ort_target: str = "identity",
    treatment_loss_mode: str = "joint",
    q_input: str = "sample",
    return_parts: bool = False,
):
    """Combined objective L_vae + alpha L_t + beta L_o + gamma L_ort + eta L_mmd.

    ``model`` supplies the encoder, latent branches, decoder, classifier heads
    and Q heads. ``samples`` can inject fixed latent draws (tests); otherwise
    one reparameterized sample per branch is drawn via ``generator``.

    ``q_input`` selects what the outcome heads consume: the reparameterized
    sample (one-draw Monte Carlo of the posterior expectation), the posterior
    mean, or the posterior mean detached from the encoder. For affine heads
    the mean is the exact expectation of the prediction; sampling additionally
    shrinks the learned slopes in proportion to the posterior variance, which
    at small scale can leave confounders under-adjusted. Detaching goes one
    step further and keeps the outcome loss from reshaping the representation
    at all, so the heads converge to a plain regression on features that carry
    no trace of the observed outcomes.
    """
    if q_input not in ("sample", "mean", "mean_detach"):
        raise ValueError(f"unknown q_input {q_input!r}")
    h = model.encoder(tokens)
    if samples is None:
        samples = model.latents(h, generator=generator)
    z = {k: samples[k].z for k in BRANCHES}
    h_hat = model.decoder(z["t"], z["c"], z["y"])
    l_vae = elbo_loss(h, h_hat, [samples[k] for k in BRANCHES])

    batch = BatchLatents(
        z_t=z["t"], z_c=z["c"], z_y=z["y"], treatment=treatment, outcome=outcome
    )
    l_t = treatment_loss(model.heads, batch, mode=treatment_loss_mode)

    if q_input == "mean":
        q_raw = model.q_heads.factual(treatment, samples["y"].mu, samples["c"].mu)
    elif q_input == "mean_detach":
        q_raw = model.q_heads.factual(
            treatment, samples["y"].mu.detach(), samples["c"].mu.detach()
        )
    else:
        q_raw = model.q_heads.factual(treatment, z["y"], z["c"])
    if outcome_kind == "real":
        l_o = (q_raw - outcome).pow(2).mean()
    elif outcome_kind == "binary":
        # cross-entropy on sigmoid probabilities, computed from logits for stability
        l_o = F.binary_cross_entropy_with_logits(q_raw, outcome.to(q_raw.dtype))
    else:
        raise ValueError(f"unknown outcome kind {outcome_kind!r}")

    pairs = (("t", "c"), ("t", "y"), ("c", "y"))
    l_ort = sum(orthogonality_loss(z[a], z[b], target=ort_target) for a, b in pairs)

    is_treated = treatment == 1
    mixed = bool(is_treated.any()) and bool((~is_treated).any())
    if mixed:
        l_mmd = sum(
            mmd_loss(z[k][is_treated], z[k][~is_treated], bandwidth=mmd_bandwidth)
            for k in BRANCHES
        )
    elif weights.eta > 0:
        raise ValueError("MMD term requires both treatment groups in the batch")
    else:
        l_mmd = torch.zeros((), dtype=h.dtype, device=h.device)

    total = (
        l_vae
        + weights.alpha * l_t
        + weights.beta * l_o
        + weights.gamma * l_ort
        + weights.eta * l_mmd
    )
    if not return_parts:
        return total
    parts = {"vae": l_vae, "treatment": l_t, "outcome": l_o, "ort": l_ort, "mmd": l_mmd}
    return total, parts


def linear_probe_accuracy(
    z_train: torch.Tensor,
    t_train: torch.Tensor,
    z_eval: torch.Tensor,
    t_eval: torch.Tensor,
    *,
    max_iter: int = 200,
    l2: float = 1e-3,
) -> float:
    """Accuracy of a logistic-regression probe fit on frozen features.

    The probe starts at zero and is optimized with full-batch L-BFGS, so the
    result is deterministic given the inputs. Features are standardized by
    the training statistics.
    """
    z_train = z_train.detach().double()
    z_eval = z_eval.detach().double()
    mean = z_train.mean(dim=0, keepdim=True)
    std = z_train.std(dim=0, keepdim=True).clamp_min(1e-8)
    z_train = (z_train - mean) / std
    z_eval = (z_eval - mean) / std
    w = torch.zeros(z_train.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    t_tr = t_train.detach().double()
    opt = torch.optim.LBFGS([w, b], max_iter=max_iter, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        logits = z_train @ w + b
        loss = F.binary_cross_entropy_with_logits(logits, t_tr) + l2 * w.pow(2).sum()
        loss.backward()
        return loss

    opt.step(closure)
    with torch.no_grad():
        pred = (z_eval @ w + b) > 0
    return float((pred.long() == t_eval.long()).double().mean())
