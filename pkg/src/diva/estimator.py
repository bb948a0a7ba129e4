"""Outcome heads and plug-in treatment-effect estimation.

Two separate heads model the outcome under control and under treatment as
functions of [z_y; z_c]. Effects are estimated by differencing the heads at
the posterior-mean latents: ite = Q(1, z_y, z_c) - Q(0, z_y, z_c).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .encoder import encode_batch

OUTCOME_KINDS = ("real", "binary")


def _head(in_dim: int, hidden: Sequence[int], dropout: float) -> nn.Sequential:
    layers: list[nn.Module] = []
    width = in_dim
    for h in hidden:
        layers.append(nn.Linear(width, h))
        layers.append(nn.ReLU())
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
        width = h
    out = nn.Linear(width, 1)
    # zero-initialized output layer: effect estimates start at exactly 0
    nn.init.zeros_(out.weight)
    nn.init.zeros_(out.bias)
    layers.append(out)
    return nn.Sequential(*layers)


class QHeads(nn.Module):
    """Potential-outcome heads on [z_y; z_c], one per treatment arm.

    ``raw`` values are the direct head outputs; the binary kind passes them
    through a sigmoid at prediction time.
    """

    def __init__(
        self,
        latent_dim: int,
        hidden: Sequence[int] = (),
        kind: str = "real",
        dropout: float = 0.0,
    ):
        super().__init__()
        if kind not in OUTCOME_KINDS:
            raise ValueError(f"kind must be one of {OUTCOME_KINDS}")
        self.kind = kind
        self.latent_dim = latent_dim
        self.in_drop = nn.Dropout(dropout)
        self.head_0 = _head(2 * latent_dim, hidden, dropout)
        self.head_1 = _head(2 * latent_dim, hidden, dropout)

    def _features(self, z_y: torch.Tensor, z_c: torch.Tensor) -> torch.Tensor:
        for name, z in (("z_y", z_y), ("z_c", z_c)):
            if z.shape[-1] != self.latent_dim:
                raise ValueError(
                    f"{name} has width {z.shape[-1]}, heads expect {self.latent_dim}"
                )
        return self.in_drop(torch.cat([z_y, z_c], dim=-1))

    def raw(self, t: int, z_y: torch.Tensor, z_c: torch.Tensor) -> torch.Tensor:
        head = self.head_1 if t == 1 else self.head_0
        return head(self._features(z_y, z_c)).squeeze(-1)

    def factual(self, t: torch.Tensor, z_y: torch.Tensor, z_c: torch.Tensor) -> torch.Tensor:
        """Raw head output routed per example by its observed treatment."""
        x = self._features(z_y, z_c)
        out0 = self.head_0(x).squeeze(-1)
        out1 = self.head_1(x).squeeze(-1)
        return torch.where(t == 1, out1, out0)


def q_predict(q: QHeads, t: int, z_y: torch.Tensor, z_c: torch.Tensor) -> torch.Tensor:
    """Outcome prediction of head ``t`` at [z_y; z_c]; sigmoid-squashed for binary."""
    if t not in (0, 1):
        raise ValueError("t must be 0 or 1")
    out = q.raw(t, z_y, z_c)
    return torch.sigmoid(out) if q.kind == "binary" else out


def _check_ready(model) -> None:
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise RuntimeError("model has non-finite parameters; train it first")


def _latent_means(model, token_batches: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Posterior means (z_y, z_c) for a batch of token sequences, eval mode."""
    h = encode_batch(model.encoder, token_batches)
    with torch.no_grad():
        z_y = model.phi_y(h)[0]
        z_c = model.phi_c(h)[0]
    return z_y, z_c


REFIT_MODES = ("separate", "shared")

# cross-validation grid for the refit ridge strength, per-coefficient scale
L2_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)


def refit_q_heads(
    model,
    ds,
    split: str = "train",
    *,
    slopes: str = "shared",
    l2: float | None = None,
    n_folds: int = 5,
    batch_size: int = 256,
    max_iter: int = 200,
) -> None:
    """Refit the last layer of each outcome head on posterior-mean features.

    Gradient steps on the joint objective move the outcome heads far more
    slowly than the representation settles, so after training we solve the
    head weights outright: ridge regression in closed form for real outcomes,
    full-batch L-BFGS logistic regression for binary ones. Both are
    deterministic. Only the final linear layer changes; any hidden layers keep
    acting as a fixed feature map.

    ``slopes="shared"`` fits one slope vector for both arms plus per-arm
    intercepts (the classic covariate-adjustment regression). ``"separate"``
    fits each arm on its own documents; that is strictly more expressive but
    evaluates each arm's slopes outside its own support, so any direction
    whose within-arm variance is small turns into extrapolation noise in the
    effect estimates.

    Features are standardized by their train statistics and the ridge
    strength is chosen by deterministic stratified k-fold cross-validation
    over ``L2_GRID`` unless ``l2`` pins it. The penalty never touches the
    treatment coefficient or the intercept. The cross-validation matters:
    when the representation nearly separates the groups, the unpenalized fit
    estimates its treatment coefficient from a sliver of residual variation
    and explodes, while directions that truly predict the outcome within
    groups survive shrinkage.
    """
    if slopes not in REFIT_MODES:
        raise ValueError(f"slopes must be one of {REFIT_MODES}")
    docs = ds.split_docs(split)
    if not docs:
        raise ValueError(f"split {split!r} is empty")
    was_training = model.training
    model.eval()
    try:
        feats: list[torch.Tensor] = []
        for start in range(0, len(docs), batch_size):
            chunk = docs[start : start + batch_size]
            z_y, z_c = _latent_means(model, [d.tokens for d in chunk])
            feats.append(torch.cat([z_y, z_c], dim=-1))
        x_all = torch.cat(feats).double()
        t_all = torch.tensor([d.treatment for d in docs])
        y_all = torch.tensor([d.outcome for d in docs], dtype=torch.float64)
        for arm in (0, 1):
            if not bool((t_all == arm).any()):
                raise ValueError(f"split {split!r} has no documents with treatment {arm}")
        heads = (model.q_heads.head_0, model.q_heads.head_1)
        with torch.no_grad():
            phis = [h[:-1].double()(x_all) for h in heads]
        kind = model.q_heads.kind
        if slopes == "shared":
            if any(len(h) > 1 for h in heads):
                raise ValueError("shared-slope refit requires affine heads (no hidden layers)")
            # one regression: shared slopes, per-arm intercept via a t column
            t_col = (t_all == 1).double()
            w = _fit_standardized(
                phis[0], y_all, kind, t=t_col, l2=l2, n_folds=n_folds, max_iter=max_iter
            )
            slopes_w, t_coef, bias = w[:-2], w[-2], w[-1]
            for arm, head in enumerate(heads):
                _write_linear(head[-1], slopes_w, bias + t_coef * arm)
        else:
            for arm, head in enumerate(heads):
                rows = t_all == arm
                w = _fit_standardized(
                    phis[arm][rows], y_all[rows], kind, t=None,
                    l2=l2, n_folds=n_folds, max_iter=max_iter,
                )
                _write_linear(head[-1], w[:-1], w[-1])
        for head in heads:
            head.to(next(model.encoder.parameters()).dtype)
    finally:
        model.train(was_training)


def _fold_assignment(strata: torch.Tensor, n_folds: int) -> torch.Tensor:
    """Deterministic fold ids, cycling within each stratum in data order."""
    folds = torch.empty(len(strata), dtype=torch.long)
    for value in strata.unique():
        rows = torch.nonzero(strata == value, as_tuple=True)[0]
        folds[rows] = torch.arange(len(rows)) % n_folds
    return folds


def _fit_standardized(
    phi: torch.Tensor,
    y: torch.Tensor,
    kind: str,
    *,
    t: torch.Tensor | None,
    l2: float | None,
    n_folds: int,
    max_iter: int,
) -> torch.Tensor:
    """Fit on standardized features, choose l2 by CV, return original-scale
    coefficients ordered [slopes..., (t coefficient if t given), intercept]."""
    mean = phi.mean(dim=0)
    std = phi.std(dim=0).clamp_min(1e-12)
    xs = (phi - mean) / std
    design = xs if t is None else torch.cat([xs, t.unsqueeze(1)], dim=1)
    n_penalized = xs.shape[1]

    if l2 is None:
        strata = t.long() if t is not None else torch.zeros(len(y), dtype=torch.long)
        if kind == "binary":
            strata = strata * 2 + (y > 0.5).long()
        folds = _fold_assignment(strata, n_folds)
        best_l2, best_score = None, math.inf
        for candidate in L2_GRID:
            score = 0.0
            for f in range(n_folds):
                tr, va = folds != f, folds == f
                if not bool(va.any()) or not bool(tr.any()):
                    continue
                w = _fit_linear(
                    design[tr], y[tr], kind,
                    l2=candidate, n_penalized=n_penalized, max_iter=max_iter,
                )
                pred = design[va] @ w[:-1] + w[-1]
                if kind == "real":
                    score += float((pred - y[va]).pow(2).sum())
                else:
                    score += float(
                        nn.functional.binary_cross_entropy_with_logits(
                            pred, y[va], reduction="sum"
                        )
                    )
            if score < best_score:
                best_score, best_l2 = score, candidate
        l2 = best_l2
    w = _fit_linear(design, y, kind, l2=l2, n_penalized=n_penalized, max_iter=max_iter)
    # undo the standardization: slopes divide by std, intercept absorbs means
    slopes = w[:n_penalized] / std
    intercept = w[-1] - float(slopes @ mean)
    rest = w[n_penalized:-1]
    return torch.cat([slopes, rest, intercept.reshape(1)])


def _fit_linear(
    design: torch.Tensor,
    y: torch.Tensor,
    kind: str,
    *,
    l2: float,
    n_penalized: int,
    max_iter: int,
) -> torch.Tensor:
    """Ridge (real) or logistic (binary) fit with an implicit intercept column.

    Only the first ``n_penalized`` coefficients are penalized. Returns
    [coefficients..., intercept].
    """
    n, d = design.shape
    full = torch.cat([design, torch.ones(n, 1, dtype=design.dtype)], dim=1)
    penalty = torch.zeros(d + 1, dtype=design.dtype)
    penalty[:n_penalized] = l2
    if kind == "real":
        gram = full.T @ full + torch.diag(penalty)
        return torch.linalg.solve(gram, full.T @ y)
    w = torch.zeros(d + 1, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([w], max_iter=max_iter, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        logits = full @ w
        loss = nn.functional.binary_cross_entropy_with_logits(logits, y)
        loss = loss + (penalty * w.pow(2)).sum() / n
        loss.backward()
        return loss

    opt.step(closure)
    return w.detach()


def _write_linear(layer: nn.Linear, slopes: torch.Tensor, bias: torch.Tensor) -> None:
    with torch.no_grad():
        layer.weight.copy_(slopes.detach().reshape(1, -1))
        layer.bias.copy_(torch.as_tensor(bias).detach().reshape(1))


def estimate_ite(model, doc) -> float:
    """Plug-in individual effect Q(1) - Q(0) at the document's posterior-mean latents."""
    if len(doc.tokens) == 0:
        raise ValueError(f"document {doc.id!r} has no tokens")
    _check_ready(model)
    z_y, z_c = _latent_means(model, [doc.tokens])
    with torch.no_grad():
        diff = q_predict(model.q_heads, 1, z_y, z_c) - q_predict(model.q_heads, 0, z_y, z_c)
    return float(diff[0])


@dataclass(frozen=True)
class EffectEstimate:
    """Per-document effect estimates with their mean, tagged by split and model."""

    ids: tuple[str, ...]
    ite_hat: tuple[float, ...]
    ate_hat: float
    split: str
    seed: int | None
    model_id: str

    def __post_init__(self):
        if len(self.ids) != len(self.ite_hat):
            raise ValueError("ids and ite_hat lengths differ")
        if not self.ite_hat:
            raise ValueError("EffectEstimate needs at least one document")
        mean = float(np.mean(np.asarray(self.ite_hat, dtype=np.float64)))
        if not math.isclose(self.ate_hat, mean, rel_tol=0.0, abs_tol=1e-12):
            raise ValueError("ate_hat must equal the mean of ite_hat")

    @classmethod
    def from_ites(
        cls,
        ids: Sequence[str],
        ite_hat: Sequence[float],
        *,
        split: str,
        seed: int | None,
        model_id: str,
    ) -> "EffectEstimate":
        ate = float(np.mean(np.asarray(ite_hat, dtype=np.float64)))
        return cls(
            ids=tuple(ids),
            ite_hat=tuple(float(v) for v in ite_hat),
            ate_hat=ate,
            split=split,
            seed=seed,
            model_id=model_id,
        )


def estimate_ate(
    model,
    ds,
    split: str = "test",
    *,
    seed: int | None = None,
    batch_size: int = 256,
) -> EffectEstimate:
    """Plug-in average effect over a split: mean of per-document ITEs."""
    docs = ds.split_docs(split)
    if not docs:
        raise ValueError(f"split {split!r} is empty")
    _check_ready(model)
    ites: list[float] = []
    for start in range(0, len(docs), batch_size):
        chunk = docs[start : start + batch_size]
        z_y, z_c = _latent_means(model, [d.tokens for d in chunk])
        with torch.no_grad():
            diff = q_predict(model.q_heads, 1, z_y, z_c) - q_predict(model.q_heads, 0, z_y, z_c)
        ites.extend(float(v) for v in diff)
    if seed is None:
        seed = getattr(model, "train_seed", None)
    return EffectEstimate.from_ites(
        [d.id for d in docs],
        ites,
        split=split,
        seed=seed,
        model_id=getattr(model, "model_id", "diva"),
    )


def write_effects_jsonl(estimate: EffectEstimate, path: str | Path) -> None:
    """One {"id", "ite_hat"} record per document plus an aggregate footer line."""
    lines = [
        json.dumps({"id": i, "ite_hat": v}, sort_keys=True)
        for i, v in zip(estimate.ids, estimate.ite_hat)
    ]
    footer = {
        "ate_hat": estimate.ate_hat,
        "n": len(estimate.ids),
        "split": estimate.split,
        "seed": estimate.seed,
        "model_id": estimate.model_id,
    }
    lines.append(json.dumps(footer, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_effects_jsonl(path: str | Path) -> EffectEstimate:
    """Inverse of write_effects_jsonl."""
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
    if not lines:
        raise ValueError(f"{path}: empty effects file")
    footer = json.loads(lines[-1])
    for key in ("ate_hat", "n", "split", "model_id"):
        if key not in footer:
            raise ValueError(f"{path}: malformed footer line")
    records = [json.loads(l) for l in lines[:-1]]
    if len(records) != footer["n"]:
        raise ValueError(f"{path}: footer n={footer['n']} but {len(records)} records")
    return EffectEstimate(
        ids=tuple(r["id"] for r in records),
        ite_hat=tuple(float(r["ite_hat"]) for r in records),
        ate_hat=float(footer["ate_hat"]),
        split=footer["split"],
        seed=footer.get("seed"),
        model_id=footer["model_id"],
    )
