"""Reference estimators: difference in means and a two-head outcome regressor."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Dataset
from .encoder import TextEncoder, pad_sequences
from .estimator import EffectEstimate


def naive_ate(ds: Dataset, split: str = "test") -> float:
    """Difference in mean observed outcomes between treated and control."""
    docs = ds.split_docs(split)
    treated, control = [], []
    for d in docs:
        if d.treatment is None or d.outcome is None:
            raise ValueError(f"document {d.id!r} lacks treatment or outcome")
        (treated if d.treatment == 1 else control).append(d.outcome)
    if not treated or not control:
        raise ValueError(f"split {split!r} does not contain both treatment groups")
    return float(np.mean(treated) - np.mean(control))


@dataclass(frozen=True)
class TarnetConfig:
    """Training settings for the two-head baseline."""

    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    dim: int = 32
    depth: int = 1
    n_heads: int = 4
    rep_dim: int = 32
    dropout: float = 0.0
    max_len: int = 512
    outcome_kind: str = "real"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.outcome_kind not in ("real", "binary"):
            raise ValueError("outcome_kind must be 'real' or 'binary'")


class TwoHeadRegressor(nn.Module):
    """Shared text representation with one outcome head per treatment arm.

    No latent disentanglement: the heads act directly on a nonlinear map of
    the pooled encoder output h.
    """

    def __init__(self, vocab_size: int, config: TarnetConfig, pad_id: int = 0):
        super().__init__()
        self.config = config
        self.encoder = TextEncoder(
            vocab_size,
            dim=config.dim,
            depth=config.depth,
            n_heads=config.n_heads,
            max_len=config.max_len,
            dropout=config.dropout,
            pad_id=pad_id,
        )
        self.rep = nn.Sequential(nn.Linear(config.dim, config.rep_dim), nn.ReLU())
        self.head_0 = nn.Linear(config.rep_dim, 1)
        self.head_1 = nn.Linear(config.rep_dim, 1)
        nn.init.zeros_(self.head_0.weight)
        nn.init.zeros_(self.head_0.bias)
        nn.init.zeros_(self.head_1.weight)
        nn.init.zeros_(self.head_1.bias)

    def _rep(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.rep(self.encoder(tokens))

    def factual(self, tokens: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        r = self._rep(tokens)
        out0 = self.head_0(r).squeeze(-1)
        out1 = self.head_1(r).squeeze(-1)
        return torch.where(t == 1, out1, out0)

    def ite(self, tokens: torch.Tensor) -> torch.Tensor:
        r = self._rep(tokens)
        out0 = self.head_0(r).squeeze(-1)
        out1 = self.head_1(r).squeeze(-1)
        if self.config.outcome_kind == "binary":
            return torch.sigmoid(out1) - torch.sigmoid(out0)
        return out1 - out0


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _dev_score(model: TwoHeadRegressor, tokens: torch.Tensor, t: torch.Tensor, y: torch.Tensor) -> float:
    """Higher is better: negative MSE (real) or accuracy (binary)."""
    model.eval()
    with torch.no_grad():
        out = model.factual(tokens, t)
        if model.config.outcome_kind == "binary":
            pred = (torch.sigmoid(out) >= 0.5).double()
            return float((pred == y.double()).double().mean())
        return -float(F.mse_loss(out, y))


def tarnet_fit_predict(ds: Dataset, config: TarnetConfig, split: str = "test") -> EffectEstimate:
    """Train the two-head baseline on factual outcomes; plug-in effects on a split."""
    train_docs = ds.split_docs("train")
    dev_docs = ds.split_docs("dev")
    for d in train_docs + dev_docs:
        if d.treatment is None or d.outcome is None:
            raise ValueError(f"document {d.id!r} lacks treatment or outcome")

    def tensors(docs):
        tokens = pad_sequences([d.tokens for d in docs], pad_id=ds.vocabulary.pad_id)
        t = torch.tensor([d.treatment for d in docs], dtype=torch.long)
        y = torch.tensor([d.outcome for d in docs], dtype=torch.float32)
        return tokens, t, y

    tr_tokens, tr_t, tr_y = tensors(train_docs)
    dev_tokens, dev_t, dev_y = tensors(dev_docs)

    ss = np.random.SeedSequence(config.seed)
    torch_seed, batch_seed, drop_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    with torch.random.fork_rng():
        torch.manual_seed(torch_seed)
        model = TwoHeadRegressor(len(ds.vocabulary), config, pad_id=ds.vocabulary.pad_id)
    rng = np.random.default_rng(batch_seed)

    opt = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    best_score = _dev_score(model, dev_tokens, dev_t, dev_y)
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    # keep dropout masks on a seeded fork so repeated fits are bit-identical
    with torch.random.fork_rng():
        torch.manual_seed(drop_seed)
        for _ in range(config.epochs):
            model.train()
            for idx in _batches(len(train_docs), config.batch_size, rng):
                sel = torch.from_numpy(idx)
                out = model.factual(tr_tokens[sel], tr_t[sel])
                if config.outcome_kind == "binary":
                    loss = F.binary_cross_entropy_with_logits(out, tr_y[sel])
                else:
                    loss = F.mse_loss(out, tr_y[sel])
                if not math.isfinite(float(loss)):
                    raise RuntimeError("non-finite baseline training loss")
                opt.zero_grad()
                loss.backward()
                opt.step()
            score = _dev_score(model, dev_tokens, dev_t, dev_y)
            if score > best_score:
                best_score = score
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)

    docs = ds.split_docs(split)
    if not docs:
        raise ValueError(f"split {split!r} is empty")
    model.eval()
    ites: list[float] = []
    with torch.no_grad():
        for start in range(0, len(docs), 256):
            chunk = docs[start : start + 256]
            tokens = pad_sequences([d.tokens for d in chunk], pad_id=ds.vocabulary.pad_id)
            ites.extend(float(v) for v in model.ite(tokens))
    return EffectEstimate.from_ites(
        [d.id for d in docs], ites, split=split, seed=config.seed, model_id="tarnet"
    )
