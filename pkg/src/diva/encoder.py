"""Tokenization, a small trainable text encoder, and the masked-token objective.

The encoder stands in for a large pretrained language model: token plus
position embeddings, a short stack of pre-norm self-attention blocks, and
mean pooling over non-pad positions. The same backbone serves both the
pooled document representation and the masked-token head.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PAD_TOKEN = "<pad>"
MASK_TOKEN = "<mask>"
UNK_TOKEN = "<unk>"
SPECIAL_TOKENS = (PAD_TOKEN, MASK_TOKEN, UNK_TOKEN)

# label value for positions that do not contribute to the masked-token loss
MLM_IGNORE = -100


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokenization."""
    return text.lower().split()


class Vocabulary:
    """Dense token -> id map with pad/mask/unk specials.

    Ids are dense in [0, len). The three special tokens must be present and
    are placed at ids 0, 1, 2 by the constructors in this module.
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        for special in SPECIAL_TOKENS:
            if special not in self.token_to_id:
                raise ValueError(f"vocabulary is missing special token {special!r}")
        self.pad_id = self.token_to_id[PAD_TOKEN]
        self.mask_id = self.token_to_id[MASK_TOKEN]
        self.unk_id = self.token_to_id[UNK_TOKEN]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def content_ids(self) -> list[int]:
        """Ids of all non-special tokens."""
        special = {self.pad_id, self.mask_id, self.unk_id}
        return [i for i in range(len(self.tokens)) if i not in special]

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 30000, min_count: int = 1) -> "Vocabulary":
        """Frequency-sorted vocabulary over tokenized texts.

        Ties in frequency break alphabetically so the id assignment is a pure
        function of the corpus. ``max_size`` counts the special tokens.
        """
        if max_size <= len(SPECIAL_TOKENS):
            raise ValueError("max_size must exceed the number of special tokens")
        counter: Counter[str] = Counter()
        for text in texts:
            counter.update(tokenize(text))
        kept = [t for t, c in counter.items() if c >= min_count and t not in SPECIAL_TOKENS]
        kept.sort(key=lambda t: (-counter[t], t))
        kept = kept[: max_size - len(SPECIAL_TOKENS)]
        return cls(list(SPECIAL_TOKENS) + kept)

    @classmethod
    def synthetic(cls, n_content: int) -> "Vocabulary":
        """Fixed-width numbered tokens for generated corpora."""
        if n_content <= 0:
            raise ValueError("n_content must be positive")
        width = len(str(n_content - 1))
        content = [f"w{i:0{width}d}" for i in range(n_content)]
        return cls(list(SPECIAL_TOKENS) + content)

    def encode(self, text: str, max_len: int = 512) -> list[int]:
        """Token ids for a text, truncated from the right to ``max_len``."""
        ids = [self.token_to_id.get(t, self.unk_id) for t in tokenize(text)]
        return ids[:max_len]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])


def pad_sequences(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> torch.Tensor:
    """Stack variable-length id sequences into a [B, L] long tensor."""
    if not seqs:
        raise ValueError("cannot pad an empty batch")
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot pad an empty sequence")
    longest = max(len(s) for s in seqs)
    out = torch.full((len(seqs), longest), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
    return out


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block: x + attn(LN(x)), then x + ffn(LN(x))."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim),
            nn.GELU(),
            nn.Linear(ffn_dim, dim),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor) -> torch.Tensor:
        a = self.norm1(x)
        a, _ = self.attn(a, a, a, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + self.drop(a)
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x


class TextEncoder(nn.Module):
    """Mean-pooled transformer encoder over token ids.

    ``forward`` returns the pooled document vector h in R^dim; pad positions
    are excluded from both attention and pooling.
    """

    def __init__(
        self,
        vocab_size: int,
        dim: int = 32,
        depth: int = 1,
        n_heads: int = 4,
        ffn_dim: int | None = None,
        max_len: int = 512,
        dropout: float = 0.0,
        pad_id: int = 0,
    ):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")
        ffn_dim = ffn_dim if ffn_dim is not None else 4 * dim
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        self.pad_id = pad_id
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=pad_id)
        self.pos = nn.Embedding(max_len, dim)
        self.emb_drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, n_heads, ffn_dim, dropout) for _ in range(depth)
        )
        self.out_norm = nn.LayerNorm(dim)
        self.mlm_head = nn.Linear(dim, vocab_size)

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.dim() != 2:
            raise ValueError("tokens must be a [B, L] tensor")
        if tokens.numel() == 0:
            raise ValueError("empty token batch")
        if tokens.size(1) > self.max_len:
            raise ValueError(f"sequence length {tokens.size(1)} exceeds max_len {self.max_len}")
        if int(tokens.min()) < 0 or int(tokens.max()) >= self.vocab_size:
            raise ValueError("token id out of vocabulary range")

    def token_states(self, tokens: torch.Tensor) -> torch.Tensor:
        """Contextual states [B, L, dim] with pad positions masked out of attention."""
        self._check_tokens(tokens)
        positions = torch.arange(tokens.size(1), device=tokens.device)
        x = self.embed(tokens) + self.pos(positions)[None, :, :]
        x = self.emb_drop(x)
        pad_mask = tokens.eq(self.pad_id)
        for block in self.blocks:
            x = block(x, key_padding_mask=pad_mask)
        return self.out_norm(x)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Pooled representation h: mean of contextual states over non-pad positions."""
        states = self.token_states(tokens)
        keep = tokens.ne(self.pad_id).to(states.dtype).unsqueeze(-1)
        denom = keep.sum(dim=1).clamp(min=1.0)
        return (states * keep).sum(dim=1) / denom

    def mlm_logits(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(self.token_states(tokens))


def encode(encoder: TextEncoder, tokens: Sequence[int]) -> torch.Tensor:
    """Pooled vector for one token sequence, in eval mode without gradients."""
    if len(tokens) == 0:
        raise ValueError("cannot encode an empty token sequence")
    return encode_batch(encoder, [tokens])[0]


def encode_batch(encoder: TextEncoder, seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    """Pooled vectors [B, dim] for a batch of sequences, eval mode, no gradients."""
    batch = pad_sequences(seqs, pad_id=encoder.pad_id)
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            h = encoder(batch)
    finally:
        encoder.train(was_training)
    return h


def mask_tokens(
    tokens: Sequence[int],
    rate: float,
    rng: np.random.Generator,
    *,
    mask_id: int,
) -> tuple[list[int], list[int]]:
    """Replace a random subset of positions with the mask id.

    Returns (masked_tokens, labels): labels hold the original id at masked
    positions and MLM_IGNORE elsewhere. At least one position is always
    masked, so n_masked = max(1, floor(rate * len)).
    """
    if len(tokens) == 0:
        raise ValueError("cannot mask an empty sequence")
    if not 0.0 < rate < 1.0:
        raise ValueError("mask rate must lie strictly between 0 and 1")
    n_masked = max(1, int(rate * len(tokens)))
    positions = rng.choice(len(tokens), size=n_masked, replace=False)
    masked = list(tokens)
    labels = [MLM_IGNORE] * len(tokens)
    for p in positions:
        labels[p] = masked[p]
        masked[p] = mask_id
    return masked, labels


def mlm_loss(encoder: TextEncoder, masked_tokens: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions only."""
    if masked_tokens.dim() == 1:
        masked_tokens = masked_tokens.unsqueeze(0)
        labels = labels.unsqueeze(0)
    if masked_tokens.shape != labels.shape:
        raise ValueError("masked_tokens and labels must have the same shape")
    keep = labels.ne(MLM_IGNORE)
    if not bool(keep.any()):
        raise ValueError("no masked positions in batch")
    logits = encoder.mlm_logits(masked_tokens)
    return F.cross_entropy(logits[keep], labels[keep])
