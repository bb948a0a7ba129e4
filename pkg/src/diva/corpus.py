"""Corpus handling: ingestion, synthetic generation, treatment assignment, splits.

A corpus is an immutable Dataset of Documents. Real corpora come from JSONL
files with one record per line:

    {"id": ..., "text": ..., "score": ..., "meta": {"sector": ..., "size": ...}}

Synthetic corpora are generated from a SyntheticCorpusSpec with known binary
latent factors per document, so downstream probes have ground truth.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .encoder import Vocabulary

SPLIT_NAMES = ("train", "dev", "test")


class CorpusError(ValueError):
    """Malformed corpus input or an invalid corpus operation."""


@dataclass(frozen=True)
class Document:
    """One text with its continuous score, covariates, and optional labels.

    ``y0``/``y1``/``ite`` are only populated by the outcome simulator;
    ``latent_truth`` is only populated by the synthetic corpus generator.
    """

    id: str
    tokens: tuple[int, ...]
    score: float
    meta: Mapping[str, Any]
    raw_text: str | None = None
    treatment: int | None = None
    outcome: float | None = None
    y0: float | None = None
    y1: float | None = None
    ite: float | None = None
    latent_truth: Mapping[str, bool] | None = None

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise CorpusError(f"document {self.id!r} has no tokens")
        if not math.isfinite(self.score):
            raise CorpusError(f"document {self.id!r} has a non-finite score")
        if self.treatment is not None and self.treatment not in (0, 1):
            raise CorpusError(f"document {self.id!r} has treatment outside {{0, 1}}")


@dataclass(frozen=True)
class Dataset:
    """Immutable document collection with vocabulary and named index splits."""

    documents: tuple[Document, ...]
    vocabulary: Vocabulary
    splits: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    provenance: str = "real"
    seed: int | None = None
    generator_spec: Mapping[str, Any] | None = None

    def __post_init__(self):
        if self.provenance not in ("real", "synthetic"):
            raise CorpusError(f"unknown provenance {self.provenance!r}")
        n = len(self.documents)
        seen: set[int] = set()
        for name, idxs in self.splits.items():
            for i in idxs:
                if not 0 <= i < n:
                    raise CorpusError(f"split {name!r} references index {i} outside [0, {n})")
                if i in seen:
                    raise CorpusError(f"index {i} appears in more than one split")
                seen.add(i)
        for doc in self.documents:
            has_truth = doc.latent_truth is not None
            if has_truth != (self.provenance == "synthetic"):
                raise CorpusError(
                    "latent_truth must be present exactly on synthetic documents"
                )

    def __len__(self) -> int:
        return len(self.documents)

    def split_indices(self, name: str) -> tuple[int, ...]:
        if name not in self.splits:
            raise CorpusError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return tuple(self.splits[name])

    def split_docs(self, name: str) -> tuple[Document, ...]:
        return tuple(self.documents[i] for i in self.split_indices(name))


def _require(record: Mapping[str, Any], key: str, lineno: int) -> Any:
    if key not in record:
        raise CorpusError(f"line {lineno}: missing field {key!r}")
    return record[key]


def load_corpus(
    path: str | Path,
    format: str = "jsonl",
    *,
    vocabulary: Vocabulary | None = None,
    vocab_size: int = 30000,
    min_count: int = 1,
    max_len: int = 512,
) -> Dataset:
    """Read a JSONL corpus into a Dataset, building a vocabulary if none is given.

    Documents keep their file order. Malformed lines raise CorpusError with
    the 1-based line number.
    """
    if format != "jsonl":
        raise CorpusError(f"unsupported corpus format {format!r}")
    path = Path(path)
    records: list[tuple[int, Mapping[str, Any]]] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise CorpusError(f"line {lineno}: record is not an object")
            _require(record, "id", lineno)
            text = _require(record, "text", lineno)
            score = _require(record, "score", lineno)
            meta = _require(record, "meta", lineno)
            if not isinstance(meta, dict):
                raise CorpusError(f"line {lineno}: meta is not an object")
            for key in ("sector", "size"):
                if key not in meta:
                    raise CorpusError(f"line {lineno}: missing field 'meta.{key}'")
            if not isinstance(text, str) or not text.split():
                raise CorpusError(f"line {lineno}: empty text")
            try:
                score = float(score)
            except (TypeError, ValueError) as exc:
                raise CorpusError(f"line {lineno}: score is not a number") from exc
            if not isinstance(meta["size"], (int, float)) or isinstance(meta["size"], bool):
                raise CorpusError(f"line {lineno}: meta.size is not a number")
            if meta["size"] <= 0:
                raise CorpusError(f"line {lineno}: meta.size must be positive")
            records.append((lineno, record))
    if not records:
        raise CorpusError(f"{path}: empty corpus")
    if vocabulary is None:
        vocabulary = Vocabulary.build(
            (r["text"] for _, r in records), max_size=vocab_size, min_count=min_count
        )
    docs = []
    seen_ids: set[str] = set()
    for lineno, record in records:
        doc_id = str(record["id"])
        if doc_id in seen_ids:
            raise CorpusError(f"line {lineno}: duplicate document id {doc_id!r}")
        seen_ids.add(doc_id)
        docs.append(
            Document(
                id=doc_id,
                tokens=tuple(vocabulary.encode(record["text"], max_len=max_len)),
                score=float(record["score"]),
                meta=dict(record["meta"]),
                raw_text=record["text"],
            )
        )
    return Dataset(documents=tuple(docs), vocabulary=vocabulary, provenance="real")


def assign_treatment(ds: Dataset, k_top: int, k_bottom: int) -> Dataset:
    """Label the k_top highest-score documents treated and the k_bottom lowest control.

    Documents are ranked once by (score descending, id ascending); the middle
    of the ranking is dropped. Score ties are broken by id so assignment is
    deterministic. Any existing splits are discarded because indices shift.
    """
    if k_top <= 0 or k_bottom <= 0:
        raise ValueError("k_top and k_bottom must be positive")
    n = len(ds.documents)
    if k_top + k_bottom > n:
        raise ValueError(f"k_top + k_bottom = {k_top + k_bottom} exceeds corpus size {n}")
    order = sorted(range(n), key=lambda i: (-ds.documents[i].score, ds.documents[i].id))
    labelled = {i: 1 for i in order[:k_top]}
    labelled.update({i: 0 for i in order[n - k_bottom:]})
    docs = tuple(
        replace(ds.documents[i], treatment=labelled[i]) for i in sorted(labelled)
    )
    return replace(ds, documents=docs, splits={})


def _largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    """Integer allocation of ``total`` proportional to ``weights``."""
    scale = sum(weights)
    quotas = [total * w / scale for w in weights]
    counts = [int(math.floor(q)) for q in quotas]
    short = total - sum(counts)
    by_frac = sorted(range(len(weights)), key=lambda i: (counts[i] - quotas[i], i))
    for i in by_frac[:short]:
        counts[i] += 1
    return counts


def split_dataset(
    ds: Dataset, ratio: Sequence[float] = (8, 1, 6), seed: int = 0
) -> Dataset:
    """Stratified train/dev/test split preserving the treated fraction per split.

    Treated and control documents are permuted separately and allocated by
    largest remainder, so every split's treated count is within one of the
    proportional target. Deterministic in ``seed``.
    """
    if len(ratio) != len(SPLIT_NAMES):
        raise ValueError(f"ratio must have {len(SPLIT_NAMES)} components")
    if any(r <= 0 for r in ratio):
        raise ValueError("split ratio components must be positive")
    if any(d.treatment is None for d in ds.documents):
        raise ValueError("assign treatment before splitting")
    n = len(ds.documents)
    treated = np.array([i for i, d in enumerate(ds.documents) if d.treatment == 1])
    control = np.array([i for i, d in enumerate(ds.documents) if d.treatment == 0])
    totals = _largest_remainder(n, ratio)
    treated_counts = _largest_remainder(len(treated), ratio)
    control_counts = [t - k for t, k in zip(totals, treated_counts)]
    # repair any negative control target by moving surplus between buckets
    for i, c in enumerate(control_counts):
        while control_counts[i] < 0:
            j = max(range(len(control_counts)), key=lambda k: control_counts[k])
            control_counts[j] -= 1
            control_counts[i] += 1
            treated_counts[j] += 1
            treated_counts[i] -= 1
    rng = np.random.default_rng(seed)
    treated = treated[rng.permutation(len(treated))]
    control = control[rng.permutation(len(control))]
    splits: dict[str, tuple[int, ...]] = {}
    t_off = c_off = 0
    for name, t_k, c_k in zip(SPLIT_NAMES, treated_counts, control_counts):
        chunk = np.concatenate(
            [treated[t_off : t_off + t_k], control[c_off : c_off + c_k]]
        )
        t_off += t_k
        c_off += c_k
        splits[name] = tuple(int(i) for i in np.sort(chunk))
    return replace(ds, splits=splits)


@dataclass(frozen=True)
class CovariateMarginals:
    """How the confound latent u_c shapes the observed covariates."""

    sectors: tuple[str, ...] = ("energy", "industrials", "tech", "health")
    sector_loading: float = 0.8
    size_log_mean: float = 0.0
    size_log_sigma: float = 0.5
    size_loading: float = 1.0

    def __post_init__(self):
        if len(self.sectors) < 2:
            raise CorpusError("need at least two sectors")
        if not 0.0 <= self.sector_loading < 1.0:
            raise CorpusError("sector_loading must lie in [0, 1)")
        if self.size_log_sigma <= 0:
            raise CorpusError("size_log_sigma must be positive")


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Generator settings for a corpus with known binary latents.

    Each document draws independent u_t, u_c, u_y ~ Bernoulli(1/2). The
    vocabulary is partitioned into four blocks (t-signal, c-signal, y-signal,
    noise) sized by ``signal_fractions``; tokens in block k are upweighted by
    (1+signal_strength)/(1-signal_strength) when u_k is on. The score mixes
    u_t and u_c plus noise, so score-based treatment is confounded by u_c,
    which also tilts sector membership and log size.
    """

    n_docs: int = 2000
    vocab_size: int = 200
    doc_length: int = 48
    signal_fractions: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    signal_strength: float = 0.8
    covariates: CovariateMarginals = field(default_factory=CovariateMarginals)
    score_treat_weight: float = 2.0
    score_confound_weight: float = 2.0
    score_noise: float = 0.5

    def __post_init__(self):
        if self.n_docs <= 0 or self.vocab_size <= 0 or self.doc_length <= 0:
            raise CorpusError("n_docs, vocab_size and doc_length must be positive")
        if len(self.signal_fractions) != 4:
            raise CorpusError("signal_fractions must have four components (t, c, y, noise)")
        if any(f < 0 for f in self.signal_fractions):
            raise CorpusError("signal_fractions must be nonnegative")
        if not math.isclose(sum(self.signal_fractions), 1.0, abs_tol=1e-9):
            raise CorpusError("signal_fractions must sum to 1")
        if not 0.0 < self.signal_strength < 1.0:
            raise CorpusError("signal_strength must lie strictly between 0 and 1")
        if self.score_noise < 0:
            raise CorpusError("score_noise must be nonnegative")

    def to_mapping(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["covariates"]["sectors"] = list(self.covariates.sectors)
        out["signal_fractions"] = list(self.signal_fractions)
        return out

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SyntheticCorpusSpec":
        data = dict(data)
        cov = data.pop("covariates", None)
        kwargs: dict[str, Any] = dict(data)
        if "signal_fractions" in kwargs:
            kwargs["signal_fractions"] = tuple(kwargs["signal_fractions"])
        if cov is not None:
            cov = dict(cov)
            if "sectors" in cov:
                cov["sectors"] = tuple(cov["sectors"])
            kwargs["covariates"] = CovariateMarginals(**cov)
        return cls(**kwargs)


def _vocab_blocks(spec: SyntheticCorpusSpec) -> dict[str, np.ndarray]:
    """Partition content token indices 0..vocab_size into the four blocks."""
    sizes = _largest_remainder(spec.vocab_size, spec.signal_fractions)
    names = ("t", "c", "y", "noise")
    blocks: dict[str, np.ndarray] = {}
    start = 0
    for name, size in zip(names, sizes):
        blocks[name] = np.arange(start, start + size)
        start += size
    for name, frac in zip(names[:3], spec.signal_fractions[:3]):
        if frac > 0 and blocks[name].size == 0:
            raise CorpusError(
                f"vocab_size {spec.vocab_size} too small for a nonempty {name!r} block"
            )
    return blocks


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, seed: int) -> Dataset:
    """Sample a corpus where text, score, and covariates share known latents."""
    rng = np.random.default_rng(seed)
    blocks = _vocab_blocks(spec)
    vocab = Vocabulary.synthetic(spec.vocab_size)
    content = np.array(vocab.content_ids)
    cov = spec.covariates
    n_sect = len(cov.sectors)
    n_favored = (n_sect + 1) // 2
    s = spec.signal_strength
    docs = []
    id_width = len(str(spec.n_docs - 1))
    for i in range(spec.n_docs):
        u = {name: bool(rng.random() < 0.5) for name in ("t", "c", "y")}
        weights = np.ones(spec.vocab_size)
        for name in ("t", "c", "y"):
            weights[blocks[name]] = (1.0 + s) if u[name] else (1.0 - s)
        probs = weights / weights.sum()
        token_idx = rng.choice(spec.vocab_size, size=spec.doc_length, p=probs)
        tokens = tuple(int(content[j]) for j in token_idx)
        sector_w = np.full(n_sect, 1.0 - cov.sector_loading)
        favored = slice(0, n_favored) if u["c"] else slice(n_favored, n_sect)
        sector_w[favored] = 1.0 + cov.sector_loading
        sector = cov.sectors[int(rng.choice(n_sect, p=sector_w / sector_w.sum()))]
        log_size = (
            cov.size_log_mean
            + cov.size_loading * (float(u["c"]) - 0.5)
            + cov.size_log_sigma * rng.normal()
        )
        score = _sigmoid(
            spec.score_treat_weight * float(u["t"])
            + spec.score_confound_weight * float(u["c"])
            + spec.score_noise * rng.normal()
        )
        docs.append(
            Document(
                id=f"syn{i:0{id_width}d}",
                tokens=tokens,
                score=score,
                meta={"sector": sector, "size": float(math.exp(log_size))},
                latent_truth={"u_t": u["t"], "u_c": u["c"], "u_y": u["y"]},
            )
        )
    return Dataset(
        documents=tuple(docs),
        vocabulary=vocab,
        provenance="synthetic",
        seed=seed,
        generator_spec=spec.to_mapping(),
    )


@dataclass(frozen=True)
class PositivityReport:
    """Per-category treated fractions for one categorical covariate."""

    covariate: str
    probabilities: Mapping[Any, float]
    counts: Mapping[Any, tuple[int, int]]
    violations: tuple[Any, ...]
    warnings: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_positivity(ds: Dataset, covariate: str) -> PositivityReport:
    """Check that every category of a covariate contains both treatment groups.

    Categories with treated fraction exactly 0 or 1 are listed as violations.
    Categories declared by a synthetic generator but absent from the corpus
    are excluded with a warning.
    """
    if any(d.treatment is None for d in ds.documents):
        raise ValueError("assign treatment before checking positivity")
    values = []
    for d in ds.documents:
        if covariate not in d.meta:
            raise ValueError(f"unknown covariate {covariate!r}")
        values.append(d.meta[covariate])
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        raise ValueError(
            f"covariate {covariate!r} is numeric; bin it via estimate_propensity instead"
        )
    counts: dict[Any, list[int]] = {}
    for d, v in zip(ds.documents, values):
        entry = counts.setdefault(v, [0, 0])
        entry[0] += 1
        entry[1] += int(d.treatment == 1)
    warnings: list[str] = []
    if covariate == "sector" and ds.generator_spec is not None:
        declared = ds.generator_spec.get("covariates", {}).get("sectors", [])
        for name in declared:
            if name not in counts:
                warnings.append(f"declared category {name!r} has no documents; excluded")
    probabilities = {v: n_t / n for v, (n, n_t) in counts.items()}
    violations = tuple(v for v, p in probabilities.items() if p in (0.0, 1.0))
    return PositivityReport(
        covariate=covariate,
        probabilities=probabilities,
        counts={v: (n, n_t) for v, (n, n_t) in counts.items()},
        violations=violations,
        warnings=tuple(warnings),
    )


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Serialize a Dataset (documents, vocabulary, splits) to a JSON file."""
    payload = {
        "format": "diva-dataset-v1",
        "provenance": ds.provenance,
        "seed": ds.seed,
        "generator_spec": ds.generator_spec,
        "vocabulary": ds.vocabulary.tokens,
        "splits": {k: list(v) for k, v in ds.splits.items()},
        "documents": [
            {
                "id": d.id,
                "tokens": list(d.tokens),
                "score": d.score,
                "meta": dict(d.meta),
                "raw_text": d.raw_text,
                "treatment": d.treatment,
                "outcome": d.outcome,
                "y0": d.y0,
                "y1": d.y1,
                "ite": d.ite,
                "latent_truth": dict(d.latent_truth) if d.latent_truth else None,
            }
            for d in ds.documents
        ],
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    """Inverse of save_dataset."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != "diva-dataset-v1":
        raise CorpusError(f"{path}: not a saved dataset")
    vocab = Vocabulary(payload["vocabulary"])
    docs = tuple(
        Document(
            id=d["id"],
            tokens=tuple(d["tokens"]),
            score=d["score"],
            meta=d["meta"],
            raw_text=d.get("raw_text"),
            treatment=d.get("treatment"),
            outcome=d.get("outcome"),
            y0=d.get("y0"),
            y1=d.get("y1"),
            ite=d.get("ite"),
            latent_truth=d.get("latent_truth"),
        )
        for d in payload["documents"]
    )
    return Dataset(
        documents=docs,
        vocabulary=vocab,
        splits={k: tuple(v) for k, v in payload["splits"].items()},
        provenance=payload["provenance"],
        seed=payload.get("seed"),
        generator_spec=payload.get("generator_spec"),
    )
