"""Semi-synthetic outcome simulation with known ground-truth effects.

Outcomes depend on treatment plus a confound built from propensity scores of
the document's covariates:

    volatility: y = alpha*T + beta1*(pi_sect - gamma0) + beta2*(pi_size - gamma1) + eps
    movement:   y ~ Bernoulli(sigmoid(same expression))

eps is drawn once per document and shared across both potential outcomes, so
the ground-truth ite is noiseless: alpha exactly for volatility and
sigmoid(c + alpha) - sigmoid(c) for movement, where c is the confound term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .corpus import Dataset, Document

OUTCOME_KIND_ALIASES = {
    "volatility": "volatility",
    "vol": "volatility",
    "movement": "movement",
    "mov": "movement",
}


def _canonical_kind(kind: str) -> str:
    if kind not in OUTCOME_KIND_ALIASES:
        raise ValueError(f"unknown outcome kind {kind!r}")
    return OUTCOME_KIND_ALIASES[kind]


@dataclass(frozen=True)
class SimulationParams:
    """Coefficients of the outcome equations."""

    alpha: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    gamma0: float = 0.5
    gamma1: float = 0.5
    noise_scale: float = 1.0
    outcome_kind: str = "volatility"

    def __post_init__(self):
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        object.__setattr__(self, "outcome_kind", _canonical_kind(self.outcome_kind))

    @classmethod
    def from_caption(
        cls, alpha: float, beta: float, gamma: float, noise: float, outcome_kind: str
    ) -> "SimulationParams":
        """Single beta/gamma convention: beta1 = beta2 = beta, gamma0 = gamma1 = gamma."""
        return cls(
            alpha=alpha,
            beta1=beta,
            beta2=beta,
            gamma0=gamma,
            gamma1=gamma,
            noise_scale=noise,
            outcome_kind=outcome_kind,
        )


@dataclass(frozen=True)
class PropensityTable:
    """Treated fractions by covariate category (categorical) or bin (numeric).

    ``binned`` maps a covariate to (edges, probabilities); a value v falls in
    the bin whose interior edges bracket it. ``flagged`` records sparse cells
    and positivity violations as (covariate, key, reason) triples.
    """

    categorical: Mapping[str, Mapping[Any, float]]
    binned: Mapping[str, tuple[tuple[float, ...], tuple[float, ...]]]
    flagged: tuple[tuple[str, Any, str], ...] = ()

    def lookup(self, covariate: str, value: Any) -> float:
        if covariate in self.categorical:
            table = self.categorical[covariate]
            if value not in table:
                raise KeyError(f"no propensity entry for {covariate}={value!r}")
            return table[value]
        if covariate in self.binned:
            edges, probs = self.binned[covariate]
            idx = int(np.searchsorted(np.asarray(edges[1:-1]), value, side="right"))
            idx = min(max(idx, 0), len(probs) - 1)
            p = probs[idx]
            if math.isnan(p):
                raise KeyError(f"no propensity entry for {covariate} bin {idx}")
            return p
        raise KeyError(f"no propensity table for covariate {covariate!r}")

    def merged(self, other: "PropensityTable") -> "PropensityTable":
        return PropensityTable(
            categorical={**self.categorical, **other.categorical},
            binned={**self.binned, **other.binned},
            flagged=self.flagged + other.flagged,
        )


def estimate_propensity(ds: Dataset, covariate: str, bins: int = 4) -> PropensityTable:
    """Empirical treated fraction per category, or per equal-frequency bin for
    numeric covariates.

    Cells with fewer than 2 documents are flagged "sparse"; treated fractions
    of exactly 0 or 1 are flagged "positivity". Flags never block simulation.
    """
    if any(d.treatment is None for d in ds.documents):
        raise ValueError("assign treatment before estimating propensity")
    values = []
    for d in ds.documents:
        if covariate not in d.meta:
            raise ValueError(f"unknown covariate {covariate!r}")
        values.append(d.meta[covariate])
    treated = np.array([d.treatment == 1 for d in ds.documents])

    numeric = all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values)
    flagged: list[tuple[str, Any, str]] = []
    if not numeric:
        table: dict[Any, float] = {}
        for v in sorted(set(values), key=repr):
            in_cell = np.array([x == v for x in values])
            n = int(in_cell.sum())
            pi = float(treated[in_cell].mean())
            table[v] = pi
            if n < 2:
                flagged.append((covariate, v, "sparse"))
            if pi in (0.0, 1.0):
                flagged.append((covariate, v, "positivity"))
        return PropensityTable(categorical={covariate: table}, binned={}, flagged=tuple(flagged))

    if bins < 1:
        raise ValueError("bins must be positive")
    arr = np.asarray(values, dtype=np.float64)
    edges = np.unique(np.quantile(arr, np.linspace(0.0, 1.0, bins + 1)))
    if len(edges) < 2:
        # all values identical: one bin covering everything
        edges = np.array([edges[0], edges[0]])
    inner = edges[1:-1]
    assignment = np.searchsorted(inner, arr, side="right")
    n_bins = len(edges) - 1
    probs: list[float] = []
    for b in range(n_bins):
        in_cell = assignment == b
        n = int(in_cell.sum())
        if n == 0:
            probs.append(float("nan"))
            flagged.append((covariate, b, "empty"))
            continue
        pi = float(treated[in_cell].mean())
        probs.append(pi)
        if n < 2:
            flagged.append((covariate, b, "sparse"))
        if pi in (0.0, 1.0):
            flagged.append((covariate, b, "positivity"))
    return PropensityTable(
        categorical={},
        binned={covariate: (tuple(float(e) for e in edges), tuple(probs))},
        flagged=tuple(flagged),
    )


@dataclass(frozen=True)
class SimulatedOutcome:
    """Realized outcome with its noiseless potential-outcome means and effect."""

    y: float
    y0: float
    y1: float
    ite: float


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _confound(doc: Document, p: SimulationParams, pt: PropensityTable) -> float:
    pi_sect = pt.lookup("sector", doc.meta["sector"])
    pi_size = pt.lookup("size", doc.meta["size"])
    return p.beta1 * (pi_sect - p.gamma0) + p.beta2 * (pi_size - p.gamma1)


def _require_treatment(doc: Document) -> int:
    if doc.treatment is None:
        raise ValueError(f"document {doc.id!r} has no treatment assignment")
    return doc.treatment


def simulate_volatility(
    doc: Document, p: SimulationParams, pt: PropensityTable, rng: np.random.Generator
) -> SimulatedOutcome:
    """Real-valued outcome alpha*T + confound + Gaussian noise; ite = alpha exactly."""
    if p.outcome_kind != "volatility":
        raise ValueError("params are not configured for the volatility outcome")
    t = _require_treatment(doc)
    c = _confound(doc, p, pt)
    eps = rng.normal(0.0, p.noise_scale)
    return SimulatedOutcome(
        y=p.alpha * t + c + eps,
        y0=c,
        y1=p.alpha + c,
        ite=p.alpha,
    )


def simulate_movement(
    doc: Document, p: SimulationParams, pt: PropensityTable, rng: np.random.Generator
) -> SimulatedOutcome:
    """Binary outcome Bernoulli(sigmoid(alpha*T + confound + noise)).

    The noise draw is shared across both potential outcomes; the ground-truth
    ite is the noiseless sigmoid difference.
    """
    if p.outcome_kind != "movement":
        raise ValueError("params are not configured for the movement outcome")
    t = _require_treatment(doc)
    c = _confound(doc, p, pt)
    eps = rng.normal(0.0, p.noise_scale)
    y1_mean = _sigmoid(c + p.alpha)
    y0_mean = _sigmoid(c)
    prob = _sigmoid(p.alpha * t + c + eps)
    y = float(rng.random() < prob)
    return SimulatedOutcome(y=y, y0=y0_mean, y1=y1_mean, ite=y1_mean - y0_mean)


def simulate_dataset(
    ds: Dataset,
    params: SimulationParams,
    seed: int,
    *,
    covariates: Sequence[str] = ("sector", "size"),
    bins: int = 4,
    table: PropensityTable | None = None,
) -> tuple[Dataset, PropensityTable]:
    """Simulate outcomes for every document; returns (dataset, propensity table).

    Each document gets its own rng stream keyed by (seed, position), so the
    simulation is order-independent and bit-reproducible.
    """
    if table is None:
        table = PropensityTable(categorical={}, binned={})
        for cov in covariates:
            table = table.merged(estimate_propensity(ds, cov, bins=bins))
    simulate_one = (
        simulate_volatility if params.outcome_kind == "volatility" else simulate_movement
    )
    docs = []
    for i, doc in enumerate(ds.documents):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, i)))
        out = simulate_one(doc, params, table, rng)
        docs.append(replace(doc, outcome=out.y, y0=out.y0, y1=out.y1, ite=out.ite))
    return replace(ds, documents=tuple(docs)), table


def true_ate(ds: Dataset, split: str | None = None) -> float:
    """Mean ground-truth ite over a split (or the whole corpus)."""
    docs = ds.split_docs(split) if split is not None else ds.documents
    if not docs:
        raise ValueError("no documents to average")
    ites = []
    for d in docs:
        if d.ite is None:
            raise ValueError(f"document {d.id!r} has no simulated ite")
        ites.append(d.ite)
    return float(np.mean(np.asarray(ites, dtype=np.float64)))
