"""Causal error metrics and price-series outcome construction.

Effect metrics follow the usual definitions:

    pehe_sqrt = sqrt(mean((tau_i - tau_hat_i)^2))
    ate_error = |tau - mean(tau_hat)|

Financial labels come from a daily price series P_t:

    return      r_t = P_t / P_{t-1} - 1
    volatility  v_t = ln(sqrt(sum_{i=0}^{mu} (r_{t-i} - rbar)^2 / mu))
    movement    m_t = 1 iff r_t >= mean of v over [t-mu, t]

The volatility sum runs over mu+1 return terms with divisor mu (a Bessel-like
correction, kept exactly as formulated); ``convention="window"`` switches to
the plain mu-term window.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

VOLATILITY_CONVENTIONS = ("bessel", "window")


def pehe_sqrt(tau_true: Sequence[float], tau_hat: Sequence[float]) -> float:
    """Root mean squared error between true and estimated per-example effects."""
    a = np.asarray(tau_true, dtype=np.float64)
    b = np.asarray(tau_hat, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("tau_true and tau_hat must be 1-D and the same length")
    if a.size == 0:
        raise ValueError("need at least one effect")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def ate_error(tau_true_mean: float, tau_hat: Sequence[float]) -> float:
    """Absolute deviation of the mean estimated effect from the true mean effect."""
    b = np.asarray(tau_hat, dtype=np.float64)
    if b.size == 0:
        raise ValueError("need at least one effect")
    return float(abs(tau_true_mean - np.mean(b)))


def config_hash(config: Mapping[str, Any]) -> str:
    """Short stable hash of a JSON-serializable configuration mapping."""
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class MetricReport:
    pehe_sqrt: float
    ate_error: float
    n: int
    config_hash: str

    def __post_init__(self):
        if self.pehe_sqrt < 0 or self.ate_error < 0:
            raise ValueError("metric values must be nonnegative")
        if self.n < 1:
            raise ValueError("n must be positive")


@dataclass(frozen=True)
class PriceSeries:
    """Dividend-adjusted daily closes, ordered by strictly increasing date."""

    dates: tuple[dt.date, ...]
    prices: tuple[float, ...]

    def __post_init__(self):
        if len(self.dates) != len(self.prices):
            raise ValueError("dates and prices lengths differ")
        if len(self.dates) == 0:
            raise ValueError("empty price series")
        for a, b in zip(self.dates, self.dates[1:]):
            if not a < b:
                raise ValueError(f"dates must be strictly increasing at {b}")
        if any(p <= 0 for p in self.prices):
            raise ValueError("prices must be positive")

    def __len__(self) -> int:
        return len(self.prices)

    def index_of(self, date: dt.date) -> int:
        try:
            return self.dates.index(date)
        except ValueError:
            raise KeyError(f"date {date} not in series") from None


def load_prices(path: str | Path) -> PriceSeries:
    """Read a price CSV with header columns date (ISO-8601) and adj_close."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"date", "adj_close"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header with 'date' and 'adj_close'")
        dates: list[dt.date] = []
        prices: list[float] = []
        for row in reader:
            dates.append(dt.date.fromisoformat(row["date"].strip()))
            prices.append(float(row["adj_close"]))
    return PriceSeries(dates=tuple(dates), prices=tuple(prices))


def stock_return(ps: PriceSeries, t: int) -> float:
    """r_t = P_t / P_{t-1} - 1."""
    if t < 1:
        raise ValueError("returns need a previous price; t must be >= 1")
    if t >= len(ps):
        raise ValueError(f"index {t} out of range for series of length {len(ps)}")
    return ps.prices[t] / ps.prices[t - 1] - 1.0


def stock_volatility(
    ps: PriceSeries,
    t: int,
    window: int,
    *,
    convention: str = "bessel",
    floor: float | None = None,
) -> float:
    """Log volatility over the trailing return window ending at t.

    ``convention="bessel"`` (the formulation as written) averages the window+1
    squared deviations of r_{t-window}..r_t with divisor window;
    ``convention="window"`` uses the window most recent returns with divisor
    window. A zero-variance window raises unless ``floor`` (e.g. 1e-12) is
    supplied as a lower bound inside the log.
    """
    if convention not in VOLATILITY_CONVENTIONS:
        raise ValueError(f"convention must be one of {VOLATILITY_CONVENTIONS}")
    if window < 2:
        raise ValueError("window must be at least 2")
    first = t - window if convention == "bessel" else t - window + 1
    if first < 1:
        raise ValueError(
            f"insufficient history: volatility at t={t} needs returns back to index {first}"
        )
    rets = np.array([stock_return(ps, s) for s in range(first, t + 1)], dtype=np.float64)
    mean_sq = float(np.sum((rets - rets.mean()) ** 2)) / window
    if mean_sq <= 0.0:
        if floor is None:
            raise ValueError("degenerate volatility (-inf): all returns in window identical")
        mean_sq = floor
    elif floor is not None:
        mean_sq = max(mean_sq, floor)
    return math.log(math.sqrt(mean_sq))


def stock_movement(
    ps: PriceSeries,
    t: int,
    window: int,
    *,
    convention: str = "bessel",
    floor: float | None = None,
) -> int:
    """1 iff r_t >= the mean volatility over [t-window, t] (inclusive comparison)."""
    r_t = stock_return(ps, t)
    vols = [
        stock_volatility(ps, s, window, convention=convention, floor=floor)
        for s in range(t - window, t + 1)
    ]
    v_bar = float(np.mean(vols))
    return 1 if r_t >= v_bar else 0
