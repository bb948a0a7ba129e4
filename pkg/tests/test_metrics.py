"""Effect metrics, config hashing, and price-series outcome oracles."""

import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diva import (
    MetricReport,
    PriceSeries,
    ate_error,
    config_hash,
    load_prices,
    pehe_sqrt,
    stock_movement,
    stock_return,
    stock_volatility,
)


def series(*prices):
    start = dt.date(2024, 1, 1)
    return PriceSeries(
        dates=tuple(start + dt.timedelta(days=i) for i in range(len(prices))),
        prices=tuple(float(p) for p in prices),
    )


class TestEffectMetrics:
    def test_pehe_unit_oracle(self):
        # errors (1, -1): sqrt((1 + 1) / 2) = 1 exactly
        assert pehe_sqrt([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-12)

    def test_pehe_zero_on_perfect(self):
        assert pehe_sqrt([2.0, 2.0], [2.0, 2.0]) == 0.0

    def test_ate_error_oracle(self):
        # |1 - mean([0, 0.5])| = 0.75
        assert ate_error(1.0, [0.0, 0.5]) == pytest.approx(0.75, abs=1e-12)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            pehe_sqrt([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            pehe_sqrt([], [])
        with pytest.raises(ValueError):
            ate_error(0.0, [])

    @given(
        st.lists(st.floats(-100, 100), min_size=1, max_size=40),
        st.floats(-50, 50),
    )
    @settings(max_examples=40, deadline=None)
    def test_pehe_dominates_ate_error(self, tau, shift):
        tau = np.asarray(tau)
        hat = tau + shift
        # RMS of per-example errors is at least the absolute mean error.
        assert pehe_sqrt(tau, hat) >= ate_error(float(tau.mean()), hat) - 1e-9

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.floats(-50, 50))
    @settings(max_examples=40, deadline=None)
    def test_pehe_shift_invariant(self, tau, shift):
        tau = np.asarray(tau)
        hat = tau * 0.5
        assert pehe_sqrt(tau + shift, hat + shift) == pytest.approx(
            pehe_sqrt(tau, hat), rel=1e-9, abs=1e-9
        )


class TestConfigHash:
    def test_frozen_value(self):
        assert config_hash({"alpha": 1.0, "name": "demo", "seeds": [0, 1]}) == "6f42f306d064"

    def test_key_order_invariant(self):
        a = config_hash({"alpha": 1.0, "name": "demo", "seeds": [0, 1]})
        b = config_hash({"seeds": [0, 1], "name": "demo", "alpha": 1.0})
        assert a == b

    def test_value_sensitivity(self):
        a = config_hash({"alpha": 1.0})
        b = config_hash({"alpha": 1.5})
        assert a != b
        assert len(a) == 12 and all(c in "0123456789abcdef" for c in a)

    def test_report_validation(self):
        MetricReport(pehe_sqrt=0.1, ate_error=0.0, n=3, config_hash="ab")
        with pytest.raises(ValueError):
            MetricReport(pehe_sqrt=-0.1, ate_error=0.0, n=3, config_hash="ab")
        with pytest.raises(ValueError):
            MetricReport(pehe_sqrt=0.1, ate_error=0.0, n=0, config_hash="ab")


class TestPriceSeries:
    def test_requires_increasing_dates(self):
        d = dt.date(2024, 1, 2)
        with pytest.raises(ValueError):
            PriceSeries(dates=(d, d), prices=(1.0, 2.0))

    def test_requires_positive_prices(self):
        with pytest.raises(ValueError):
            series(100.0, 0.0)

    def test_index_of(self):
        ps = series(100, 101)
        assert ps.index_of(dt.date(2024, 1, 2)) == 1
        with pytest.raises(KeyError):
            ps.index_of(dt.date(2030, 1, 1))

    def test_load_prices_roundtrip(self, tmp_path):
        csv_path = tmp_path / "prices.csv"
        csv_path.write_text(
            "date,adj_close,extra\n2024-01-01,100.0,x\n2024-01-02,110.0,y\n"
        )
        ps = load_prices(csv_path)
        assert len(ps) == 2
        assert ps.prices == (100.0, 110.0)

    def test_load_prices_missing_column(self, tmp_path):
        csv_path = tmp_path / "bad.csv"
        csv_path.write_text("date,close\n2024-01-01,1.0\n")
        with pytest.raises(ValueError):
            load_prices(csv_path)


class TestReturnAndVolatility:
    def test_return_oracle(self):
        assert stock_return(series(100, 110), 1) == pytest.approx(0.1, abs=1e-12)

    def test_return_bounds(self):
        ps = series(100, 110)
        with pytest.raises(ValueError):
            stock_return(ps, 0)
        with pytest.raises(ValueError):
            stock_return(ps, 2)

    def test_volatility_bessel_oracle(self):
        # returns (0.1, -0.1, 0.1); mean 1/30; squared deviations sum to 2/75;
        # divisor 2 gives variance 1/75, so log sqrt = 0.5 * ln(1/75).
        ps = series(100.0, 110.0, 99.0, 108.9)
        assert stock_volatility(ps, 3, 2) == pytest.approx(-2.158744056768155, abs=1e-9)

    def test_volatility_window_oracle(self):
        # returns (-0.1, 0.1): mean 0, sum of squares 0.02, divisor 2 -> 0.01;
        # log sqrt(0.01) = ln(0.1).
        ps = series(100.0, 110.0, 99.0, 108.9)
        assert stock_volatility(ps, 3, 2, convention="window") == pytest.approx(
            -2.3025850929940455, abs=1e-9
        )

    def test_degenerate_raises_then_floors(self):
        ps = series(100.0, 100.0, 100.0, 100.0)  # constant price, zero returns
        with pytest.raises(ValueError):
            stock_volatility(ps, 3, 2)
        assert stock_volatility(ps, 3, 2, floor=1e-6) == pytest.approx(
            -6.907755278982137, abs=1e-12
        )

    def test_insufficient_history(self):
        ps = series(100.0, 110.0, 99.0, 108.9)
        with pytest.raises(ValueError):
            stock_volatility(ps, 2, 2)  # needs a return at index 0
        with pytest.raises(ValueError):
            stock_volatility(ps, 3, 1)  # window must be >= 2

    @given(st.floats(0.1, 10.0))
    @settings(max_examples=25, deadline=None)
    def test_volatility_scale_invariant(self, k):
        base = [100.0, 104.0, 97.0, 101.0, 99.0]
        a = stock_volatility(series(*base), 4, 2)
        b = stock_volatility(series(*(k * p for p in base)), 4, 2)
        assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


class TestMovement:
    # Wild swings push log-volatility near +1, so a small final return
    # lands below the volatility mean while a 4x jump stays above it.
    PRICES = (100.0, 300.0, 60.0, 300.0, 60.0, 300.0, 301.0)

    def test_up_label(self):
        assert stock_movement(series(*self.PRICES), 5, 2) == 1

    def test_down_label(self):
        assert stock_movement(series(*self.PRICES), 6, 2) == 0

    def test_movement_needs_deep_history(self):
        # movement at t needs volatilities back to t - window, each needing
        # returns another window deeper, so t >= 2 * window + 1.
        with pytest.raises(ValueError):
            stock_movement(series(*self.PRICES), 4, 2)
