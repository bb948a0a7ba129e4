"""Outcome simulation: propensity tables, potential outcomes, ground-truth effects."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diva import (
    Dataset,
    Document,
    PropensityTable,
    SimulationParams,
    Vocabulary,
    estimate_propensity,
    simulate_dataset,
    simulate_movement,
    simulate_volatility,
    true_ate,
)
from helpers import make_corpus


def doc(i, sector="tech", size=1.0, treatment=1):
    return Document(
        id=f"d{i}",
        tokens=(3, 4),
        score=0.0,
        meta={"sector": sector, "size": size},
        treatment=treatment,
    )


def balanced_table():
    return PropensityTable(
        categorical={"sector": {"tech": 0.5}, "size": {1.0: 0.5}},
        binned={},
    )


def rng():
    return np.random.default_rng(0)


class TestSimulationParams:
    def test_kind_aliases(self):
        assert SimulationParams(outcome_kind="vol").outcome_kind == "volatility"
        assert SimulationParams(outcome_kind="mov").outcome_kind == "movement"

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            SimulationParams(outcome_kind="price")

    def test_negative_noise(self):
        with pytest.raises(ValueError):
            SimulationParams(noise_scale=-1.0)

    def test_from_caption_ties_coefficients(self):
        p = SimulationParams.from_caption(2.0, 0.7, 0.4, 0.1, "vol")
        assert (p.beta1, p.beta2) == (0.7, 0.7)
        assert (p.gamma0, p.gamma1) == (0.4, 0.4)


class TestEstimatePropensity:
    def make(self, rows):
        docs = tuple(doc(i, sector=s, size=z, treatment=t) for i, (s, z, t) in enumerate(rows))
        return Dataset(documents=docs, vocabulary=Vocabulary.synthetic(4))

    def test_categorical_oracle(self):
        ds = self.make(
            [("a", 1.0, 1), ("a", 1.0, 1), ("a", 1.0, 0), ("b", 1.0, 1)]
        )
        table = estimate_propensity(ds, "sector")
        assert table.lookup("sector", "a") == pytest.approx(2 / 3)
        assert table.lookup("sector", "b") == 1.0
        assert ("sector", "b", "sparse") in table.flagged
        assert ("sector", "b", "positivity") in table.flagged

    def test_binned_oracle(self):
        # sizes 1..4 with bins=2: lower half treated, upper half not
        ds = self.make(
            [("a", 1.0, 1), ("a", 2.0, 1), ("a", 3.0, 0), ("a", 4.0, 0)]
        )
        table = estimate_propensity(ds, "size", bins=2)
        assert table.lookup("size", 1.5) == 1.0
        assert table.lookup("size", 3.5) == 0.0
        # out-of-range values clamp to the outermost bins
        assert table.lookup("size", -10.0) == 1.0
        assert table.lookup("size", 99.0) == 0.0

    def test_identical_numeric_values(self):
        ds = self.make([("a", 2.0, 1), ("a", 2.0, 0)])
        table = estimate_propensity(ds, "size", bins=3)
        assert table.lookup("size", 2.0) == 0.5

    def test_lookup_errors(self):
        table = balanced_table()
        with pytest.raises(KeyError):
            table.lookup("sector", "unseen")
        with pytest.raises(KeyError):
            table.lookup("industry", "tech")

    def test_requires_assignment_and_known_covariate(self):
        ds = self.make([("a", 1.0, 1)])
        with pytest.raises(ValueError):
            estimate_propensity(ds, "country")
        docs = (doc(0, treatment=None),)
        ds2 = Dataset(documents=docs, vocabulary=Vocabulary.synthetic(4))
        with pytest.raises(ValueError):
            estimate_propensity(ds2, "sector")

    def test_merged_tables(self):
        ds = self.make([("a", 1.0, 1), ("b", 4.0, 0)])
        merged = estimate_propensity(ds, "sector").merged(
            estimate_propensity(ds, "size", bins=2)
        )
        assert merged.lookup("sector", "a") == 1.0
        assert merged.lookup("size", 1.0) == 1.0


class TestVolatilityOutcome:
    def test_noiseless_oracle(self):
        p = SimulationParams.from_caption(2.0, 1.0, 0.5, 0.0, "vol")
        table = PropensityTable(
            categorical={"sector": {"tech": 0.9}, "size": {1.0: 0.7}}, binned={}
        )
        out = simulate_volatility(doc(0, treatment=1), p, table, rng())
        c = 1.0 * (0.9 - 0.5) + 1.0 * (0.7 - 0.5)
        assert out.ite == 2.0  # exact by construction
        assert out.y == pytest.approx(2.0 + c, abs=1e-15)
        assert out.y1 - out.y0 == pytest.approx(2.0, abs=1e-15)

    def test_control_arm_gets_no_alpha(self):
        p = SimulationParams.from_caption(2.0, 1.0, 0.5, 0.0, "vol")
        out = simulate_volatility(doc(0, treatment=0), p, balanced_table(), rng())
        assert out.y == pytest.approx(out.y0, abs=1e-15)

    def test_kind_guard_and_missing_treatment(self):
        p_mov = SimulationParams.from_caption(1.0, 1.0, 0.5, 0.0, "mov")
        with pytest.raises(ValueError):
            simulate_volatility(doc(0), p_mov, balanced_table(), rng())
        p_vol = SimulationParams.from_caption(1.0, 1.0, 0.5, 0.0, "vol")
        with pytest.raises(ValueError):
            simulate_volatility(doc(0, treatment=None), p_vol, balanced_table(), rng())

    @given(st.floats(-3, 3), st.floats(0, 2), st.integers(0, 1))
    @settings(max_examples=40, deadline=None)
    def test_ite_always_alpha(self, alpha, noise, t):
        p = SimulationParams.from_caption(alpha, 1.0, 0.5, noise, "vol")
        out = simulate_volatility(doc(0, treatment=t), p, balanced_table(), rng())
        assert out.ite == alpha
        assert out.y1 - out.y0 == pytest.approx(alpha, abs=1e-12)


class TestMovementOutcome:
    def test_sigmoid_oracle(self):
        # balanced table makes the confound zero: ite = sigmoid(1) - sigmoid(0)
        p = SimulationParams.from_caption(1.0, 1.0, 0.5, 0.0, "mov")
        out = simulate_movement(doc(0, treatment=1), p, balanced_table(), rng())
        assert out.ite == pytest.approx(0.2310585786300049, abs=1e-12)
        assert out.y in (0.0, 1.0)
        assert out.y0 == pytest.approx(0.5, abs=1e-15)

    def test_kind_guard(self):
        p_vol = SimulationParams.from_caption(1.0, 1.0, 0.5, 0.0, "vol")
        with pytest.raises(ValueError):
            simulate_movement(doc(0), p_vol, balanced_table(), rng())

    @given(st.floats(-3, 3), st.floats(-2, 2))
    @settings(max_examples=40, deadline=None)
    def test_ite_matches_sigmoid_difference(self, alpha, pi_shift):
        pi = 1.0 / (1.0 + math.exp(-pi_shift))
        table = PropensityTable(
            categorical={"sector": {"tech": pi}, "size": {1.0: 0.5}}, binned={}
        )
        p = SimulationParams.from_caption(alpha, 1.0, 0.5, 0.0, "mov")
        out = simulate_movement(doc(0, treatment=0), p, table, rng())
        c = pi - 0.5
        expected = 1 / (1 + math.exp(-(c + alpha))) - 1 / (1 + math.exp(-c))
        assert out.ite == pytest.approx(expected, abs=1e-12)
        assert -1.0 < out.ite < 1.0


class TestSimulateDataset:
    def test_deterministic_and_seed_sensitive(self):
        ds = make_corpus(seed=0)
        p = SimulationParams.from_caption(1.0, 1.0, 0.5, 1.0, "vol")
        a, _ = simulate_dataset(ds, p, seed=5)
        b, _ = simulate_dataset(ds, p, seed=5)
        c, _ = simulate_dataset(ds, p, seed=6)
        assert [d.outcome for d in a.documents] == [d.outcome for d in b.documents]
        assert [d.outcome for d in a.documents] != [d.outcome for d in c.documents]

    def test_prefix_streams_are_stable(self):
        # each document's draw is keyed by (seed, position), so truncating the
        # corpus does not change the outcomes of the remaining documents
        ds = make_corpus(seed=0)
        p = SimulationParams.from_caption(1.0, 1.0, 0.5, 1.0, "vol")
        full, table = simulate_dataset(ds, p, seed=5)
        prefix = dataclasses.replace(ds, documents=ds.documents[:10], splits={})
        part, _ = simulate_dataset(prefix, p, seed=5, table=table)
        assert [d.outcome for d in part.documents] == [
            d.outcome for d in full.documents[:10]
        ]

    def test_volatility_true_ate_is_alpha(self):
        ds = make_corpus(seed=0)
        p = SimulationParams.from_caption(1.5, 1.0, 0.5, 1.0, "vol")
        sim, _ = simulate_dataset(ds, p, seed=0)
        assert true_ate(sim) == pytest.approx(1.5, abs=1e-12)
        assert true_ate(sim, "test") == pytest.approx(1.5, abs=1e-12)

    def test_movement_true_ate_bounded(self):
        ds = make_corpus(seed=0)
        p = SimulationParams.from_caption(1.0, 1.0, 0.5, 1.0, "mov")
        sim, _ = simulate_dataset(ds, p, seed=0)
        assert 0.0 < true_ate(sim) < 0.3
        for d in sim.documents:
            assert d.outcome in (0.0, 1.0)

    def test_reuses_supplied_table(self):
        ds = make_corpus(seed=0)
        p = SimulationParams.from_caption(1.0, 1.0, 0.5, 0.0, "vol")
        _, fitted = simulate_dataset(ds, p, seed=0)
        again, table = simulate_dataset(ds, p, seed=0, table=fitted)
        assert table is fitted

    def test_true_ate_requires_simulation(self):
        ds = make_corpus(seed=0)
        with pytest.raises(ValueError):
            true_ate(ds)
