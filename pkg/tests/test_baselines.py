"""Reference estimators: difference in means and the two-head regressor."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest
import torch

from diva.baselines import TarnetConfig, naive_ate, tarnet_fit_predict
from diva.estimator import EffectEstimate
from helpers import make_simulated


@pytest.fixture(scope="module")
def sim():
    return make_simulated(seed=2)


def test_naive_ate_is_group_mean_difference(sim):
    docs = sim.split_docs("test")
    treated = [d.outcome for d in docs if d.treatment == 1]
    control = [d.outcome for d in docs if d.treatment == 0]
    expected = float(np.mean(treated) - np.mean(control))
    assert naive_ate(sim, "test") == pytest.approx(expected, abs=1e-12)


def test_naive_ate_requires_both_groups(sim):
    treated_only = tuple(
        i for i in sim.split_indices("test") if sim.documents[i].treatment == 1
    )
    broken = dataclasses.replace(sim, splits={**sim.splits, "test": treated_only})
    with pytest.raises(ValueError, match="both treatment groups"):
        naive_ate(broken, "test")


def test_naive_ate_requires_labels():
    from helpers import make_corpus

    ds = make_corpus(seed=3)  # outcomes never simulated
    with pytest.raises(ValueError, match="lacks treatment or outcome"):
        naive_ate(ds, "test")


def test_tarnet_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        TarnetConfig(epochs=-1)
    with pytest.raises(ValueError, match="outcome_kind"):
        TarnetConfig(outcome_kind="count")


def _tiny_tarnet_config(**overrides):
    base = dict(
        epochs=1, batch_size=16, dim=8, depth=1, n_heads=2,
        rep_dim=8, max_len=16, seed=0,
    )
    base.update(overrides)
    return TarnetConfig(**base)


def test_tarnet_returns_effect_estimate(sim):
    est = tarnet_fit_predict(sim, _tiny_tarnet_config(), split="test")
    assert isinstance(est, EffectEstimate)
    assert est.model_id == "tarnet"
    assert est.split == "test"
    assert est.ids == tuple(d.id for d in sim.split_docs("test"))
    assert est.ate_hat == pytest.approx(float(np.mean(est.ite_hat)), abs=1e-12)


def test_tarnet_is_deterministic(sim):
    a = tarnet_fit_predict(sim, _tiny_tarnet_config(), split="dev")
    b = tarnet_fit_predict(sim, _tiny_tarnet_config(), split="dev")
    assert a == b


def test_tarnet_seed_changes_result(sim):
    a = tarnet_fit_predict(sim, _tiny_tarnet_config(), split="dev")
    b = tarnet_fit_predict(sim, _tiny_tarnet_config(seed=1), split="dev")
    assert a.ite_hat != b.ite_hat


def test_tarnet_binary_effects_are_probability_differences():
    simb = make_simulated(seed=4, outcome_kind="mov")
    est = tarnet_fit_predict(
        simb, _tiny_tarnet_config(outcome_kind="binary"), split="test"
    )
    assert all(-1.0 <= v <= 1.0 for v in est.ite_hat)


def test_tarnet_requires_labels():
    from helpers import make_corpus

    ds = make_corpus(seed=5)
    with pytest.raises(ValueError, match="lacks treatment or outcome"):
        tarnet_fit_predict(ds, _tiny_tarnet_config())


def test_tarnet_zero_epochs_keeps_zero_heads(sim):
    # heads start at zero, so an untrained model estimates exactly no effect
    est = tarnet_fit_predict(sim, _tiny_tarnet_config(epochs=0), split="test")
    assert est.ate_hat == 0.0
    assert all(v == 0.0 for v in est.ite_hat)
