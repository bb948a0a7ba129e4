"""End-to-end experiment runner: config handling, artifacts, reports."""

from __future__ import annotations

import datetime as dt
import json
import math

import numpy as np
import pytest

from diva.runner import _load_config, _mean_mad, _fmt_agg, _stage_seed, run_experiment


TINY_TRAIN = {
    "profile": "desk",
    "epochs": 1,
    "batch_size": 16,
    "dim": 8,
    "n_heads": 2,
    "max_len": 16,
    "latent_dim": 4,
    "mlm_weight": 0.1,
}


def _sim_config(seeds=(0,), name="tiny"):
    return {
        "name": name,
        "seeds": list(seeds),
        "outcome": "vol",
        "corpus": {
            "kind": "synthetic",
            "spec": {"n_docs": 60, "vocab_size": 24, "doc_length": 12},
        },
        "treatment": {"k_top": 20, "k_bottom": 20},
        "simulate": {"alpha": 1.0, "beta": 1.0, "gamma": 0.5, "noise": 0.5},
        "train": dict(TINY_TRAIN),
    }


# ---------------------------------------------------------- config checks


def test_load_config_requires_core_keys():
    with pytest.raises(ValueError, match="missing 'corpus'"):
        _load_config({"outcome": "vol", "treatment": {}, "simulate": {}})


def test_load_config_requires_exactly_one_outcome_source():
    base = {
        "outcome": "vol",
        "corpus": {"kind": "synthetic"},
        "treatment": {"k_top": 1, "k_bottom": 1},
    }
    with pytest.raises(ValueError, match="exactly one"):
        _load_config(base)
    with pytest.raises(ValueError, match="exactly one"):
        _load_config({**base, "simulate": {}, "prices": {}})


def test_load_config_fills_defaults():
    cfg = _load_config(
        {
            "outcome": "movement",
            "corpus": {"kind": "synthetic"},
            "treatment": {"k_top": 1, "k_bottom": 1},
            "simulate": {},
        }
    )
    assert cfg["name"] == "run"
    assert cfg["seeds"] == [0]
    assert cfg["split"] == {"ratio": [8, 1, 6]}


def test_load_config_rejects_unknown_outcome():
    with pytest.raises(ValueError, match="unknown outcome"):
        _load_config(
            {
                "outcome": "returns",
                "corpus": {"kind": "synthetic"},
                "treatment": {},
                "simulate": {},
            }
        )


def test_stage_seeds_are_stable_and_distinct():
    assert _stage_seed(3, "train") == _stage_seed(3, "train")
    stages = ("corpus", "split", "simulate", "train")
    values = {_stage_seed(3, s) for s in stages}
    assert len(values) == len(stages)


def test_mean_mad_oracle():
    mean, mad = _mean_mad([1.0, 3.0])
    assert (mean, mad) == (2.0, 1.0)
    assert _fmt_agg([5.0]) == "5.000000"
    assert _fmt_agg([1.0, 3.0]) == "2.000000 ± 1.000000"


# ----------------------------------------------------- simulate-mode runs


@pytest.fixture(scope="module")
def sim_run(tmp_path_factory):
    outdir = tmp_path_factory.mktemp("run")
    result = run_experiment(_sim_config(), outdir)
    return result


def test_run_writes_all_artifacts(sim_run):
    outdir = sim_run.outdir
    for name in (
        "config.json",
        "checkpoint.bin",
        "effects.jsonl",
        "report.md",
        "metrics.json",
        "manifest.json",
    ):
        assert (outdir / name).exists(), name
    assert (outdir / "plots" / "effect_by_sector.png").exists()


def test_run_manifest_records_stages(sim_run):
    manifest = json.loads((sim_run.outdir / "manifest.json").read_text())
    assert "failed_stage" not in manifest
    assert manifest["stages"][-1] == "report"
    assert any(s.startswith("train") for s in manifest["stages"])


def test_run_rows_carry_ground_truth_metrics(sim_run):
    (row,) = sim_run.rows
    for key in ("true_ate", "pehe_sqrt", "ate_error", "naive_ate", "naive_ate_error"):
        assert key in row and math.isfinite(row[key])
    assert sim_run.metric_report is not None
    assert sim_run.metric_report.ate_error == pytest.approx(row["ate_error"])


def test_run_report_contains_tables(sim_run):
    text = sim_run.report_path.read_text()
    assert "| diva |" in text
    assert "| naive diff-in-means |" in text
    assert "# Run report: tiny" in text


def test_single_seed_report_omits_spread(sim_run):
    text = sim_run.report_path.read_text()
    assert "±" not in text


def test_multi_seed_run_aggregates(tmp_path):
    result = run_experiment(_sim_config(seeds=(0, 1), name="double"), tmp_path / "d")
    assert len(result.rows) == 2
    text = result.report_path.read_text()
    assert "±" in text
    assert (result.outdir / "seeds" / "seed_0_h0" / "effects.jsonl").exists()
    assert (result.outdir / "seeds" / "seed_1_h0" / "checkpoint.bin").exists()


def test_rerun_reproduces_reports(tmp_path):
    a = run_experiment(_sim_config(), tmp_path / "a")
    b = run_experiment(_sim_config(), tmp_path / "b")
    assert a.report_path.read_bytes() == b.report_path.read_bytes()
    assert (a.outdir / "metrics.json").read_bytes() == (b.outdir / "metrics.json").read_bytes()
    assert (a.outdir / "effects.jsonl").read_bytes() == (b.outdir / "effects.jsonl").read_bytes()


def test_failed_stage_lands_in_manifest(tmp_path):
    cfg = _sim_config()
    cfg["corpus"] = {"kind": "jsonl", "path": str(tmp_path / "missing.jsonl")}
    with pytest.raises(Exception):
        run_experiment(cfg, tmp_path / "fail")
    manifest = json.loads((tmp_path / "fail" / "manifest.json").read_text())
    assert manifest["failed_stage"] == "corpus"
    assert "error" in manifest


# ------------------------------------------------------ prices-mode runs


def _write_prices(path, n=16, start=100.0):
    lines = ["date,adj_close"]
    day0 = dt.date(2020, 1, 1)
    rng = np.random.default_rng(7)
    price = start
    for i in range(n):
        lines.append(f"{(day0 + dt.timedelta(days=i)).isoformat()},{price:.4f}")
        price *= float(np.exp(rng.normal(0.001, 0.02)))
    path.write_text("\n".join(lines) + "\n")


def _write_corpus(path, n=30):
    day0 = dt.date(2020, 1, 2)
    rng = np.random.default_rng(3)
    with path.open("w") as fh:
        for i in range(n):
            words = " ".join(rng.choice(["alpha", "beta", "gamma", "delta", "eps"], size=8))
            rec = {
                "id": f"doc{i:03d}",
                "text": words,
                "score": float(rng.uniform()),
                "meta": {
                    "date": (day0 + dt.timedelta(days=i % 8)).isoformat(),
                    "sector": "tech" if i % 2 else "energy",
                    "size": 2.5,
                },
            }
            fh.write(json.dumps(rec) + "\n")


def test_prices_mode_runs_over_horizons(tmp_path):
    prices = tmp_path / "prices.csv"
    corpus = tmp_path / "corpus.jsonl"
    _write_prices(prices)
    _write_corpus(corpus)
    cfg = {
        "name": "prices",
        "seeds": [0],
        "outcome": "volatility",
        "corpus": {"kind": "jsonl", "path": str(corpus), "vocab_size": 50},
        "treatment": {"k_top": 10, "k_bottom": 10},
        "prices": {"path": str(prices), "horizons": [2, 3]},
        "train": dict(TINY_TRAIN),
    }
    result = run_experiment(cfg, tmp_path / "out")
    assert len(result.rows) == 2  # one per horizon
    assert result.metric_report is None  # no ground truth without simulation
    text = result.report_path.read_text()
    assert "Estimated ATE by horizon" in text
    assert (result.outdir / "plots" / "effect_by_horizon.png").exists()
    metrics = json.loads((result.outdir / "metrics.json").read_text())
    assert set(metrics["horizon_ates"]) == {"2", "3"}


def test_prices_mode_requires_dates(tmp_path):
    prices = tmp_path / "prices.csv"
    corpus = tmp_path / "corpus.jsonl"
    _write_prices(prices)
    day0 = dt.date(2020, 1, 2)
    with corpus.open("w") as fh:
        for i in range(12):
            rec = {
                "id": f"doc{i:03d}",
                "text": "alpha beta gamma delta",
                "score": float(i) / 12,
                "meta": {"sector": "tech", "size": 1.0},  # no date
            }
            fh.write(json.dumps(rec) + "\n")
    cfg = {
        "outcome": "vol",
        "corpus": {"kind": "jsonl", "path": str(corpus)},
        "treatment": {"k_top": 4, "k_bottom": 4},
        "prices": {"path": str(prices), "horizons": [2]},
        "train": dict(TINY_TRAIN),
    }
    with pytest.raises(ValueError, match="meta.date"):
        run_experiment(cfg, tmp_path / "out2")
    manifest = json.loads((tmp_path / "out2" / "manifest.json").read_text())
    assert manifest["failed_stage"] == "label"
