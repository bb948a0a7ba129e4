"""End-to-end experiments: corpus -> outcomes -> train -> estimate -> report.

A run is described by a JSON config:

    {
      "name": "confounded-vol",
      "seeds": [0, 1, 2, 3, 4],
      "outcome": "volatility",
      "corpus": {"kind": "synthetic", "spec": {...}}
                | {"kind": "jsonl", "path": "corpus.jsonl"},
      "treatment": {"k_top": 600, "k_bottom": 600},
      "split": {"ratio": [8, 1, 6]},
      "simulate": {"alpha": 1, "beta": 1, "gamma": 0.5, "noise": 1},
      "prices": {"path": "prices.csv", "horizons": [3, 7, 15, 30]},
      "train": {"profile": "desk", ...TrainConfig overrides...}
    }

Exactly one of "simulate" (semi-synthetic outcomes with ground truth) or
"prices" (labels built from a price series) must be present. The run
directory receives config.json, checkpoint.bin, effects.jsonl, report.md,
metrics.json, manifest.json and plots/.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .baselines import naive_ate
from .corpus import (
    Dataset,
    SyntheticCorpusSpec,
    assign_treatment,
    generate_synthetic_corpus,
    load_corpus,
    split_dataset,
)
from .estimator import EffectEstimate, estimate_ate, write_effects_jsonl
from .metrics import (
    MetricReport,
    PriceSeries,
    ate_error,
    config_hash,
    load_prices,
    pehe_sqrt,
    stock_movement,
    stock_volatility,
)
from .simulate import SimulationParams, simulate_dataset, true_ate
from .trainer import Checkpoint, TrainConfig, desk_profile, paper_profile, train

_STAGE_SEED_INDEX = {"corpus": 0, "split": 1, "simulate": 2, "train": 3}


def _stage_seed(seed: int, stage: str) -> int:
    entropy = (seed, _STAGE_SEED_INDEX[stage])
    return int(np.random.SeedSequence(entropy=entropy).generate_state(1)[0])


def _mean_mad(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    return mean, float(np.abs(arr - mean).mean())


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def _fmt_agg(values: Sequence[float]) -> str:
    mean, mad = _mean_mad(values)
    if len(values) == 1:
        return _fmt(mean)
    return f"{_fmt(mean)} ± {_fmt(mad)}"


@dataclass
class RunResult:
    outdir: Path
    rows: list[dict[str, Any]]
    metric_report: MetricReport | None
    report_path: Path


def _load_config(config: str | Path | Mapping[str, Any]) -> dict[str, Any]:
    if isinstance(config, (str, Path)):
        config = json.loads(Path(config).read_text(encoding="utf-8"))
    if not isinstance(config, Mapping):
        raise ValueError("run config must be a JSON object")
    cfg = dict(config)
    for key in ("outcome", "corpus", "treatment"):
        if key not in cfg:
            raise ValueError(f"run config is missing {key!r}")
    if ("simulate" in cfg) == ("prices" in cfg):
        raise ValueError("run config needs exactly one of 'simulate' or 'prices'")
    cfg.setdefault("name", "run")
    cfg.setdefault("seeds", [0])
    cfg.setdefault("split", {"ratio": [8, 1, 6]})
    if cfg["outcome"] not in ("volatility", "movement", "vol", "mov"):
        raise ValueError(f"unknown outcome {cfg['outcome']!r}")
    return cfg


def _build_train_config(cfg: Mapping[str, Any], outcome_kind: str, seed: int) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    profile = section.pop("profile", "desk")
    if profile == "desk":
        factory = desk_profile
    elif profile == "paper":
        factory = paper_profile
    else:
        raise ValueError(f"unknown train profile {profile!r}")
    section["outcome_kind"] = outcome_kind
    section["seed"] = seed
    return factory(**section)


def _prepare_corpus(cfg: Mapping[str, Any], seed: int) -> Dataset:
    section = cfg["corpus"]
    kind = section.get("kind")
    if kind == "synthetic":
        spec = SyntheticCorpusSpec.from_mapping(section.get("spec", {}))
        return generate_synthetic_corpus(spec, _stage_seed(seed, "corpus"))
    if kind == "jsonl":
        return load_corpus(
            section["path"],
            vocab_size=section.get("vocab_size", 30000),
            min_count=section.get("min_count", 1),
            max_len=section.get("max_len", 512),
        )
    raise ValueError(f"unknown corpus kind {kind!r}")


def _label_from_prices(
    ds: Dataset, prices_cfg: Mapping[str, Any], horizon: int, outcome_kind: str
) -> Dataset:
    """Attach outcomes computed from a price series at the given horizon.

    Each document must carry an ISO date in meta["date"]; its label is the
    volatility (real) or movement (binary) evaluated ``horizon`` trading days
    after that date, i.e. over the post-document return window.
    """
    path = Path(prices_cfg["path"])
    convention = prices_cfg.get("convention", "bessel")
    floor = prices_cfg.get("floor")
    series_cache: dict[str, PriceSeries] = {}

    def series_for(doc) -> PriceSeries:
        if path.is_dir():
            ticker = doc.meta.get("ticker")
            if ticker is None:
                raise ValueError(f"document {doc.id!r} lacks meta.ticker for per-ticker prices")
            key = str(ticker)
            if key not in series_cache:
                series_cache[key] = load_prices(path / f"{key}.csv")
            return series_cache[key]
        if "" not in series_cache:
            series_cache[""] = load_prices(path)
        return series_cache[""]

    docs = []
    for doc in ds.documents:
        if "date" not in doc.meta:
            raise ValueError(f"document {doc.id!r} lacks meta.date for price labeling")
        ps = series_for(doc)
        t0 = ps.index_of(dt.date.fromisoformat(str(doc.meta["date"])))
        t = t0 + horizon
        if outcome_kind == "volatility":
            y = stock_volatility(ps, t, horizon, convention=convention, floor=floor)
        else:
            y = float(stock_movement(ps, t, horizon, convention=convention, floor=floor))
        docs.append(dataclasses.replace(doc, outcome=y))
    return dataclasses.replace(ds, documents=tuple(docs))


def _plot_effect_by_sector(rows: list[dict[str, Any]], outdir: Path) -> None:
    by_sector: dict[str, list[float]] = {}
    for row in rows:
        for sector, ite in row["sector_ites"]:
            by_sector.setdefault(sector, []).append(ite)
    if not by_sector:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sectors = sorted(by_sector)
    means = [float(np.mean(by_sector[s])) for s in sectors]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(sectors, means, color="#4878d0")
    ax.set_ylabel("mean estimated effect")
    ax.set_title("Estimated effect by sector (test split)")
    ax.axhline(0.0, color="black", linewidth=0.8)
    fig.autofmt_xdate(rotation=30)
    fig.tight_layout()
    fig.savefig(outdir / "effect_by_sector.png", dpi=120)
    plt.close(fig)


def _plot_effect_by_horizon(horizon_rows: dict[int, list[float]], outdir: Path) -> None:
    if not horizon_rows:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    horizons = sorted(horizon_rows)
    means, mads = zip(*[_mean_mad(horizon_rows[h]) for h in horizons])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(horizons, means, yerr=mads, marker="o", capsize=3)
    ax.set_xlabel("horizon (trading days)")
    ax.set_ylabel("estimated ATE")
    ax.set_title("Estimated effect by horizon (test split)")
    ax.axhline(0.0, color="black", linewidth=0.8)
    fig.tight_layout()
    fig.savefig(outdir / "effect_by_horizon.png", dpi=120)
    plt.close(fig)


def _sector_ites(ds: Dataset, estimate: EffectEstimate) -> list[tuple[str, float]]:
    docs = ds.split_docs(estimate.split)
    return [(str(d.meta.get("sector", "unknown")), v) for d, v in zip(docs, estimate.ite_hat)]


def run_experiment(config: str | Path | Mapping[str, Any], outdir: str | Path) -> RunResult:
    """Execute a full experiment and write its artifacts into ``outdir``."""
    cfg = _load_config(config)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "plots").mkdir(exist_ok=True)
    (outdir / "config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    manifest: dict[str, Any] = {"stages": [], "config_hash": config_hash(cfg)}

    def record(stage: str) -> None:
        manifest["stages"].append(stage)

    def fail(stage: str, exc: Exception) -> None:
        manifest["failed_stage"] = stage
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        (outdir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    outcome = "volatility" if cfg["outcome"] in ("volatility", "vol") else "movement"
    outcome_kind = "real" if outcome == "volatility" else "binary"
    simulate_mode = "simulate" in cfg
    seeds = list(cfg["seeds"])
    horizons = [0] if simulate_mode else [int(h) for h in cfg["prices"]["horizons"]]

    rows: list[dict[str, Any]] = []
    horizon_ates: dict[int, list[float]] = {h: [] for h in horizons}
    try:
        for seed_pos, seed in enumerate(seeds):
            stage = "corpus"
            ds = _prepare_corpus(cfg, seed)
            ds = assign_treatment(ds, cfg["treatment"]["k_top"], cfg["treatment"]["k_bottom"])
            ds = split_dataset(
                ds, ratio=cfg["split"].get("ratio", [8, 1, 6]), seed=_stage_seed(seed, "split")
            )
            record(f"{stage}[seed={seed}]")
            for horizon in horizons:
                if simulate_mode:
                    stage = "simulate"
                    sim = cfg["simulate"]
                    params = SimulationParams.from_caption(
                        alpha=sim.get("alpha", 1.0),
                        beta=sim.get("beta", 1.0),
                        gamma=sim.get("gamma", 0.5),
                        noise=sim.get("noise", 1.0),
                        outcome_kind=outcome,
                    )
                    labelled, _ = simulate_dataset(
                        ds, params, _stage_seed(seed, "simulate"), bins=sim.get("bins", 4)
                    )
                else:
                    stage = "label"
                    labelled = _label_from_prices(ds, cfg["prices"], horizon, outcome)
                record(f"{stage}[seed={seed},h={horizon}]")

                stage = "train"
                tcfg = _build_train_config(cfg, outcome_kind, _stage_seed(seed, "train"))
                ckpt = train(labelled, tcfg)
                model = ckpt.build_model()
                record(f"train[seed={seed},h={horizon}]")

                stage = "estimate"
                estimate = estimate_ate(model, labelled, "test", seed=seed)
                record(f"estimate[seed={seed},h={horizon}]")

                stage = "metrics"
                row: dict[str, Any] = {
                    "seed": seed,
                    "horizon": horizon,
                    "ate_hat": estimate.ate_hat,
                    "model_id": estimate.model_id,
                    "dev_value": ckpt.dev_value,
                    "sector_ites": _sector_ites(labelled, estimate),
                }
                if simulate_mode:
                    test_docs = labelled.split_docs("test")
                    tau_true = [d.ite for d in test_docs]
                    row["true_ate"] = true_ate(labelled, "test")
                    row["pehe_sqrt"] = pehe_sqrt(tau_true, estimate.ite_hat)
                    row["ate_error"] = ate_error(row["true_ate"], estimate.ite_hat)
                    row["naive_ate"] = naive_ate(labelled, "test")
                    row["naive_ate_error"] = abs(row["true_ate"] - row["naive_ate"])
                    naive_const = [row["naive_ate"]] * len(tau_true)
                    row["naive_pehe_sqrt"] = pehe_sqrt(tau_true, naive_const)
                horizon_ates[horizon].append(estimate.ate_hat)
                rows.append(row)
                record(f"metrics[seed={seed},h={horizon}]")

                if seed_pos == 0 and horizon == horizons[0]:
                    ckpt.save(outdir / "checkpoint.bin")
                    write_effects_jsonl(estimate, outdir / "effects.jsonl")
                if len(seeds) > 1 or len(horizons) > 1:
                    sub = outdir / "seeds" / f"seed_{seed}_h{horizon}"
                    sub.mkdir(parents=True, exist_ok=True)
                    ckpt.save(sub / "checkpoint.bin")
                    write_effects_jsonl(estimate, sub / "effects.jsonl")

        stage = "report"
        metric_report = _write_report(cfg, rows, horizon_ates, simulate_mode, outdir)
        _plot_effect_by_sector(rows, outdir / "plots")
        if not simulate_mode:
            _plot_effect_by_horizon(horizon_ates, outdir / "plots")
        record("report")
    except Exception as exc:
        fail(stage, exc)
        raise
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return RunResult(
        outdir=outdir,
        rows=rows,
        metric_report=metric_report,
        report_path=outdir / "report.md",
    )


def _write_report(
    cfg: Mapping[str, Any],
    rows: list[dict[str, Any]],
    horizon_ates: dict[int, list[float]],
    simulate_mode: bool,
    outdir: Path,
) -> MetricReport | None:
    seeds = list(cfg["seeds"])
    lines = [
        f"# Run report: {cfg['name']}",
        "",
        f"- config hash: `{config_hash(cfg)}`",
        f"- outcome: {cfg['outcome']}",
        f"- seeds: {', '.join(str(s) for s in seeds)}",
        f"- corpus: {cfg['corpus'].get('kind')}",
        "",
    ]
    metric_report: MetricReport | None = None
    if simulate_mode:
        pehes = [r["pehe_sqrt"] for r in rows]
        dates_ = [r["ate_error"] for r in rows]
        naive_dates = [r["naive_ate_error"] for r in rows]
        naive_pehes = [r["naive_pehe_sqrt"] for r in rows]
        lines += [
            "## Effect estimation (test split)",
            "",
            "| model | sqrt(PEHE) | dATE |",
            "|---|---|---|",
            f"| diva | {_fmt_agg(pehes)} | {_fmt_agg(dates_)} |",
            f"| naive diff-in-means | {_fmt_agg(naive_pehes)} | {_fmt_agg(naive_dates)} |",
            "",
            "## Per seed",
            "",
            "| seed | true ATE | diva ate_hat | diva dATE | naive ate | naive dATE |",
            "|---|---|---|---|---|---|",
        ]
        for r in rows:
            lines.append(
                f"| {r['seed']} | {_fmt(r['true_ate'])} | {_fmt(r['ate_hat'])} "
                f"| {_fmt(r['ate_error'])} | {_fmt(r['naive_ate'])} "
                f"| {_fmt(r['naive_ate_error'])} |"
            )
        n_total = sum(len(r["sector_ites"]) for r in rows)
        mean_pehe, _ = _mean_mad(pehes)
        mean_date, _ = _mean_mad(dates_)
        metric_report = MetricReport(
            pehe_sqrt=mean_pehe, ate_error=mean_date, n=n_total, config_hash=config_hash(cfg)
        )
    else:
        lines += [
            "## Estimated ATE by horizon (test split)",
            "",
            "| horizon | ate_hat |",
            "|---|---|",
        ]
        for h in sorted(horizon_ates):
            lines.append(f"| {h} | {_fmt_agg(horizon_ates[h])} |")
        lines += [
            "",
            "## Per run",
            "",
            "| seed | horizon | ate_hat |",
            "|---|---|---|",
        ]
        for r in rows:
            lines.append(f"| {r['seed']} | {r['horizon']} | {_fmt(r['ate_hat'])} |")
    lines.append("")
    (outdir / "report.md").write_text("\n".join(lines), encoding="utf-8")
    payload = {
        "rows": [
            {k: v for k, v in r.items() if k != "sector_ites"} for r in rows
        ],
        "horizon_ates": {str(k): v for k, v in horizon_ates.items()},
    }
    (outdir / "metrics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return metric_report
