"""Command-line interface.

Subcommands: ingest, synth, simulate, train, estimate, baseline, finmetrics,
run. Datasets travel between commands as JSON files written by
corpus.save_dataset.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .baselines import TarnetConfig, naive_ate, tarnet_fit_predict
from .corpus import (
    SyntheticCorpusSpec,
    assign_treatment,
    generate_synthetic_corpus,
    load_corpus,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .estimator import estimate_ate, write_effects_jsonl
from .metrics import load_prices, stock_movement, stock_return, stock_volatility
from .runner import run_experiment
from .simulate import SimulationParams, simulate_dataset
from .trainer import Checkpoint, desk_profile, paper_profile, train


def _parse_ratio(text: str) -> tuple[float, ...]:
    parts = text.replace(":", ",").split(",")
    return tuple(float(p) for p in parts)


def _add_assignment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k-top", type=int, default=None, help="treated count (top scores)")
    p.add_argument("--k-bottom", type=int, default=None, help="control count (bottom scores)")
    p.add_argument("--split-ratio", type=_parse_ratio, default=None, help="train:dev:test, e.g. 8:1:6")
    p.add_argument("--split-seed", type=int, default=0)


def _apply_assignment(ds, args):
    if args.k_top is not None or args.k_bottom is not None:
        if args.k_top is None or args.k_bottom is None:
            raise SystemExit("provide both --k-top and --k-bottom")
        ds = assign_treatment(ds, args.k_top, args.k_bottom)
        ratio = args.split_ratio if args.split_ratio is not None else (8, 1, 6)
        ds = split_dataset(ds, ratio=ratio, seed=args.split_seed)
    elif args.split_ratio is not None:
        ds = split_dataset(ds, ratio=args.split_ratio, seed=args.split_seed)
    return ds


def _cmd_ingest(args) -> int:
    ds = load_corpus(
        args.input, vocab_size=args.vocab_size, min_count=args.min_count, max_len=args.max_len
    )
    ds = _apply_assignment(ds, args)
    save_dataset(ds, args.out)
    print(f"ingested {len(ds)} documents -> {args.out}")
    return 0


def _cmd_synth(args) -> int:
    spec = SyntheticCorpusSpec()
    if args.spec is not None:
        spec = SyntheticCorpusSpec.from_mapping(json.loads(Path(args.spec).read_text()))
    if args.n_docs is not None:
        spec = SyntheticCorpusSpec.from_mapping({**spec.to_mapping(), "n_docs": args.n_docs})
    ds = generate_synthetic_corpus(spec, args.seed)
    ds = _apply_assignment(ds, args)
    save_dataset(ds, args.out)
    print(f"generated {len(ds)} synthetic documents -> {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    ds = load_dataset(args.dataset)
    params = SimulationParams.from_caption(
        alpha=args.alpha,
        beta=args.beta,
        gamma=args.gamma,
        noise=args.noise,
        outcome_kind=args.outcome,
    )
    labelled, table = simulate_dataset(ds, params, args.seed, bins=args.bins)
    save_dataset(labelled, args.out)
    flagged = ", ".join(f"{c}={k}:{r}" for c, k, r in table.flagged) or "none"
    print(f"simulated {params.outcome_kind} outcomes -> {args.out} (flags: {flagged})")
    return 0


def _cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    overrides = {}
    if args.config is not None:
        overrides.update(json.loads(Path(args.config).read_text()))
    for key in (
        "epochs", "batch_size", "peak_lr", "latent_dim", "dim", "depth",
        "alpha", "beta", "gamma", "eta", "mlm_weight", "seed",
        "treatment_loss_mode", "ort_target",
    ):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.outcome_kind is not None:
        overrides["outcome_kind"] = args.outcome_kind
    factory = desk_profile if args.profile == "desk" else paper_profile
    config = factory(**overrides)
    ckpt = train(ds, config)
    ckpt.save(args.out)
    for note in ckpt.diagnostics:
        print(f"warning: {note}", file=sys.stderr)
    print(
        f"trained {config.epochs} epochs; best epoch {ckpt.epoch} "
        f"(dev {config.resolved_selection()} = {ckpt.dev_value:.6f}) -> {args.out}"
    )
    return 0


def _cmd_estimate(args) -> int:
    ds = load_dataset(args.dataset)
    model = Checkpoint.load(args.checkpoint).build_model()
    estimate = estimate_ate(model, ds, args.split)
    write_effects_jsonl(estimate, args.out)
    print(f"ate_hat[{args.split}] = {estimate.ate_hat:.6f} ({len(estimate.ids)} docs) -> {args.out}")
    return 0


def _cmd_baseline(args) -> int:
    ds = load_dataset(args.dataset)
    if args.method == "naive":
        value = naive_ate(ds, args.split)
        print(f"naive_ate[{args.split}] = {value:.6f}")
        return 0
    config = TarnetConfig(
        epochs=args.epochs, outcome_kind=args.outcome_kind, seed=args.seed
    )
    estimate = tarnet_fit_predict(ds, config, split=args.split)
    if args.out is not None:
        write_effects_jsonl(estimate, args.out)
        print(f"tarnet ate_hat[{args.split}] = {estimate.ate_hat:.6f} -> {args.out}")
    else:
        print(f"tarnet ate_hat[{args.split}] = {estimate.ate_hat:.6f}")
    return 0


def _cmd_finmetrics(args) -> int:
    ps = load_prices(args.prices)
    window = args.window
    floor = args.floor
    rows = []
    for t in range(1, len(ps)):
        ret = stock_return(ps, t)
        try:
            vol = stock_volatility(ps, t, window, convention=args.convention, floor=floor)
        except ValueError:
            vol = None
        try:
            mov = stock_movement(ps, t, window, convention=args.convention, floor=floor)
        except ValueError:
            mov = None
        rows.append((ps.dates[t].isoformat(), ret, vol, mov))
    out_lines = ["date,return,volatility,movement"]
    for date, ret, vol, mov in rows:
        vol_s = "" if vol is None else f"{vol:.10f}"
        mov_s = "" if mov is None else str(mov)
        out_lines.append(f"{date},{ret:.10f},{vol_s},{mov_s}")
    text = "\n".join(out_lines) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {len(rows)} rows -> {args.out}")
    else:
        print(text, end="")
    return 0


def _cmd_run(args) -> int:
    result = run_experiment(args.config, args.outdir)
    print(f"run complete -> {result.report_path}")
    if result.metric_report is not None:
        mr = result.metric_report
        print(f"sqrt(PEHE) = {mr.pehe_sqrt:.6f}, dATE = {mr.ate_error:.6f} (n = {mr.n})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diva",
        description="Treatment-effect estimation from text via disentangled variational latents",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="read a JSONL corpus into a dataset file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=30000)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--max-len", type=int, default=512)
    _add_assignment_flags(p)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic corpus with known latents")
    p.add_argument("--spec", default=None, help="JSON file of generator settings")
    p.add_argument("--n-docs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_assignment_flags(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("simulate", help="attach semi-synthetic outcomes with known effects")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--outcome", choices=["vol", "mov", "volatility", "movement"], default="vol")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--bins", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="train a model on a simulated/labelled dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--profile", choices=["desk", "paper"], default="desk")
    p.add_argument("--config", default=None, help="JSON file of TrainConfig overrides")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--peak-lr", dest="peak_lr", type=float, default=None)
    p.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="treatment loss weight")
    p.add_argument("--beta", type=float, default=None, help="outcome loss weight")
    p.add_argument("--gamma", type=float, default=None, help="orthogonality loss weight")
    p.add_argument("--eta", type=float, default=None, help="MMD loss weight")
    p.add_argument("--mlm-weight", dest="mlm_weight", type=float, default=None)
    p.add_argument("--outcome-kind", choices=["real", "binary"], default=None)
    p.add_argument("--treatment-loss-mode", dest="treatment_loss_mode", default=None)
    p.add_argument("--ort-target", dest="ort_target", choices=["identity", "zero"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("estimate", help="plug-in effect estimates from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("baseline", help="reference estimators on the same dataset")
    p.add_argument("--method", choices=["naive", "tarnet"], required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--outcome-kind", choices=["real", "binary"], default="real")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("finmetrics", help="returns, volatilities and movement labels from prices")
    p.add_argument("--prices", required=True, help="CSV with date,adj_close columns")
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--convention", choices=["bessel", "window"], default="bessel")
    p.add_argument("--floor", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_finmetrics)

    p = sub.add_parser("run", help="full experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
