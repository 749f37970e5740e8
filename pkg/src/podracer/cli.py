"""Command-line entry point: ``podracer {ingest,train,backtest,bench,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import backtest as bt
from .config import RunConfig, dump_config, load_config, override
from .errors import (AgentFailure, ConfigError, DataError, DivergenceError, EnvError, LayoutError,
                     PodFailure, PodracerError)
from .evolution import run_generations
from .market_data import (build_features, generate_synthetic, load_dataset, load_ohlcv, save_dataset,
                          split_fraction)
from .policy import load_params
from .runtime import throughput_benchmark

log = logging.getLogger("podracer")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_LAYOUT = 5
EXIT_DIVERGED = 6
EXIT_IO = 7
EXIT_ENV = 8

_EXIT_CODES = [
    (ConfigError, EXIT_CONFIG),
    (DataError, EXIT_DATA),
    (LayoutError, EXIT_LAYOUT),
    (EnvError, EXIT_ENV),
    ((DivergenceError, PodFailure, AgentFailure), EXIT_DIVERGED),
    (OSError, EXIT_IO),
    (PodracerError, EXIT_FAILURE),
]


def exit_code_for(exc: BaseException) -> int:
    for cls, code in _EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return EXIT_FAILURE


def fresh_dir(path) -> Path:
    """``path`` if absent or empty, else the first free ``path-1``, ``path-2``, ..."""
    path = Path(path)
    candidate, i = path, 0
    while candidate.exists() and (not candidate.is_dir() or any(candidate.iterdir())):
        i += 1
        candidate = path.with_name(f"{path.name}-{i}")
    candidate.mkdir(parents=True, exist_ok=True)
    return candidate


def _csv_list(text: str, cast=str) -> list:
    try:
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def _threads(args, cfg: RunConfig | None = None) -> int:
    raw = getattr(args, "threads", None) or os.environ.get("PODRACER_THREADS")
    if raw is None:
        return cfg.threads if cfg else 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"--threads expects an integer here, got {raw!r}") from None
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    return n


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = override(cfg, seed=getattr(args, "seed", None), out_dir=getattr(args, "out", None))
    return cfg


def _load_any_dataset(path, cfg: RunConfig):
    path = Path(path)
    if path.suffix == ".csv":
        return build_features(load_ohlcv(path, cfg.data.tickers, cfg.data.periods_per_year), cfg.indicators)
    return load_dataset(path)


def _summary(ds) -> dict:
    fmt = lambda t: datetime.fromtimestamp(int(t), tz=timezone.utc).isoformat()
    return {"n": ds.n_tickers, "T": ds.n_steps, "f": ds.n_features, "tickers": list(ds.tickers),
            "start": fmt(ds.timestamps[0]), "end": fmt(ds.timestamps[-1]),
            "periods_per_year": ds.periods_per_year}


# --- commands -------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = _resolve_config(args)
    if args.synthetic:
        model = {"trend": "deterministic-trend", "gbm": "geometric-random-walk"}[args.synthetic]
        ds = generate_synthetic(args.n, args.steps, model, cfg.seed, slope=args.slope,
                                drift=args.drift, volatility=args.volatility)
    else:
        sources = args.csv or list(cfg.data.csv)
        if len(sources) != 1:
            raise ConfigError("ingest needs exactly one --csv file (or --synthetic)")
        tickers = _csv_list(args.tickers) if args.tickers else cfg.data.tickers
        ds = load_ohlcv(sources[0], tickers, cfg.data.periods_per_year)
    ds = build_features(ds, cfg.indicators)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(json.dumps({"artifact": str(out), **_summary(ds)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    cfg = override(cfg, "evolution", generations=args.generations, N=args.agents, K=args.pods,
                   epochs_per_generation=args.epochs)
    cfg = override(cfg, "hyperparams", learning_rate=args.lr, rollout_capacity=args.rollout,
                   batch_size=args.batch_size)
    cfg = override(cfg, threads=_threads(args, cfg), executor=args.executor)
    source = args.dataset or cfg.data.artifact or (cfg.data.csv[0] if cfg.data.csv else None)
    if source is None:
        raise ConfigError("train needs --dataset (or data.artifact / data.csv in the config)")
    cfg = override(cfg, "data", artifact=str(source) if args.dataset else cfg.data.artifact)
    ds = _load_any_dataset(source, cfg)
    train, _ = split_fraction(ds, cfg.data.train_fraction)
    run_dir = fresh_dir(cfg.out_dir)
    dump_config(cfg, run_dir / "config.json")
    log.info("training in %s", run_dir)
    result = run_generations(cfg.evolution, train, cfg.seed, cfg.hyperparams, cfg.env, run_dir,
                             threads=cfg.threads, executor=cfg.executor)
    records = [r.to_json() for r in result.log]
    from .plotting import plot_fitness
    plot_fitness(records, run_dir / "fitness.png")
    summary = {
        "run_dir": str(run_dir),
        "best": result.best_record.to_json(),
        "generations": [
            {"generation": g.generation, "scores": g.scores, "survivors": list(g.plan.survivors),
             "learning_rates": g.learning_rates}
            for g in result.generations
        ],
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_backtest(args) -> int:
    cfg = _resolve_config(args)
    cfg = override(cfg, "env", cost_rate=args.cost_rate, initial_capital=args.capital, h_max=args.h_max)
    params = load_params(args.snapshot)
    ds = _load_any_dataset(args.dataset, cfg)
    if args.segment != "all":
        train, test = split_fraction(ds, cfg.data.train_fraction)
        ds = test if args.segment == "test" else train
    curve = bt.run_backtest(params, ds, cfg.env)
    metrics = bt.compute_metrics(curve, args.risk_free)
    bench = bt.read_curve_csv(args.benchmark, ds.periods_per_year) if args.benchmark else None
    out = fresh_dir(args.out or cfg.out_dir)
    files = bt.emit_report(curve, metrics, out, benchmark=bench, plot=not args.no_plot)
    print(json.dumps({"out": str(out), "metrics": metrics.to_json(),
                      "files": {k: str(v) for k, v in files.items()}}))
    return EXIT_OK


def cmd_bench(args) -> int:
    threads_raw = getattr(args, "threads", None) or os.environ.get("PODRACER_THREADS") or "1,2,4"
    dataset = None
    if args.dataset:
        dataset = load_dataset(args.dataset)
    report = throughput_benchmark(
        batch_sizes=_csv_list(args.batch, int), n=args.tickers, steps=args.steps,
        thread_counts=_csv_list(threads_raw, int), pods=args.pods, dataset=dataset,
        executor=args.executor, rollout_capacity=args.rollout, seed=getattr(args, "seed", None) or 0)
    text = json.dumps(report, indent=2)
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise DataError(f"no such run directory: {run}")
    written = {}
    fitness_log = run / "fitness.jsonl"
    if fitness_log.is_file():
        from .plotting import plot_fitness
        records = [json.loads(line) for line in fitness_log.read_text(encoding="utf-8").splitlines() if line]
        written["fitness_figure"] = str(plot_fitness(records, run / "fitness.png"))
    equity = run / "equity.csv"
    if equity.is_file():
        curve = bt.read_curve_csv(equity, args.periods_per_year)
        metrics = bt.compute_metrics(curve, args.risk_free)
        prior = run / "metrics.json"
        if prior.is_file():
            old = json.loads(prior.read_text(encoding="utf-8"))
            metrics.trade_count = old.get("trade_count", 0)
            metrics.total_transaction_costs = old.get("total_transaction_costs", 0.0)
        bench = bt.read_curve_csv(args.benchmark, args.periods_per_year) if args.benchmark else None
        files = bt.emit_report(curve, metrics, run, benchmark=bench)
        written.update({k: str(v) for k, v in files.items()})
        written["metrics"] = metrics.to_json()
    if not written:
        raise DataError(f"{run} holds neither fitness.jsonl nor equity.csv")
    print(json.dumps(written))
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def _global_flags(default) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=default, help="root seed (unsigned 64-bit)")
    p.add_argument("--out", default=default, help="output directory")
    p.add_argument("--threads", default=default,
                   help="worker threads (bench: comma list); falls back to $PODRACER_THREADS")
    p.add_argument("-v", "--verbose", action="store_true", default=default)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="podracer", parents=[_global_flags(None)],
                                     description="Population-based PPO stock-trading trainer.")
    flags = _global_flags(argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[flags], help="validate + featurize data into an artifact")
    p.add_argument("--csv", action="append", help="OHLCV CSV file")
    p.add_argument("--tickers", help="comma-separated ticker subset")
    p.add_argument("--synthetic", choices=["trend", "gbm"])
    p.add_argument("--n", type=int, default=1, help="synthetic ticker count")
    p.add_argument("--steps", type=int, default=500, help="synthetic length")
    p.add_argument("--slope", type=float, default=0.005)
    p.add_argument("--drift", type=float, default=0.0)
    p.add_argument("--volatility", type=float, default=0.02)
    p.add_argument("--output", default="dataset.npz", help="artifact path")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[flags], help="run generational evolution")
    p.add_argument("--dataset", help="dataset artifact (.npz) or OHLCV CSV")
    p.add_argument("--generations", type=int)
    p.add_argument("--agents", type=int)
    p.add_argument("--pods", type=int)
    p.add_argument("--epochs", type=int, help="epochs per generation")
    p.add_argument("--lr", type=float)
    p.add_argument("--rollout", type=int, help="rollout buffer capacity")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--executor", choices=["thread", "process"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("backtest", parents=[flags], help="replay a snapshot and compute metrics")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--segment", choices=["test", "train", "all"], default="test")
    p.add_argument("--benchmark", help="benchmark curve CSV (timestamp,value)")
    p.add_argument("--cost-rate", type=float)
    p.add_argument("--capital", type=float)
    p.add_argument("--h-max", type=int)
    p.add_argument("--risk-free", type=float, default=0.0, help="annual risk-free rate")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("bench", parents=[flags], help="measure stepping and pod-epoch throughput")
    p.add_argument("--batch", default="1,64", help="comma list of batch sizes")
    p.add_argument("--pods", type=int, default=8)
    p.add_argument("--steps", type=int, default=256)
    p.add_argument("--tickers", type=int, default=4)
    p.add_argument("--rollout", type=int, default=2**10)
    p.add_argument("--dataset", help="dataset artifact; synthetic data when omitted")
    p.add_argument("--executor", choices=["thread", "process"], default="thread")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", parents=[flags], help="re-render figures and metrics for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--benchmark")
    p.add_argument("--periods-per-year", type=int, default=252)
    p.add_argument("--risk-free", type=float, default=0.0)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PodracerError, OSError) as exc:
        print(f"podracer {args.command}: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
