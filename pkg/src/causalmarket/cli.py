"""Command-line entry point.

Every artifact-producing command writes a manifest.json next to its outputs
with the config snapshot, seeds, input digests, and timing; the manifest is
the only output containing timestamps, so reruns with identical inputs and
seeds reproduce every other file byte for byte.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 network error,
5 numeric divergence, 1 anything else.
"""

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, bench, evaluation, fcm, graph, news, training
from .config import TrainConfig
from .data import DatasetSpec, build_panel, load_prices
from .errors import CausalMarketError, ConfigError, DataError
from .model import Model

log = logging.getLogger("causalmarket")

EXIT_CODE_HELP = (
    "exit codes: 0 ok, 2 config error, 3 data error, 4 network error, "
    "5 numeric divergence, 1 other failure"
)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command: str, config: dict, inputs: list, outputs: list, **extra) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "version": __version__,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(),
        "config": config,
        "input_digests": {str(p): _sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
    }
    payload.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _resolve_manifest(path) -> Path:
    path = Path(path)
    if path.is_dir():
        candidate = path / "manifest.txt"
        if not candidate.exists():
            raise ConfigError(f"{path} has no manifest.txt")
        return candidate
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    return path


def _dataset_inputs(spec: DatasetSpec, manifest: Path) -> list:
    paths = [manifest] + [spec.price_paths[s] for s in spec.symbols]
    if spec.news_scores_path is not None:
        paths.append(spec.news_scores_path)
    return paths


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    manifest = _resolve_manifest(args.manifest)
    spec = DatasetSpec.from_manifest(manifest)
    dataset = build_panel(spec, lag=args.lag, l_max=args.l_max,
                          use_news=spec.news_scores_path is not None)
    summary = {
        "symbols": dataset.symbols,
        "days": len(dataset.dates),
        "first_day": dataset.dates[0].isoformat(),
        "last_day": dataset.dates[-1].isoformat(),
        "lag": dataset.lag,
        "windows": {k: int(len(v)) for k, v in dataset.splits.items()},
        "evaluated_labels": int(dataset.label_mask.sum()),
        "rise_fraction": float(
            dataset.labels[dataset.label_mask > 0].mean()
        ) if dataset.label_mask.sum() else None,
        "has_news": dataset.has_news,
        "news_days": int((dataset.news_count > 0).sum()) if dataset.has_news else 0,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _write_manifest(out, "ingest", {"lag": args.lag, "l_max": args.l_max},
                    _dataset_inputs(spec, manifest), [out / "dataset_summary.json"])
    print(json.dumps(summary, indent=2))
    return 0


def cmd_score_news(args) -> int:
    manifest = _resolve_manifest(args.manifest)
    from .kvfile import parse_kv_file

    kv = parse_kv_file(manifest)
    if "news_items" not in kv:
        raise ConfigError(f"{manifest} has no 'news_items' entry pointing at raw news JSONL")
    items_path = manifest.parent / kv["news_items"]
    items = news.load_news_items(items_path)
    cache = news.ScoreCache.load(args.cache)
    client = None
    if not args.offline:
        client = news.ChatClient(news.ClientConfig.from_env())
    _, report = news.score_news(items, cache, client=client, offline=args.offline)
    cache.save(args.cache)
    out_dir = Path(args.cache).parent
    _write_manifest(out_dir, "score-news", {"offline": args.offline},
                    [manifest, items_path], [args.cache],
                    report={"total": report.total, "cached": report.cached,
                            "fetched": report.fetched, "failed": report.failed})
    print(f"scored {report.total} items: {report.cached} cached, "
          f"{report.fetched} fetched, {report.failed} neutral fallback")
    return 0


def _config_from_args(args) -> TrainConfig:
    overrides = {}
    if args.no_news:
        overrides["use_news"] = "false"
    if args.lag_independent:
        overrides["lag_dependent"] = "false"
    if args.existence_only:
        overrides["existence_only"] = "true"
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.config:
        return TrainConfig.from_file(args.config, overrides)
    return TrainConfig.from_kv(overrides)


def cmd_train(args) -> int:
    config = _config_from_args(args)
    manifest = _resolve_manifest(args.data)
    spec = DatasetSpec.from_manifest(manifest)
    if config.use_news and spec.news_scores_path is None:
        raise ConfigError("config requests news but the dataset manifest has no news_scores")
    dataset = build_panel(spec, lag=config.lag, l_max=config.l_max, use_news=config.use_news)
    model = Model.build(config, dataset.symbols, np.random.default_rng(config.seed))
    result = training.train(model, dataset, out_dir=args.out)
    outputs = [result.best_path, result.last_path, Path(args.out) / "metrics.csv"]
    _write_manifest(args.out, "train", config.to_kv(),
                    _dataset_inputs(spec, manifest), outputs,
                    wall_seconds=result.wall_seconds,
                    best_epoch=result.best_epoch,
                    best_val_acc=result.best_val_acc)
    print(f"trained {len(result.history)} epochs; best val ACC "
          f"{result.best_val_acc:.4f} at epoch {result.best_epoch}; "
          f"checkpoints in {args.out}")
    return 0


def cmd_discover(args) -> int:
    model = Model.load(args.checkpoint)
    sigma = model.sigma_values().astype(np.float64)
    weight = model.store.value("graph.weight").astype(np.float64)
    sample = graph.sample_graph(
        graph.edge_probabilities(_view(model)),
        tau=model.config.tau,
        rng=np.random.default_rng(model.config.seed),
    ).hard_values.astype(np.float64)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_path = out / "graph.npz"
    graph.save_graph_export(export_path, sigma, weight, sample, model.symbols)
    _, lag_avg = graph.causal_strength(sigma, weight)
    strength_csv = out / "strength_matrix.csv"
    with open(strength_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from\\to"] + model.symbols)
        for i, sym in enumerate(model.symbols):
            writer.writerow([sym] + [f"{v:.10g}" for v in lag_avg[i]])
    outgoing_csv = out / "outgoing_strength.csv"
    with open(outgoing_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["symbol", "outgoing_strength"])
        for sym, val in zip(model.symbols, lag_avg.sum(axis=1)):
            writer.writerow([sym, f"{val:.10g}"])
    outputs = [export_path, strength_csv, outgoing_csv]

    if args.market_values:
        values = _load_market_values(args.market_values)
        report = evaluation.strength_report(lag_avg, model.symbols, values, seed=model.config.seed)
        report_path = out / "strength_report.json"
        report_path.write_text(json.dumps({
            "spearman_rho": report.rho,
            "p_value": report.p_value,
            "risk_note": "permutation test, 10000 shuffles",
            "excluded_symbols": report.excluded,
            "rows": [
                {"symbol": s, "outgoing_strength": float(o), "market_value": float(m)}
                for s, o, m in zip(report.symbols, report.outgoing, report.market_values)
            ],
        }, indent=2) + "\n")
        outputs.append(report_path)
        print(f"Spearman(outgoing strength, market value) = {report.rho:.4f} (p={report.p_value:.4g})")

    _write_manifest(out, "discover", model.config.to_kv(),
                    [Path(args.checkpoint)] + ([Path(args.market_values)] if args.market_values else []),
                    outputs)
    print(f"graph export written to {export_path}")
    return 0


def _view(model: Model):
    from . import autodiff as ad

    return ad.ParamView(model.store)


def _load_market_values(path) -> dict[str, float]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"market value file not found: {path}")
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["symbol", "market_value"]:
            raise DataError(f"{path}: expected header symbol,market_value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out[row[0].strip()] = float(row[1])
            except (ValueError, IndexError) as e:
                raise DataError(f"{path}:{lineno}: bad row ({e})")
    return out


def cmd_predict(args) -> int:
    model = Model.load(args.checkpoint)
    manifest = _resolve_manifest(args.data)
    spec = DatasetSpec.from_manifest(manifest)
    dataset = build_panel(spec, lag=model.config.lag, l_max=model.config.l_max,
                          use_news=model.config.use_news)
    if dataset.symbols != model.symbols:
        raise ConfigError(
            f"dataset symbols {dataset.symbols} do not match checkpoint symbols {model.symbols}"
        )
    targets = dataset.window_targets(None if args.split == "all" else args.split)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "symbol", "probability", "label"])
        for start in range(0, len(targets), 256):
            chunk = targets[start:start + 256]
            batch = dataset.batch(chunk, dtype=model.store.dtype)
            probs = model.predict(batch)
            hard = fcm.hard_labels(probs)
            for b, t in enumerate(chunk):
                for d, sym in enumerate(dataset.symbols):
                    writer.writerow([dataset.dates[t].isoformat(), sym,
                                     f"{probs[b, d]:.10g}", hard[b, d]])
    _write_manifest(out_path.parent, "predict",
                    {"split": args.split, **model.config.to_kv()},
                    [Path(args.checkpoint)] + _dataset_inputs(spec, manifest), [out_path])
    print(f"predictions for {len(targets)} dates written to {out_path}")
    return 0


def _load_predictions(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"predictions file not found: {path}")
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header][:3] != ["date", "symbol", "probability"]:
            raise DataError(f"{path}: expected header date,symbol,probability[,label]")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                date = dt.date.fromisoformat(row[0])
                out.setdefault(date, {})[row[1]] = float(row[2])
            except (ValueError, IndexError) as e:
                raise DataError(f"{path}:{lineno}: bad row ({e})")
    return out


def cmd_backtest(args) -> int:
    predictions = _load_predictions(args.predictions)
    price_dir = Path(args.prices)
    if not price_dir.is_dir():
        raise DataError(f"price directory not found: {price_dir}")
    symbols = sorted({s for day in predictions.values() for s in day})
    prices = {}
    for sym in symbols:
        path = price_dir / f"{sym}.csv"
        if not path.exists():
            log.warning("no price file for %s", sym)
            continue
        prices[sym] = {rec.date: rec.adj_close for rec in load_prices(path, fmt=args.price_format)}
    result = evaluation.backtest(predictions, prices, k=args.k, risk_free=args.risk_free,
                                 cost_per_trade=args.cost_per_trade)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    apv_csv = out / "apv.csv"
    with open(apv_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "daily_return", "apv", "picks"])
        for date, r, a, picks in zip(result.dates, result.daily_returns, result.apv, result.picks):
            writer.writerow([date.isoformat(), f"{r:.10g}", f"{a:.10g}", "|".join(picks)])
    summary = {
        "final_apv": result.final_apv,
        "sharpe_apv_series": result.sharpe_apv,
        "sharpe_daily_returns": result.sharpe_daily,
        "days": len(result.dates),
        "k": args.k,
        "risk_free": args.risk_free,
        "note": "sharpe_apv_series follows the accumulated-value formula; "
                "risk_free defaults to 0",
    }
    (out / "backtest.json").write_text(json.dumps(summary, indent=2) + "\n")
    _write_manifest(out, "backtest",
                    {"k": args.k, "risk_free": args.risk_free, "price_format": args.price_format},
                    [Path(args.predictions)], [apv_csv, out / "backtest.json"])
    print(json.dumps(summary, indent=2))
    return 0


def cmd_synth_bench(args) -> int:
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    results = bench.run_benchmark(
        args.out, n_stocks=args.n_stocks, n_lags=args.n_lags, density=args.density,
        steps=args.steps, trials=args.trials, base_seed=args.seed, link=args.link,
        config_overrides=overrides,
    )
    aurocs = [r.auroc for r in results]
    above = all(r.auroc > r.shuffle_p95 for r in results)
    _write_manifest(args.out, "synth-bench",
                    {"n_stocks": args.n_stocks, "n_lags": args.n_lags, "density": args.density,
                     "steps": args.steps, "trials": args.trials, "seed": args.seed,
                     "link": args.link, **bench.BENCH_OVERRIDES, **overrides},
                    [], [Path(args.out) / "results.csv"])
    for r in results:
        print(f"trial {r.trial}: AUROC {r.auroc:.4f} (null p95 {r.shuffle_p95:.4f}) "
              f"F1 {r.f1:.3f} SHD {r.shd} test ACC {r.test_acc:.4f}")
    print(f"mean AUROC {np.mean(aurocs):.4f}; all trials above shuffled baseline: {above}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causalmarket",
        description="Lagged causal-graph discovery and movement prediction over stock panels.",
        epilog=EXIT_CODE_HELP,
    )
    parser.add_argument("--version", action="version", version=f"causalmarket {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a dataset and write a windowed summary")
    p.add_argument("--manifest", required=True, help="dataset manifest file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--lag", type=int, default=5)
    p.add_argument("--l-max", type=int, default=10)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("score-news", help="score raw news through the chat endpoint into a cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True, help="score cache JSONL (created if missing)")
    p.add_argument("--offline", action="store_true", help="fail rather than call the endpoint")
    p.set_defaults(func=cmd_score_news)

    p = sub.add_parser("train", help="train a model on an ingested dataset")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="dataset manifest file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--no-news", action="store_true", help="price-only mode")
    p.add_argument("--lag-independent", action="store_true",
                   help="disable the lag-coupling transform")
    p.add_argument("--existence-only", action="store_true",
                   help="drop the non-existence likelihoods; edge probability is sigmoid(u)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("discover", help="export edge probabilities, weights, and strengths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--market-values", help="CSV symbol,market_value for the strength correlation")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("predict", help="per-date movement probabilities from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "valid", "test", "all"], default="test")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("backtest", help="top-k equal-weight strategy over predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--prices", required=True, help="directory of per-symbol price CSVs")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--risk-free", type=float, default=0.0)
    p.add_argument("--cost-per-trade", type=float, default=0.0)
    p.add_argument("--price-format", choices=["raw", "acl18"], default="raw")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("synth-bench", help="generate -> train -> score graph recovery")
    p.add_argument("--D", "--stocks", dest="n_stocks", type=int, default=8)
    p.add_argument("--L", "--lags", dest="n_lags", type=int, default=2)
    p.add_argument("--density", type=float, default=0.15)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--link", choices=["linear", "tanh"], default="linear")
    p.add_argument("--epochs", type=int, default=None, help="override the benchmark epoch count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CausalMarketError as e:
        log.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
