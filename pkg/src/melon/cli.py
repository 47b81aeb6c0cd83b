"""``melon`` command line: preprocess, pretrain, online, analyze-rank, bench.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import rank as R
from .config import ConfigError, RunConfig, load_config, override
from .dataset import (
    TRAIN_TAG, DataError, MiniBatch, SplitSpec, Stream, filter_min_interactions, load,
    read_canonical, split, write_canonical,
)
from .history import HistoryStore
from .meta import MeLONConfig
from .recommenders import build_recommender
from .snapshot import load_tensors
from .strategies import RateContext, make_strategy
from .synthetic import DriftConfig, drift_stream
from .trainer import (
    NumericError, TrainConfig, chunks, init_state, load_state_tensors, pretrain, report,
    run_online, save_state, train_step, with_negatives, write_json, write_metrics_csv,
)

logger = logging.getLogger("melon")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
            cwd=Path(__file__).resolve().parent, timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- building blocks -----------------------------------------------------


def load_stream(cfg: RunConfig) -> Stream:
    d = cfg.data
    if not d.path:
        stream, _ = drift_stream(DriftConfig(**asdict(d.synthetic), seed=cfg.seed))
        return stream
    p = Path(d.path)
    if d.format == "canonical" or (not d.format and p.is_dir()):
        stream, _ = read_canonical(p)
    else:
        stream = load(p, d.format or None)
    if d.min_interactions > 1:
        stream = filter_min_interactions(stream, d.min_interactions)
    return stream


def split_stream(cfg: RunConfig, stream: Stream):
    return split(stream, SplitSpec(*cfg.data.split))


def build_model(cfg: RunConfig, stream: Stream):
    m = cfg.model
    if m.kind == "ncf" and (not m.tower or m.tower[0] != 2 * m.dim):
        raise ConfigError(f"model.tower must start at 2*dim = {2 * m.dim}")
    return build_recommender(m.kind, stream.num_users, stream.num_items, dim=m.dim,
                             tower=tuple(m.tower), seed=cfg.seed, init_std=m.init_std)


def melon_config(cfg: RunConfig, model) -> MeLONConfig:
    return MeLONConfig(dim=model.dim, seed=cfg.seed, **asdict(cfg.strategy.melon))


def build_state(cfg: RunConfig, stream: Stream, kind: str | None = None):
    model = build_model(cfg, stream)
    s = cfg.strategy
    strategy = make_strategy(kind or s.kind, model, lr=s.lr, optimizer=s.optimizer, seed=cfg.seed,
                             eals_boost=s.eals_boost, mwnet_hidden=s.mwnet_hidden,
                             melon=melon_config(cfg, model))
    t = cfg.train
    tc = TrainConfig(lr=s.lr, meta_lr=t.meta_lr, meta_weight_decay=t.meta_weight_decay,
                     batch_size=t.batch_size, train_negatives=t.train_negatives,
                     eval_negatives=t.eval_negatives, seed=cfg.seed,
                     last_item_side=t.last_item_side, snapshot_every=t.snapshot_every)
    return init_state(model, strategy, tc)


def prepare_run_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.to_dict(), out / "config.json")
    write_json({"seed": cfg.seed}, out / "seeds.json")
    (out / "VERSION").write_text(f"{version_string()}\n")
    (out / "command").write_text(f"{command}\n")
    return out


# -- commands ------------------------------------------------------------------


def cmd_preprocess(cfg: RunConfig, input_path: str | None) -> int:
    if input_path:
        cfg.data.path = input_path
    if not cfg.data.path:
        raise ConfigError("preprocess needs --input or data.path")
    stream = load_stream(cfg)
    out = prepare_run_dir(cfg, "preprocess")
    sidecar = write_canonical(stream, out / "dataset", SplitSpec(*cfg.data.split))
    logger.info("wrote %d interactions (%d users, %d items) to %s", sidecar["num_interactions"],
                sidecar["num_users"], sidecar["num_items"], out / "dataset")
    return EXIT_OK


def _pretrain_state(cfg: RunConfig, stream: Stream, pre: Stream, out: Path | None):
    state = build_state(cfg, stream)
    pretrain(state, pre, cfg.train.epochs, out_dir=out)
    if cfg.train.meta_epochs and state.strategy.learned:
        # history already holds ``pre``; meta-only epochs reuse it
        hist = state.history
        state.history = type(hist)(hist.num_users, hist.num_items)
        pretrain(state, pre, cfg.train.meta_epochs, update_recommender=False, out_dir=out)
    return state


def cmd_pretrain(cfg: RunConfig) -> int:
    stream = load_stream(cfg)
    pre, _, _ = split_stream(cfg, stream)
    out = prepare_run_dir(cfg, "pretrain")
    state = _pretrain_state(cfg, stream, pre, out)
    save_state(state, out / "snapshot")
    write_json(state.log, out / "pretrain-log.json")
    return EXIT_OK


def cmd_online(cfg: RunConfig, snapshot: str | None) -> int:
    stream = load_stream(cfg)
    pre, valid, test = split_stream(cfg, stream)
    out = prepare_run_dir(cfg, "online")
    if snapshot:
        state = build_state(cfg, stream)
        tensors, meta = load_tensors(snapshot)
        if meta.get("model", {}).get("model") != cfg.model.kind:
            raise ConfigError(f"snapshot model {meta.get('model')} does not match model.kind")
        same = meta.get("strategy") == state.strategy.name
        load_state_tensors(state, tensors, model_only=not same)
        state.history.extend(pre.t, pre.u, pre.i)
    else:
        state = _pretrain_state(cfg, stream, pre, out)
    # validation interactions are learned from prequentially but not reported
    run_online(state, valid, offset=len(pre))
    rows = run_online(state, test, offset=len(pre) + len(valid), out_dir=out)
    write_metrics_csv(rows, out / "metrics.csv")
    write_json(report(rows), out / "report.json")
    save_state(state, out / "final")
    return EXIT_OK


def cmd_analyze_rank(cfg: RunConfig, snapshot: str | None) -> int:
    stream = load_stream(cfg)
    out = prepare_run_dir(cfg, "analyze-rank")
    rc = cfg.rank
    rng = np.random.default_rng(cfg.seed)
    result: dict = {"structural": {}, "theorem1": []}
    snap = load_tensors(snapshot) if snapshot else None
    history = HistoryStore(stream.num_users, stream.num_items)
    history.extend(stream.t, stream.u, stream.i)
    heat = None
    for kind in ("default", "eals", "mwnet", "metasgd", "melon"):
        state = build_state(cfg, stream, kind)
        if snap is not None:
            tensors, meta = snap
            load_state_tensors(state, tensors, model_only=meta.get("strategy") != kind)
        state.history = history
        ratios = []
        for _ in range(rc.batches):
            rows = np.sort(rng.choice(len(stream), size=min(rc.batch_size, len(stream)), replace=False))
            batch = MiniBatch(stream.t[rows], stream.u[rows], stream.i[rows], rows.astype(np.int64))
            batch = with_negatives(batch, stream.num_items, 1, cfg.seed, TRAIN_TAG,
                                   history.items_seen_before)
            grads = state.model.per_interaction_grads(batch)
            W, _ = state.strategy.rates(RateContext(batch, grads, state.model, history, cfg.seed))
            M, _ = R.densified(state.strategy, W, grads.coords)
            ratios.append(R.spectrum(M).ratio(2))
            if kind == "melon" and heat is None:
                heat = M[: rc.heatmap_rows]
        ratios = np.asarray(ratios)
        result["structural"][kind] = {
            "sigma2_over_sigma1": ratios.tolist(),
            "max": float(ratios.max()), "min": float(ratios.min()),
            "rank1_fraction": float((ratios < 1e-10).mean()),
        }
    m, n = rc.shape
    for k in range(rc.trials):
        K = int(rc.ranks[k % len(rc.ranks)])
        W_star = R.planted(m, n, K, rng)
        rep = R.theorem1_check(W_star)
        rep.update({"trial": k, "K": K})
        result["theorem1"].append(rep)
    result["theorem1_pass_rate"] = float(np.mean([r["pass"] for r in result["theorem1"]]))
    write_json(result, out / "rank-report.json")
    if heat is not None:
        R.write_heatmap(heat, out / "w-heatmap.csv")
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    stream = load_stream(cfg)
    pre, valid, test = split_stream(cfg, stream)
    online = valid.concat(test)
    out = prepare_run_dir(cfg, "bench")
    results = {}
    for kind in cfg.bench.strategies:
        state = build_state(cfg, stream, kind)
        state.history.extend(pre.t, pre.u, pre.i)
        times = []
        for b, chunk in enumerate(chunks(online, cfg.train.batch_size, len(pre))):
            if b >= cfg.bench.warmup + cfg.bench.batches:
                break
            state.history.extend(chunk.t, chunk.u, chunk.i)
            batch = with_negatives(chunk, stream.num_items, cfg.train.train_negatives, cfg.seed,
                                   TRAIN_TAG, state.history.items_seen_before)
            t0 = time.perf_counter()
            train_step(state, batch)
            ms = (time.perf_counter() - t0) * 1e3
            if b >= cfg.bench.warmup:
                times.append(ms)
        if not times:
            raise DataError("not enough online batches to benchmark after warm-up")
        t = np.asarray(times)
        results[kind] = {"mean_ms": float(t.mean()), "median_ms": float(np.median(t)),
                         "p95_ms": float(np.percentile(t, 95)), "batches": len(t)}
        logger.info("%s: mean %.2f ms, median %.2f ms, p95 %.2f ms", kind, t.mean(),
                    np.median(t), np.percentile(t, 95))
    write_json(results, out / "bench.json")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="melon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML or JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--strategy", choices=["default", "eals", "mwnet", "metasgd", "melon"])
        p.add_argument("--model", choices=["bpr", "ncf"])
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("preprocess", help="load, filter and dump a dataset")).add_argument(
        "--input", help="raw CSV/TSV log (overrides data.path)")
    common(sub.add_parser("pretrain", help="offline pretraining"))
    common(sub.add_parser("online", help="prequential online run")).add_argument(
        "--snapshot", help="snapshot directory from pretrain")
    common(sub.add_parser("analyze-rank", help="learning-rate matrix rank analysis")).add_argument(
        "--snapshot", help="optional snapshot directory")
    common(sub.add_parser("bench", help="per-batch timing of update strategies"))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = override(load_config(args.config), seed=args.seed, strategy=args.strategy,
                       model=args.model, out=args.out)
        if args.command == "preprocess":
            return cmd_preprocess(cfg, args.input)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "online":
            return cmd_online(cfg, args.snapshot)
        if args.command == "analyze-rank":
            return cmd_analyze_rank(cfg, args.snapshot)
        return cmd_bench(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
