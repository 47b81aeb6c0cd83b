"""Offline pretraining and the three-step online loop.

Per incoming batch ``B_t`` (after evaluating the current model on it):

1. preliminary update: ``Theta~ = Theta_t + delta(B_last; phi_t)`` where
   ``B_last`` holds each row's previous interaction of the same user;
2. meta update: one Adam step of ``phi`` on the mean loss of ``B_t`` under
   ``Theta~``;
3. recommender update on ``B_t`` with rates from the updated ``phi``.

Strategies without meta parameters skip steps 1-2.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .dataset import EVAL_TAG, LAST_TAG, TRAIN_TAG, MiniBatch, Stream, draw_negatives
from .history import HistoryStore
from .metrics import KS, METRIC_NAMES, batch_ranks, metric_means
from .optim import Adam, LazyAdam
from .recommenders import InteractionGrads, Recommender
from .snapshot import save_tensors
from .strategies import RateContext, Strategy, apply_rates, update_delta

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "batch_size") + METRIC_NAMES + ("loss", "wall_ms")


class NumericError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    meta_lr: float = 1e-3
    meta_weight_decay: float = 1e-3
    batch_size: int = 256
    train_negatives: int = 1
    eval_negatives: int = 99
    seed: int = 0
    last_item_side: bool = False  # also use each item's previous interaction in B_last
    snapshot_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.train_negatives < 1 or self.eval_negatives < 1:
            raise ValueError("batch_size and negative counts must be >= 1")
        if self.lr <= 0 or self.meta_lr <= 0 or self.meta_weight_decay < 0:
            raise ValueError("learning rates must be positive, weight decay non-negative")


def chunks(stream: Stream, batch_size: int, offset: int = 0):
    """Chronological batches without negatives; ``index`` is the stream position + offset."""
    for start in range(0, len(stream), batch_size):
        sl = slice(start, start + batch_size)
        idx = np.arange(start, min(start + batch_size, len(stream)), dtype=np.int64) + offset
        yield MiniBatch(stream.t[sl], stream.u[sl], stream.i[sl], idx)


def with_negatives(batch: MiniBatch, num_items: int, k: int, seed: int, tag: int,
                   seen_before) -> MiniBatch:
    neg = draw_negatives(batch.t, batch.u, batch.i, batch.index, num_items, k, seed, tag, seen_before)
    return MiniBatch(batch.t, batch.u, batch.i, batch.index, neg)


def compact_union(*coord_blocks: np.ndarray):
    """Sorted unique coordinates plus each block re-indexed into that union."""
    union = np.unique(np.concatenate([c.ravel() for c in coord_blocks]))
    return union, [np.searchsorted(union, c) for c in coord_blocks]


@dataclass
class TrainState:
    model: Recommender
    strategy: Strategy
    history: HistoryStore
    config: TrainConfig
    meta_opt: Adam | None = None
    rec_opt: LazyAdam | None = None
    step: int = 0
    skipped_meta: int = 0
    log: list = field(default_factory=list)


def init_state(model: Recommender, strategy: Strategy, config: TrainConfig | None = None,
               history: HistoryStore | None = None) -> TrainState:
    cfg = config or TrainConfig()
    hist = history or HistoryStore(model.num_users, model.num_items)
    meta_opt = None
    if strategy.learned:
        meta_opt = Adam(strategy.phi, lr=cfg.meta_lr, weight_decay=cfg.meta_weight_decay)
    rec_opt = LazyAdam(model.params.size, lr=strategy.lr) if strategy.optimizer == "adam" else None
    return TrainState(model, strategy, hist, cfg, meta_opt, rec_opt)


# -- the three steps ----------------------------------------------------------


def _context(state: TrainState, batch: MiniBatch, grads: InteractionGrads) -> RateContext:
    return RateContext(batch, grads, state.model, state.history, state.config.seed)


def last_batch(state: TrainState, batch: MiniBatch, seed: int | None = None) -> MiniBatch:
    """``B_last`` for ``batch`` with one training negative per row."""
    last = state.history.last_interactions(batch, state.config.last_item_side)
    if len(last) == 0:
        return last
    keys = batch.index[last.index]
    tmp = MiniBatch(last.t, last.u, last.i, keys)
    seed = state.config.seed if seed is None else seed
    return with_negatives(tmp, state.model.num_items, state.config.train_negatives, seed,
                          LAST_TAG, state.history.items_seen_before)


def preliminary_update(state: TrainState, batch_last: MiniBatch) -> np.ndarray:
    """``Theta~`` as a fresh full vector; ``Theta_t`` is not modified."""
    theta = state.model.params.flat.copy()
    if len(batch_last) == 0:
        return theta
    grads = state.model.per_interaction_grads(batch_last)
    W, F = state.strategy.rates(_context(state, batch_last, grads))
    apply_rates(theta, grads, W, F)
    return theta


def meta_objective(state: TrainState, batch_last: MiniBatch, batch: MiniBatch,
                   phi: dict[str, np.ndarray] | None = None, grads_last: InteractionGrads | None = None):
    """Mean loss of ``batch`` under ``Theta~(phi)`` and its first-order gradient in ``phi``.

    Returns ``(loss, {name: grad})``. Only coordinates touched by ``B_last`` or
    ``B_t`` are materialized; everything else in ``Theta~`` equals ``Theta_t``.
    """
    model, strategy = state.model, state.strategy
    phi_vals = strategy.phi if phi is None else phi
    tape = Tape(checked=False)
    leaves = {k: tape.leaf(v, k) for k, v in phi_vals.items()}
    coords_t = model.batch_coords(batch)
    flat = model.params.flat
    if len(batch_last) == 0:
        P = tape.const(flat[coords_t])
    else:
        if grads_last is None:
            grads_last = model.per_interaction_grads(batch_last)
        W, F = strategy.rate_nodes(tape, leaves, _context(state, batch_last, grads_last))
        delta = update_delta(grads_last, W, F)
        union, (pos_last, pos_t) = compact_union(grads_last.coords, coords_t)
        D = ad.scatter_add(delta, pos_last, len(union))
        P = ad.take(D, pos_t) + flat[coords_t]
    loss = model.row_loss(P).mean()
    g = tape.backward(loss)
    return float(loss.value), {k: g[n] for k, n in leaves.items()}


def meta_update(state: TrainState, batch_last: MiniBatch, batch: MiniBatch) -> float | None:
    """One meta-optimizer step on ``phi``; returns the pre-step meta loss (None if skipped)."""
    if not state.strategy.learned or len(batch_last) == 0:
        return None
    loss, grads = meta_objective(state, batch_last, batch)
    if not (np.isfinite(loss) and all(np.isfinite(g).all() for g in grads.values())):
        state.skipped_meta += 1
        logger.warning("non-finite meta-gradient at step %d; meta step skipped", state.step)
        return None
    state.meta_opt.step(state.strategy.phi, grads)
    return loss


def recommender_update(state: TrainState, batch: MiniBatch,
                       grads: InteractionGrads | None = None) -> InteractionGrads:
    """Apply the strategy's W (from the current phi) to ``Theta`` in place."""
    model, strategy = state.model, state.strategy
    if grads is None:
        grads = model.per_interaction_grads(batch)
    W, F = strategy.rates(_context(state, batch, grads))
    if state.rec_opt is None:
        apply_rates(model.params.flat, grads, W, F)
        return grads
    # Adam-driven strategies: the W-weighted gradient, normalized to mean-gradient
    # scale, drives Adam; the total rate relative to lr/n scales its step size.
    uniq, inv = np.unique(grads.coords, return_inverse=True)
    wg = (W * grads.grads).ravel()
    ok = np.isfinite(wg)
    if not ok.all():
        logger.warning("skipping %d non-finite update entries", int((~ok).sum()))
    G = np.bincount(inv.ravel()[ok], weights=wg[ok], minlength=len(uniq))
    scale = float(W[:, 0].sum()) / strategy.lr
    base = state.rec_opt.lr
    state.rec_opt.lr = base * scale
    try:
        state.rec_opt.step(model.params.flat, uniq, G / (strategy.lr * max(scale, 1e-300)))
    finally:
        state.rec_opt.lr = base
    return grads


def train_step(state: TrainState, batch: MiniBatch, batch_last: MiniBatch | None = None) -> dict:
    """Steps 1-3 on a batch that already carries training negatives."""
    meta_loss = None
    if state.strategy.learned:
        if batch_last is None:
            batch_last = last_batch(state, batch)
        meta_loss = meta_update(state, batch_last, batch)
    grads = recommender_update(state, batch)
    state.step += 1
    return {"loss": float(grads.losses.mean()), "meta_loss": meta_loss}


# -- loops -------------------------------------------------------------------


def _epoch_seed(seed: int, epoch: int) -> int:
    return (int(seed) * 1_000_003 + 7919 * (epoch + 1)) & 0xFFFFFFFF


def pretrain(state: TrainState, stream: Stream, epochs: int, update_recommender: bool = True,
             out_dir: str | Path | None = None) -> TrainState:
    """Shuffled-batch training on ``stream`` with the same three-step loop.

    ``B_last`` for a shuffled batch is each row's previous interaction in the
    pretraining stream. With ``update_recommender=False`` only the meta
    parameters move (used to pretrain a meta-model on a fixed recommender).
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs and len(stream) == 0:
        raise ValueError("empty pretraining stream")
    cfg = state.config
    state.history.extend(stream.t, stream.u, stream.i)
    seen = state.history.items_seen_before
    for epoch in range(epochs):
        seed_e = _epoch_seed(cfg.seed, epoch)
        order = np.random.default_rng(seed_e).permutation(len(stream))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            b = MiniBatch(stream.t[idx], stream.u[idx], stream.i[idx], idx.astype(np.int64))
            b = with_negatives(b, state.model.num_items, cfg.train_negatives, seed_e, TRAIN_TAG, seen)
            if update_recommender:
                info = train_step(state, b, last_batch(state, b, seed_e) if state.strategy.learned else None)
                loss = info["loss"]
            else:
                meta_update(state, last_batch(state, b, seed_e), b)
                loss = float(state.model.loss(b.u, b.i, b.neg[:, 0]).mean())
                state.step += 1
            if not np.isfinite(loss):
                if out_dir is not None:
                    save_state(state, Path(out_dir) / "diverged")
                raise NumericError(f"non-finite training loss in epoch {epoch} at step {state.step}")
            losses.append(loss)
        state.log.append({"epoch": epoch, "loss": float(np.mean(losses))})
        logger.info("pretrain epoch %d loss %.6f", epoch, state.log[-1]["loss"])
    return state


def run_online(state: TrainState, stream: Stream, offset: int = 0, train: bool = True,
               out_dir: str | Path | None = None, capture=None) -> list[dict]:
    """Prequential pass over ``stream``: evaluate each batch, then learn from it.

    ``offset`` is the stream's position in the full dataset (seeding keys).
    ``capture(state, batch, grads, W)`` is called before each recommender update.
    """
    cfg = state.config
    hist = state.history
    rows = []
    for chunk in chunks(stream, cfg.batch_size, offset):
        t0 = time.perf_counter()
        hist.extend(chunk.t, chunk.u, chunk.i)
        seen = hist.items_seen_before
        eval_neg = draw_negatives(chunk.t, chunk.u, chunk.i, chunk.index, state.model.num_items,
                                  cfg.eval_negatives, cfg.seed, EVAL_TAG, seen)
        metrics = metric_means(batch_ranks(state.model, chunk, eval_neg), KS)
        batch = with_negatives(chunk, state.model.num_items, cfg.train_negatives, cfg.seed, TRAIN_TAG, seen)
        if train:
            if capture is not None:
                grads = state.model.per_interaction_grads(batch)
                W, _ = state.strategy.rates(_context(state, batch, grads))
                capture(state, batch, grads, W)
            loss = train_step(state, batch)["loss"]
        else:
            loss = float(state.model.loss(batch.u, batch.i, batch.neg[:, 0]).mean())
            state.step += 1
        if not np.isfinite(loss):
            raise NumericError(f"non-finite online loss at step {state.step}")
        row = {"step": state.step, "batch_size": len(chunk), **metrics, "loss": loss,
               "wall_ms": (time.perf_counter() - t0) * 1e3}
        rows.append(row)
        if out_dir is not None and cfg.snapshot_every and state.step % cfg.snapshot_every == 0:
            save_state(state, Path(out_dir) / f"snapshot-{state.step:06d}")
    return rows


# -- outputs -----------------------------------------------------------------


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def report(rows: list[dict]) -> dict:
    """Mean of every metrics column over all online batches."""
    if not rows:
        return {"num_batches": 0}
    out = {k: float(np.mean([r[k] for r in rows])) for k in CSV_COLUMNS if k != "step"}
    out["num_batches"] = len(rows)
    return out


def save_state(state: TrainState, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    tensors = {f"model.{k}": v for k, v in state.model.params.tensors().items()}
    tensors.update({f"phi.{k}": v for k, v in state.strategy.phi.items()})
    if state.meta_opt is not None:
        tensors.update({f"meta_opt.{k}": v for k, v in state.meta_opt.state().items()})
    if state.rec_opt is not None:
        tensors.update({f"rec_opt.{k}": v for k, v in state.rec_opt.state().items()})
    meta = {
        "model": state.model.config(),
        "strategy": state.strategy.name,
        "train": asdict(state.config),
        "step": state.step,
    }
    if hasattr(state.strategy, "config"):
        meta["melon"] = asdict(state.strategy.config)
    return save_tensors(out, tensors, meta)


def load_state_tensors(state: TrainState, tensors: dict[str, np.ndarray], step: int = 0,
                       model_only: bool = False) -> None:
    state.model.params.load({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    if state.rec_opt is not None and "rec_opt.m" in tensors:
        state.rec_opt.load({k[8:]: v for k, v in tensors.items() if k.startswith("rec_opt.")})
    if model_only:
        return
    for k in state.strategy.phi:
        key = f"phi.{k}"
        if key in tensors:
            state.strategy.phi[k][...] = tensors[key]
    if state.meta_opt is not None and any(k.startswith("meta_opt.") for k in tensors):
        state.meta_opt.load({k[9:]: v for k, v in tensors.items() if k.startswith("meta_opt.")})
    state.step = step


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
