"""Update strategies as producers of the learning-rate matrix W.

A strategy maps a batch (and its per-interaction gradients) to a sparse
``(n, k)`` block of rates aligned with ``InteractionGrads.coords``. The
recommender step is then ``theta[m] -= sum_x W[x, m] * dL(x)/dtheta[m]``.

* ``default``  - every entry ``lr / n``
* ``eals``     - every entry ``c * lr / n`` (constant boost for new data)
* ``mwnet``    - row ``x`` gets ``lr * net(loss_x)`` from a learned weight net
* ``metasgd``  - column ``m`` gets a learned positive rate ``softplus(rho_m)``
* ``melon``    - one rate per (interaction, coordinate) from the meta-model
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .dataset import MiniBatch
from .meta import MeLON, MeLONConfig, gather_inputs
from .recommenders import InteractionGrads, Recommender

logger = logging.getLogger(__name__)

KINDS = ("default", "eals", "mwnet", "metasgd", "melon")


@dataclass
class RateContext:
    batch: MiniBatch
    grads: InteractionGrads
    model: Recommender
    history: object | None = None
    seed: int = 0


class Strategy:
    name = "base"
    learned = False  # True when phi is meta-trained through the three-step loop

    def __init__(self, lr: float = 1e-3, optimizer: str = "sgd"):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {optimizer!r}")
        self.lr = lr
        self.optimizer = optimizer
        self.phi: dict[str, np.ndarray] = {}

    def rate_nodes(self, tape: Tape, phi: dict[str, Node], ctx: RateContext):
        raise NotImplementedError

    def rates(self, ctx: RateContext) -> tuple[np.ndarray, np.ndarray | None]:
        tape = Tape(checked=False)
        phi = {k: tape.leaf(v, k) for k, v in self.phi.items()}
        W, F = self.rate_nodes(tape, phi, ctx)
        return W.value, None if F is None else F.value

    def densify(self, W: np.ndarray, coords: np.ndarray, columns: np.ndarray) -> np.ndarray:
        """Dense (n, len(columns)) rates over the flat coordinates ``columns``.

        Entries for parameters a row does not depend on are filled with the
        strategy's own structure (row-constant here), so no rank is invented.
        """
        return np.repeat(W[:, :1], len(columns), axis=1)


class Default(Strategy):
    name = "default"

    def rate_nodes(self, tape, phi, ctx):
        n, k = ctx.grads.coords.shape
        return tape.const(np.full((n, k), self.lr / n)), None


def default_rates(n: int, lr: float, size: int = 1) -> np.ndarray:
    if n < 1 or lr <= 0:
        raise ValueError("n >= 1 and lr > 0 required")
    return np.full((n, size), lr / n)


class EALS(Strategy):
    name = "eals"

    def __init__(self, lr: float = 1e-3, optimizer: str = "sgd", boost: float = 4.0):
        super().__init__(lr, optimizer)
        if boost <= 0:
            raise ValueError("boost must be positive")
        self.boost = boost

    def rate_nodes(self, tape, phi, ctx):
        n, k = ctx.grads.coords.shape
        return tape.const(np.full((n, k), self.boost * self.lr / n)), None


def eals_rates(n: int, lr: float, boost: float, size: int = 1) -> np.ndarray:
    return np.full((n, size), boost * lr / n)


class MWNet(Strategy):
    """Loss -> importance weight net (one hidden ReLU layer, sigmoid output)."""

    name = "mwnet"
    learned = True

    def __init__(self, lr: float = 1e-3, optimizer: str = "sgd", hidden: int = 100, seed: int = 0):
        super().__init__(lr, optimizer)
        rng = np.random.default_rng(seed)
        lim1 = np.sqrt(6.0 / (1 + hidden))
        self.phi = {
            "w1": rng.uniform(-lim1, lim1, (1, hidden)),
            "b1": np.zeros(hidden),
            "w2": rng.uniform(-lim1, lim1, (hidden, 1)),
            "b2": np.zeros(1),
        }

    def importance(self, phi: dict[str, Node], losses: np.ndarray) -> Node:
        tape = phi["w1"].tape
        x = tape.const(np.asarray(losses, dtype=np.float64).reshape(-1, 1))
        h = ad.relu(x @ phi["w1"] + phi["b1"])
        return ad.sigmoid(h @ phi["w2"] + phi["b2"])  # (n, 1)

    def rate_nodes(self, tape, phi, ctx):
        n, k = ctx.grads.coords.shape
        return ad.broadcast(self.importance(phi, ctx.grads.losses) * self.lr, (n, k)), None


class MetaSGD(Strategy):
    """One learned positive rate per parameter coordinate."""

    name = "metasgd"
    learned = True

    def __init__(self, num_params: int, lr: float = 1e-3):
        super().__init__(lr, "sgd")
        self.phi = {"rho": np.full(num_params, np.log(np.expm1(lr)))}

    def rate_nodes(self, tape, phi, ctx):
        return ad.softplus(ad.take(phi["rho"], ctx.grads.coords)), None

    def densify(self, W, coords, columns):
        r = np.logaddexp(0.0, self.phi["rho"][np.asarray(columns)])
        return np.broadcast_to(r, (len(W), len(r))).copy()


class MeLONStrategy(Strategy):
    name = "melon"
    learned = True

    def __init__(self, config: MeLONConfig | None = None, lr: float = 1e-3, **kw):
        super().__init__(lr, "sgd")
        self.meta = MeLON(config or MeLONConfig(**kw))
        self.phi = self.meta.params

    @property
    def config(self) -> MeLONConfig:
        return self.meta.config

    def inputs(self, ctx: RateContext):
        U, I = ctx.model.embedding_tables()
        return gather_inputs(ctx.batch, ctx.grads, U, I, ctx.history,
                             self.config.neighbor_cap, ctx.seed)

    def rate_nodes(self, tape, phi, ctx):
        return self.meta.rate_nodes(phi, self.inputs(ctx))

    def densify(self, W, coords, columns):
        """Dependent entries from the meta-model, zeros elsewhere."""
        columns = np.asarray(columns)
        out = np.zeros((len(W), len(columns)))
        pos = np.searchsorted(columns, coords)
        pos = np.minimum(pos, len(columns) - 1)
        hit = columns[pos] == coords
        rows = np.broadcast_to(np.arange(len(W))[:, None], coords.shape)
        out[rows[hit], pos[hit]] = W[hit]
        return out


def make_strategy(kind: str, model: Recommender, lr: float = 1e-3, optimizer: str = "sgd",
                  seed: int = 0, eals_boost: float = 4.0, mwnet_hidden: int = 100,
                  melon: MeLONConfig | dict | None = None) -> Strategy:
    if kind == "default":
        return Default(lr, optimizer)
    if kind == "eals":
        return EALS(lr, optimizer, eals_boost)
    if kind == "mwnet":
        return MWNet(lr, optimizer, mwnet_hidden, seed)
    if kind == "metasgd":
        return MetaSGD(model.params.size, lr)
    if kind == "melon":
        if isinstance(melon, dict):
            melon = MeLONConfig(**melon)
        cfg = melon or MeLONConfig(dim=model.dim, seed=seed)
        if cfg.dim != model.dim:
            raise ValueError(f"meta-model dim {cfg.dim} != recommender dim {model.dim}")
        return MeLONStrategy(cfg, lr)
    raise ValueError(f"unknown strategy {kind!r}; expected one of {KINDS}")


def update_delta(grads: InteractionGrads, W, F=None):
    """Per-entry parameter change ``-W*g`` (plus ``(F-1)*theta`` with a forget gate).

    Works on arrays or tape nodes.
    """
    delta = -(W * grads.grads)
    if F is not None:
        delta = delta + (F - 1.0) * grads.values
    return delta


def apply_rates(theta: np.ndarray, grads: InteractionGrads, W: np.ndarray,
                F: np.ndarray | None = None) -> int:
    """Apply the sparse update in place; returns the number of skipped entries."""
    delta = update_delta(grads, W, F)
    ok = np.isfinite(grads.grads) & np.isfinite(delta)
    skipped = int(ok.size - ok.sum())
    if skipped:
        logger.warning("skipping %d non-finite update entries", skipped)
        np.add.at(theta, grads.coords[ok], delta[ok])
    else:
        np.add.at(theta, grads.coords.ravel(), delta.ravel())
    return skipped


def apply(strategy: Strategy, batch: MiniBatch, model: Recommender, history=None,
          seed: int = 0) -> dict:
    """One W-weighted SGD step of ``model`` on ``batch``."""
    grads = model.per_interaction_grads(batch)
    W, F = strategy.rates(RateContext(batch, grads, model, history, seed))
    skipped = apply_rates(model.params.flat, grads, W, F)
    return {"loss": float(grads.losses.mean()), "skipped": skipped}
