"""MeLON meta-model: one learning rate per (interaction, parameter) pair.

Pipeline for a batch of interactions and their dependent coordinates:

1. interaction representation ``h_x`` from attention-extended user and item
   embeddings over each side's sampled history;
2. role representation ``h_theta`` of every coordinate from its value, the
   interaction loss and its gradient (log-magnitude / sign preprocessed);
3. ``w = sigmoid(W_lr [h_x, h_theta] + b_lr)``, plus an optional forget gate
   ``f = sigmoid(W_f [h_x, h_theta] + b_f)``.

``mode`` selects the full two-directional model (``"2d"``) or the ablations
that drop parameter-wise inputs (``"interaction"``) or interaction-wise
inputs (``"parameter"``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .recommenders import InteractionGrads

MODES = ("2d", "interaction", "parameter")
MASK_LOGIT = -1e9


@dataclass
class MeLONConfig:
    dim: int = 32
    repr_dim: int | None = None  # defaults to dim
    role_layers: int = 2
    p: float = 10.0
    neighbor_cap: int = 10
    forget_gate: bool = True
    mode: str = "2d"
    lr_bias_init: float = -4.0
    forget_bias_init: float = 7.0
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.repr_dim is None:
            self.repr_dim = self.dim
        if self.role_layers < 1 or self.p <= 0:
            raise ValueError("role_layers >= 1 and p > 0 required")


def preprocess(v, p: float = 10.0) -> np.ndarray:
    """Split ``v`` into a (log-magnitude, sign) pair scaled into [-1, 1]."""
    v = np.asarray(v, dtype=np.float64)
    a = np.abs(v)
    big = a >= np.exp(-p)
    with np.errstate(divide="ignore"):
        mag = np.where(big, np.log(np.where(big, a, 1.0)) / p, -1.0)
    sgn = np.where(big, np.sign(v), np.exp(p) * v)
    return np.stack([mag, sgn], axis=-1)


def attention_weights(center: Node, neighbors: Node, a: Node, mask=None,
                      slope: float = 0.2) -> Node:
    """Attention of ``center`` (n, d) over ``neighbors`` (n, c, d), softmaxed over c."""
    n, c, d = neighbors.shape
    s_center = center @ a[:d]  # (n, 1)
    s_nb = (neighbors @ a[d:]).reshape(n, c)
    logits = ad.leaky_relu(s_center + s_nb, slope)
    if mask is not None:
        logits = logits + np.where(mask, 0.0, MASK_LOGIT)
    return ad.softmax(logits, axis=1)


def extended_embedding(center: Node, neighbors: Node, mask: np.ndarray, a: Node,
                       W: Node, b: Node, slope: float = 0.2) -> Node:
    """``relu([e_self, sum_k alpha_k e_k] @ W + b)``; empty history aggregates to zero."""
    n, c, d = neighbors.shape
    tape = center.tape
    if c == 0:
        agg = tape.const(np.zeros((n, d)))
    else:
        alpha = attention_weights(center, neighbors, a, mask, slope)
        has = mask.any(axis=1, keepdims=True).astype(np.float64)
        agg = (alpha.reshape(n, c, 1) * neighbors).sum(axis=1) * has
    return ad.relu(ad.concat([center, agg], axis=1) @ W + b)


def mlp(x: Node, layers: list[tuple[Node, Node]]) -> Node:
    for W, b in layers:
        x = ad.relu(x @ W + b)
    return x


def apply_update(theta, w, grad, forget=None):
    """``theta - w * grad``, or ``f * theta - w * grad`` with a forget rate."""
    theta = np.asarray(theta, dtype=np.float64)
    keep = theta if forget is None else np.asarray(forget) * theta
    return keep - np.asarray(w) * np.asarray(grad)


@dataclass
class RateInputs:
    """Everything the meta-model reads for one batch (all treated as constants)."""

    grads: InteractionGrads
    user_self: np.ndarray  # (n, d)
    user_nb: np.ndarray  # (n, c, d) item embeddings from the user's history
    user_mask: np.ndarray  # (n, c)
    item_self: np.ndarray
    item_nb: np.ndarray  # user embeddings from the item's history
    item_mask: np.ndarray


def _pad(lists: list[np.ndarray], table: np.ndarray, cap: int):
    n, d = len(lists), table.shape[1]
    c = min(cap, max((len(x) for x in lists), default=0))
    nb = np.zeros((n, c, d))
    mask = np.zeros((n, c), dtype=bool)
    for r, ids in enumerate(lists):
        k = len(ids)
        if k:
            nb[r, :k] = table[ids]
            mask[r, :k] = True
    return nb, mask


def gather_inputs(batch, grads: InteractionGrads, user_table: np.ndarray,
                  item_table: np.ndarray, history, cap: int, seed: int) -> RateInputs:
    """Collect embeddings and capped, seeded neighbor samples for every row."""
    ulists, ilists = [], []
    for t, u, i in zip(batch.t.tolist(), batch.u.tolist(), batch.i.tolist()):
        if history is None:
            ulists.append(np.zeros(0, dtype=np.int64))
            ilists.append(np.zeros(0, dtype=np.int64))
        else:
            ulists.append(history.user_history(u, t, cap, seed))
            ilists.append(history.item_history(i, t, cap, seed))
    user_nb, user_mask = _pad(ulists, item_table, cap)
    item_nb, item_mask = _pad(ilists, user_table, cap)
    return RateInputs(
        grads,
        user_table[batch.u].copy(), user_nb, user_mask,
        item_table[batch.i].copy(), item_nb, item_mask,
    )


class MeLON:
    """Meta-model parameters plus the tape-level forward that emits rates."""

    def __init__(self, config: MeLONConfig | None = None, **kw):
        self.config = config or MeLONConfig(**kw)
        self.params = self._init_params(np.random.default_rng(self.config.seed))

    def _init_params(self, rng) -> dict[str, np.ndarray]:
        cfg = self.config
        d, r = cfg.dim, cfg.repr_dim

        def glorot(a, b):
            lim = np.sqrt(6.0 / (a + b))
            return rng.uniform(-lim, lim, size=(a, b))

        P: dict[str, np.ndarray] = {}
        if cfg.mode != "parameter":
            P["att_user"] = glorot(2 * d, 1)
            P["att_item"] = glorot(2 * d, 1)
            P["ext_user.weight"] = glorot(2 * d, d)
            P["ext_user.bias"] = np.zeros(d)
            P["ext_item.weight"] = glorot(2 * d, d)
            P["ext_item.bias"] = np.zeros(d)
            P["inter.weight"] = glorot(2 * d, r)
            P["inter.bias"] = np.zeros(r)
        width = 2 if cfg.mode == "interaction" else 6
        for k in range(cfg.role_layers):
            P[f"role.{k}.weight"] = glorot(width if k == 0 else r, r)
            P[f"role.{k}.bias"] = np.zeros(r)
        head_in = r if cfg.mode == "parameter" else 2 * r
        P["lr.weight"] = glorot(head_in, 1)
        P["lr.bias"] = np.full(1, cfg.lr_bias_init)
        if cfg.forget_gate:
            P["forget.weight"] = glorot(head_in, 1)
            P["forget.bias"] = np.full(1, cfg.forget_bias_init)
        return P

    # -- tape forward -----------------------------------------------------

    def leaves(self, tape: Tape, params: dict[str, np.ndarray] | None = None) -> dict[str, Node]:
        src = self.params if params is None else params
        return {k: tape.leaf(v, k) for k, v in src.items()}

    def interaction_repr(self, phi: dict[str, Node], inp: RateInputs) -> Node:
        tape = phi["lr.bias"].tape
        slope = self.config.leaky_slope
        eu = extended_embedding(
            tape.const(inp.user_self), tape.const(inp.user_nb), inp.user_mask,
            phi["att_user"], phi["ext_user.weight"], phi["ext_user.bias"], slope,
        )
        ei = extended_embedding(
            tape.const(inp.item_self), tape.const(inp.item_nb), inp.item_mask,
            phi["att_item"], phi["ext_item.weight"], phi["ext_item.bias"], slope,
        )
        return ad.relu(ad.concat([eu, ei], axis=1) @ phi["inter.weight"] + phi["inter.bias"])

    def role_repr(self, phi: dict[str, Node], features: Node) -> Node:
        layers = [
            (phi[f"role.{k}.weight"], phi[f"role.{k}.bias"])
            for k in range(self.config.role_layers)
        ]
        return mlp(features, layers)

    def rate_nodes(self, phi: dict[str, Node], inp: RateInputs) -> tuple[Node, Node | None]:
        """Learning rates (n, k) and forget rates (n, k) or None."""
        cfg = self.config
        tape = phi["lr.bias"].tape
        g = inp.grads
        n, k = g.coords.shape
        r = cfg.repr_dim
        heads = ["lr"] + (["forget"] if cfg.forget_gate else [])
        out: dict[str, Node] = {}

        if cfg.mode == "parameter":
            # column-wise inputs only: parameter value, batch loss, batch-mean gradient
            uniq, inv = np.unique(g.coords, return_inverse=True)
            inv = inv.reshape(n, k)
            cnt = np.bincount(inv.ravel(), minlength=len(uniq))
            gbar = np.bincount(inv.ravel(), weights=g.grads.ravel(), minlength=len(uniq)) / cnt
            vals = np.zeros(len(uniq))
            vals[inv.ravel()] = g.values.ravel()
            lbar = np.full(len(uniq), g.losses.mean())
            feats = np.concatenate([preprocess(vals, cfg.p), preprocess(lbar, cfg.p),
                                    preprocess(gbar, cfg.p)], axis=1)
            h = self.role_repr(phi, tape.const(feats))
            for name in heads:
                w = ad.sigmoid(h @ phi[f"{name}.weight"] + phi[f"{name}.bias"])
                out[name] = ad.take(w, inv)
            return out["lr"], out.get("forget")

        h_x = self.interaction_repr(phi, inp)  # (n, r)
        if cfg.mode == "interaction":
            feats = preprocess(g.losses, cfg.p)  # (n, 2)
            h_l = self.role_repr(phi, tape.const(feats))
            for name in heads:
                Wh = phi[f"{name}.weight"]
                z = h_x @ Wh[:r] + h_l @ Wh[r:] + phi[f"{name}.bias"]
                out[name] = ad.broadcast(ad.sigmoid(z), (n, k))
            return out["lr"], out.get("forget")

        loss_b = np.broadcast_to(g.losses[:, None], (n, k))
        feats = np.concatenate(
            [preprocess(g.values, cfg.p), preprocess(loss_b, cfg.p), preprocess(g.grads, cfg.p)],
            axis=2,
        ).reshape(n * k, 6)
        h_theta = self.role_repr(phi, tape.const(feats))  # (n*k, r)
        for name in heads:
            Wh = phi[f"{name}.weight"]
            zx = h_x @ Wh[:r]  # (n, 1)
            zt = (h_theta @ Wh[r:]).reshape(n, k)
            out[name] = ad.sigmoid(zx + zt + phi[f"{name}.bias"])
        return out["lr"], out.get("forget")

    def rates(self, inp: RateInputs) -> tuple[np.ndarray, np.ndarray | None]:
        tape = Tape(checked=False)
        W, F = self.rate_nodes(self.leaves(tape), inp)
        return W.value, None if F is None else F.value

    def state(self) -> dict:
        return asdict(self.config)
