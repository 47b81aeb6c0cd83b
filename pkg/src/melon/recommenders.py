"""BPR and NCF recommenders trained with a pairwise ranking loss.

Both models read their parameters through per-row *gathers*: for a batch of
(user, positive, negative) rows, ``coords(...)`` returns an ``(n, k)`` array of
flat indices into the parameter vector and the loss is computed from the
gathered ``(n, k)`` block. The adjoint of that block is therefore the
per-interaction gradient restricted to the interaction's dependent parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape


class ParamStore:
    """Named tensors backed by one contiguous float64 vector."""

    def __init__(self, specs: Sequence[tuple[str, tuple[int, ...]]]):
        self.registry: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in specs:
            if name in self.registry:
                raise ValueError(f"duplicate parameter {name!r}")
            shape = tuple(int(s) for s in shape)
            self.registry[name] = (offset, shape)
            offset += int(np.prod(shape))
        self.flat = np.zeros(offset)

    @property
    def size(self) -> int:
        return self.flat.size

    @property
    def names(self) -> list[str]:
        return list(self.registry)

    def range(self, name: str) -> tuple[int, int]:
        off, shape = self.registry[name]
        return off, off + int(np.prod(shape))

    def view(self, name: str) -> np.ndarray:
        off, shape = self.registry[name]
        return self.flat[off : off + int(np.prod(shape))].reshape(shape)

    def locate(self, index: int) -> tuple[str, int]:
        """Parameter name and offset within it for a flat coordinate."""
        for name, (off, shape) in self.registry.items():
            if off <= index < off + int(np.prod(shape)):
                return name, index - off
        raise IndexError(index)

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: self.view(n).copy() for n in self.registry}

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        for name, val in tensors.items():
            if name not in self.registry:
                raise KeyError(f"unknown parameter {name!r}")
            dst = self.view(name)
            if dst.shape != val.shape:
                raise ValueError(f"{name}: shape {val.shape} != {dst.shape}")
            dst[...] = val

    def copy(self) -> "ParamStore":
        new = ParamStore.__new__(ParamStore)
        new.registry = dict(self.registry)
        new.flat = self.flat.copy()
        return new


@dataclass
class InteractionGrads:
    """Per-row loss and sparse gradient over each row's dependent slice."""

    coords: np.ndarray  # (n, k) flat parameter indices
    values: np.ndarray  # (n, k) parameter values at those indices
    grads: np.ndarray  # (n, k)
    losses: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.losses)

    def dense(self, size: int) -> np.ndarray:
        """Per-row gradients scattered to full (n, M) rows."""
        out = np.zeros((len(self), size))
        rows = np.repeat(np.arange(len(self)), self.coords.shape[1])
        np.add.at(out, (rows, self.coords.ravel()), self.grads.ravel())
        return out


def ranking_loss(diff: Node) -> Node:
    """``-log sigmoid(diff)`` written as ``softplus(-diff)`` to avoid overflow."""
    return ad.softplus(-diff)


def ranking_loss_value(diff) -> np.ndarray:
    return np.logaddexp(0.0, -np.asarray(diff, dtype=np.float64))


class Recommender:
    kind = "base"
    params: ParamStore
    dim: int
    num_users: int
    num_items: int

    # subclasses implement: coords, row_loss, score, embedding_tables, config
    def coords(self, users, pos, neg) -> np.ndarray:
        raise NotImplementedError

    def row_loss(self, P: Node) -> Node:
        raise NotImplementedError

    def score(self, users, items) -> np.ndarray:
        raise NotImplementedError

    def embedding_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """(user table, item table) used as node features by the meta-model."""
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError

    def _check_ids(self, users, items) -> None:
        users = np.asarray(users)
        items = np.asarray(items)
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise IndexError("unknown user id")
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError("unknown item id")

    def batch_coords(self, batch) -> np.ndarray:
        return self.coords(batch.u, batch.i, batch.neg[:, 0])

    def loss(self, users, pos, neg) -> np.ndarray:
        diff = self.score(users, pos) - self.score(users, neg)
        return ranking_loss_value(diff)

    def per_interaction_grads(self, batch, theta: np.ndarray | None = None) -> InteractionGrads:
        """Loss and dependent-slice gradient for every row of ``batch``."""
        if len(batch) == 0:
            raise ValueError("per_interaction_grads on an empty batch")
        flat = self.params.flat if theta is None else theta
        coords = self.batch_coords(batch)
        tape = Tape(checked=False)
        P = tape.leaf(flat[coords])
        losses = self.row_loss(P)
        g = tape.backward(losses.sum())
        return InteractionGrads(coords, P.value, g[P], losses.value.copy())

    def dense_loss(self, tape: Tape, theta: Node, batch) -> Node:
        """Summed batch loss as a function of the full parameter vector."""
        coords = self.batch_coords(batch)
        return self.row_loss(ad.take(theta, coords)).sum()


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class BPR(Recommender):
    """Matrix factorisation scored by ``dot(e_u, e_i)``."""

    kind = "bpr"

    def __init__(self, num_users: int, num_items: int, dim: int = 32, seed: int = 0,
                 init_std: float = 0.01):
        self.num_users, self.num_items, self.dim = num_users, num_items, dim
        self.seed = seed
        self.params = ParamStore([("user_emb", (num_users, dim)), ("item_emb", (num_items, dim))])
        rng = np.random.default_rng(seed)
        self.params.view("user_emb")[...] = rng.normal(0.0, init_std, (num_users, dim))
        self.params.view("item_emb")[...] = rng.normal(0.0, init_std, (num_items, dim))

    def config(self) -> dict:
        return {"model": "bpr", "num_users": self.num_users, "num_items": self.num_items,
                "dim": self.dim, "seed": self.seed}

    def embedding_tables(self):
        return self.params.view("user_emb"), self.params.view("item_emb")

    def coords(self, users, pos, neg) -> np.ndarray:
        self._check_ids(users, np.concatenate([np.ravel(pos), np.ravel(neg)]))
        d = self.dim
        ar = np.arange(d)
        ub = self.params.range("user_emb")[0]
        ib = self.params.range("item_emb")[0]
        u = ub + np.asarray(users)[:, None] * d + ar
        p = ib + np.asarray(pos)[:, None] * d + ar
        q = ib + np.asarray(neg)[:, None] * d + ar
        return np.concatenate([u, p, q], axis=1)

    def row_loss(self, P: Node) -> Node:
        d = self.dim
        eu, ep, en = P[:, :d], P[:, d : 2 * d], P[:, 2 * d :]
        return ranking_loss((eu * ep).sum(axis=1) - (eu * en).sum(axis=1))

    def score(self, users, items) -> np.ndarray:
        """Scores for broadcast-compatible ``users``/``items`` index arrays."""
        users, items = np.asarray(users), np.asarray(items)
        self._check_ids(users, items)
        U, I = self.embedding_tables()
        return np.einsum("...d,...d->...", U[users], I[items])

    def bpr_score(self, u: int, i: int) -> float:
        return float(self.score(np.array(u), np.array(i)))


class NCF(Recommender):
    """GMF branch + MLP tower fused by a final linear layer (raw logit out).

    ``tower`` lists the MLP widths starting with its input width, which must
    equal ``2 * dim``.
    """

    kind = "ncf"

    def __init__(self, num_users: int, num_items: int, dim: int = 32,
                 tower: Sequence[int] = (64, 32, 16), seed: int = 0, init_std: float = 0.01):
        tower = tuple(int(w) for w in tower)
        if len(tower) < 2 or tower[0] != 2 * dim:
            raise ValueError(f"tower must start at 2*dim={2 * dim}, got {tower}")
        self.num_users, self.num_items, self.dim, self.tower = num_users, num_items, dim, tower
        self.seed = seed
        specs = [
            ("gmf_user", (num_users, dim)),
            ("gmf_item", (num_items, dim)),
            ("mlp_user", (num_users, dim)),
            ("mlp_item", (num_items, dim)),
        ]
        self.layers = []
        for k, (a, b) in enumerate(zip(tower[:-1], tower[1:])):
            specs += [(f"mlp.{k}.weight", (a, b)), (f"mlp.{k}.bias", (b,))]
            self.layers.append((f"mlp.{k}.weight", f"mlp.{k}.bias", a, b))
        specs += [("out.weight", (dim + tower[-1], 1)), ("out.bias", (1,))]
        self.params = ParamStore(specs)

        rng = np.random.default_rng(seed)
        for name in ("gmf_user", "gmf_item", "mlp_user", "mlp_item"):
            v = self.params.view(name)
            v[...] = rng.normal(0.0, init_std, v.shape)
        for wname, _, a, b in self.layers:
            self.params.view(wname)[...] = _glorot(rng, a, b)
        self.params.view("out.weight")[...] = _glorot(rng, dim + tower[-1], 1)

        lo = self.params.range("mlp.0.weight")[0]
        self._dense = np.arange(lo, self.params.size)

    def config(self) -> dict:
        return {"model": "ncf", "num_users": self.num_users, "num_items": self.num_items,
                "dim": self.dim, "tower": list(self.tower), "seed": self.seed}

    def embedding_tables(self):
        return self.params.view("gmf_user"), self.params.view("gmf_item")

    def coords(self, users, pos, neg) -> np.ndarray:
        self._check_ids(users, np.concatenate([np.ravel(pos), np.ravel(neg)]))
        d = self.dim
        ar = np.arange(d)
        users, pos, neg = (np.asarray(x)[:, None] for x in (users, pos, neg))

        def rows(name, idx):
            return self.params.range(name)[0] + idx * d + ar

        blocks = [
            rows("gmf_user", users), rows("mlp_user", users),
            rows("gmf_item", pos), rows("mlp_item", pos),
            rows("gmf_item", neg), rows("mlp_item", neg),
            np.broadcast_to(self._dense, (len(users), len(self._dense))),
        ]
        return np.concatenate(blocks, axis=1)

    def _forward_rows(self, P: Node, gu, mu, gi, mi) -> Node:
        n = P.shape[0]
        off = 6 * self.dim
        h = ad.concat([mu, mi], axis=1).reshape(n, 1, 2 * self.dim)
        for _, _, a, b in self.layers:
            W = P[:, off : off + a * b].reshape(n, a, b)
            off += a * b
            bias = P[:, off : off + b].reshape(n, 1, b)
            off += b
            h = ad.relu(h @ W + bias)
        width = self.dim + self.tower[-1]
        Wo = P[:, off : off + width].reshape(n, width, 1)
        bo = P[:, off + width : off + width + 1].reshape(n, 1, 1)
        z = ad.concat([gu * gi, h.reshape(n, self.tower[-1])], axis=1).reshape(n, 1, width)
        return (z @ Wo + bo).reshape(n)

    def row_loss(self, P: Node) -> Node:
        d = self.dim
        gu, mu = P[:, 0:d], P[:, d : 2 * d]
        gp, mp = P[:, 2 * d : 3 * d], P[:, 3 * d : 4 * d]
        gn, mn = P[:, 4 * d : 5 * d], P[:, 5 * d : 6 * d]
        return ranking_loss(self._forward_rows(P, gu, mu, gp, mp) - self._forward_rows(P, gu, mu, gn, mn))

    def score(self, users, items) -> np.ndarray:
        users, items = np.broadcast_arrays(np.asarray(users), np.asarray(items))
        self._check_ids(users, items)
        v = self.params.view
        h = np.concatenate([v("mlp_user")[users], v("mlp_item")[items]], axis=-1)
        for wname, bname, _, _ in self.layers:
            h = np.maximum(h @ v(wname) + v(bname), 0.0)
        z = np.concatenate([v("gmf_user")[users] * v("gmf_item")[items], h], axis=-1)
        return (z @ v("out.weight"))[..., 0] + v("out.bias")[0]

    def ncf_score(self, u: int, i: int) -> float:
        return float(self.score(np.array(u), np.array(i)))


def build_recommender(kind: str, num_users: int, num_items: int, **kw) -> Recommender:
    if kind == "bpr":
        kw.pop("tower", None)
        return BPR(num_users, num_items, **kw)
    if kind == "ncf":
        return NCF(num_users, num_items, **kw)
    raise ValueError(f"unknown model {kind!r}")
