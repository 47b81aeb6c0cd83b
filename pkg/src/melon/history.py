"""Time-respecting user/item interaction histories.

Every query takes a time ``t`` and only ever sees interactions strictly before
it, so appending future rows early can never leak into a query.
"""

from __future__ import annotations

from bisect import bisect_left

import numpy as np

from .dataset import MiniBatch

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def hash_keys(seed: int, entity: int, t: int, elements: np.ndarray, side: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        for v in (side, entity, t & 0xFFFFFFFFFFFFFFFF):
            h = _mix(np.asarray(h ^ (np.uint64(v) + _GOLDEN)))
        return _mix(h ^ (elements.astype(np.uint64) * _GOLDEN))


class _Side:
    """Append-only adjacency for one side of the bipartite graph."""

    def __init__(self, n: int):
        self.times: list[list[int]] = [[] for _ in range(n)]
        self.others: list[list[int]] = [[] for _ in range(n)]
        # first-occurrence lists give set semantics for history queries
        self.first_times: list[list[int]] = [[] for _ in range(n)]
        self.first_others: list[list[int]] = [[] for _ in range(n)]
        self.seen: list[set[int]] = [set() for _ in range(n)]

    def add(self, t: int, a: int, b: int) -> None:
        self.times[a].append(t)
        self.others[a].append(b)
        if b not in self.seen[a]:
            self.seen[a].add(b)
            self.first_times[a].append(t)
            self.first_others[a].append(b)

    def before(self, a: int, t: int) -> list[int]:
        return self.first_others[a][: bisect_left(self.first_times[a], t)]

    def last_before(self, a: int, t: int) -> tuple[int, int] | None:
        k = bisect_left(self.times[a], t) - 1
        if k < 0:
            return None
        return self.times[a][k], self.others[a][k]


class HistoryStore:
    def __init__(self, num_users: int, num_items: int):
        self.num_users = num_users
        self.num_items = num_items
        self._users = _Side(num_users)
        self._items = _Side(num_items)
        self._last_t: int | None = None
        self.size = 0

    def append(self, t: int, u: int, i: int) -> None:
        if self._last_t is not None and t < self._last_t:
            raise ValueError(f"out-of-order append: t={t} after t={self._last_t}")
        if not (0 <= u < self.num_users and 0 <= i < self.num_items):
            raise IndexError(f"interaction ({t}, {u}, {i}) out of range")
        self._users.add(t, u, i)
        self._items.add(t, i, u)
        self._last_t = t
        self.size += 1

    def extend(self, t, u, i) -> None:
        for tt, uu, ii in zip(np.asarray(t).tolist(), np.asarray(u).tolist(), np.asarray(i).tolist()):
            self.append(tt, uu, ii)

    @staticmethod
    def _sample(elems: list[int], cap: int | None, seed: int, entity: int, t: int, side: int) -> np.ndarray:
        arr = np.asarray(elems, dtype=np.int64)
        if cap is None or len(arr) <= cap:
            return arr
        keys = hash_keys(seed, entity, t, arr, side)
        chosen = np.sort(np.argsort(keys, kind="stable")[:cap])
        return arr[chosen]

    def user_history(self, u: int, t: int, cap: int | None = None, rng_seed: int = 0) -> np.ndarray:
        """Distinct items ``u`` touched strictly before ``t``; at most ``cap`` sampled uniformly."""
        return self._sample(self._users.before(u, t), cap, rng_seed, u, t, 0)

    def item_history(self, i: int, t: int, cap: int | None = None, rng_seed: int = 0) -> np.ndarray:
        """Distinct users who touched ``i`` strictly before ``t``."""
        return self._sample(self._items.before(i, t), cap, rng_seed, i, t, 1)

    def items_seen_before(self, u: int, t: int) -> np.ndarray:
        return np.asarray(self._users.before(u, t), dtype=np.int64)

    def last_interactions(self, batch: MiniBatch, include_item_side: bool = False) -> MiniBatch:
        """Most recent prior interaction of each row's user (and item, if asked).

        Rows without a prior contribute nothing. The result's ``index`` holds
        the source row position so callers can derive seeds from it.
        """
        ts, us, its, src = [], [], [], []
        for r, (t, u, i) in enumerate(zip(batch.t.tolist(), batch.u.tolist(), batch.i.tolist())):
            prev = self._users.last_before(u, t)
            if prev is not None:
                ts.append(prev[0])
                us.append(u)
                its.append(prev[1])
                src.append(r)
            if include_item_side:
                prev = self._items.last_before(i, t)
                if prev is not None:
                    ts.append(prev[0])
                    us.append(prev[1])
                    its.append(i)
                    src.append(r)
        if not ts:
            return MiniBatch.empty()
        a = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
        return MiniBatch(a(ts), a(us), a(its), a(src))
