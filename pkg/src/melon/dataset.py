"""Interaction streams: loading, k-core filtering, chronological splits, batching."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Domain tags mixed into per-row seeds so the three negative streams never collide.
TRAIN_TAG = 1
EVAL_TAG = 2
LAST_TAG = 3

# users already warned about, per history source (a HistoryStore or a stream's
# seen-function), so separate runs in one process each log their own cases
_EXHAUSTED_WARNED: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


class DataError(ValueError):
    """Malformed or unusable interaction data."""


class Interaction(NamedTuple):
    t: int
    u: int
    i: int


@dataclass
class Stream:
    """A chronologically sorted interaction log with dense ids.

    ``user_ids[k]`` / ``item_ids[k]`` give the original id of dense index ``k``.
    Slicing keeps the id maps, so sub-streams share the same id space.
    """

    t: np.ndarray
    u: np.ndarray
    i: np.ndarray
    user_ids: list[str]
    item_ids: list[str]

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.u = np.asarray(self.u, dtype=np.int64)
        self.i = np.asarray(self.i, dtype=np.int64)
        if not (len(self.t) == len(self.u) == len(self.i)):
            raise DataError("column lengths differ")

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, key: slice) -> "Stream":
        return Stream(self.t[key], self.u[key], self.i[key], self.user_ids, self.item_ids)

    def __iter__(self) -> Iterator[Interaction]:
        for t, u, i in zip(self.t.tolist(), self.u.tolist(), self.i.tolist()):
            yield Interaction(t, u, i)

    def concat(self, other: "Stream") -> "Stream":
        return Stream(
            np.concatenate([self.t, other.t]),
            np.concatenate([self.u, other.u]),
            np.concatenate([self.i, other.i]),
            self.user_ids,
            self.item_ids,
        )


@dataclass
class MiniBatch:
    """Rows of interactions plus per-row sampled negatives.

    ``index`` holds a per-row seeding key (the global stream position for
    stream batches); ``neg`` has shape (n, k) once negatives are drawn.
    """

    t: np.ndarray
    u: np.ndarray
    i: np.ndarray
    index: np.ndarray
    neg: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.t)

    def interactions(self) -> list[Interaction]:
        return [Interaction(*r) for r in zip(self.t.tolist(), self.u.tolist(), self.i.tolist())]

    @classmethod
    def empty(cls) -> "MiniBatch":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, np.zeros((0, 1), dtype=np.int64))


@dataclass(frozen=True)
class SplitSpec:
    pretrain_frac: float
    valid_frac: float
    test_frac: float

    def __post_init__(self):
        fracs = (self.pretrain_frac, self.valid_frac, self.test_frac)
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ValueError(f"split fractions must lie in [0, 1]: {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1: {fracs}")


def _parse_rows(path: Path, delimiter: str) -> list[tuple[int, str, str, int]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) < 3 or len(rec) > 4 or any(not c.strip() for c in rec[:3]):
                raise DataError(f"{path}:{lineno}: expected timestamp,user,item[,rating]")
            ts = rec[0].strip()
            try:
                t = int(ts)
            except ValueError:
                try:
                    tf = float(ts)
                except ValueError:
                    if lineno == 1 and not rows:
                        continue  # header
                    raise DataError(f"{path}:{lineno}: bad timestamp {ts!r}") from None
                if not math.isfinite(tf) or tf != int(tf):
                    raise DataError(f"{path}:{lineno}: non-integer timestamp {ts!r}")
                t = int(tf)
            if len(rec) == 4 and rec[3].strip():
                try:
                    float(rec[3])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad rating {rec[3]!r}") from None
            rows.append((t, rec[1].strip(), rec[2].strip(), len(rows)))
    return rows


def load(path: str | Path, fmt: str | None = None) -> Stream:
    """Read a ``timestamp,user,item[,rating]`` log; every row is a positive.

    Rows are sorted by timestamp (stable, so ties keep file order) and ids are
    densified in order of first appearance in the sorted stream.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if fmt is None:
        fmt = "tsv" if path.suffix.lower() in (".tsv", ".tab") else "csv"
    if fmt not in ("csv", "tsv"):
        raise DataError(f"unknown format {fmt!r}")
    rows = _parse_rows(path, "\t" if fmt == "tsv" else ",")
    if not rows:
        raise DataError(f"{path}: no interactions")
    rows.sort(key=lambda r: (r[0], r[3]))

    umap: dict[str, int] = {}
    imap: dict[str, int] = {}
    t = np.empty(len(rows), dtype=np.int64)
    u = np.empty(len(rows), dtype=np.int64)
    i = np.empty(len(rows), dtype=np.int64)
    for k, (ts, us, its, _) in enumerate(rows):
        t[k] = ts
        u[k] = umap.setdefault(us, len(umap))
        i[k] = imap.setdefault(its, len(imap))
    return Stream(t, u, i, list(umap), list(imap))


def _redensify(stream: Stream, keep: np.ndarray) -> Stream:
    t, u, i = stream.t[keep], stream.u[keep], stream.i[keep]
    users, u_new = np.unique(u, return_inverse=True)
    items, i_new = np.unique(i, return_inverse=True)
    return Stream(
        t,
        u_new,
        i_new,
        [stream.user_ids[k] for k in users],
        [stream.item_ids[k] for k in items],
    )


def filter_min_interactions(stream: Stream, k: int) -> Stream:
    """Drop users and items with fewer than ``k`` interactions, to a fixpoint."""
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = np.ones(len(stream), dtype=bool)
    while True:
        uc = np.bincount(stream.u[keep], minlength=stream.num_users)
        ic = np.bincount(stream.i[keep], minlength=stream.num_items)
        ok = keep & (uc[stream.u] >= k) & (ic[stream.i] >= k)
        if ok.sum() == keep.sum():
            break
        keep = ok
    if not keep.any():
        raise DataError("dataset exhausted by filtering")
    if keep.all() and len(np.unique(stream.u)) == stream.num_users and len(
        np.unique(stream.i)
    ) == stream.num_items:
        return stream
    return _redensify(stream, keep)


def split_boundaries(n: int, spec: SplitSpec) -> tuple[int, int]:
    # small epsilon keeps e.g. 0.955 * 1000 from flooring to 954
    b1 = math.floor(spec.pretrain_frac * n + 1e-9)
    b2 = math.floor((spec.pretrain_frac + spec.valid_frac) * n + 1e-9)
    return min(b1, n), min(max(b2, b1), n)


def split(stream: Stream, spec: SplitSpec) -> tuple[Stream, Stream, Stream]:
    b1, b2 = split_boundaries(len(stream), spec)
    parts = stream[:b1], stream[b1:b2], stream[b2:]
    for name, part in zip(("pretrain", "valid", "test"), parts):
        if len(part) == 0:
            warnings.warn(f"{name} split is empty (N={len(stream)})", stacklevel=2)
    return parts


def row_rng(seed: int, key: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(tag), int(key)])


SeenFn = Callable[[int, int], np.ndarray]


def sample_negatives(
    num_items: int,
    u: int,
    t: int,
    pos: int,
    k: int,
    rng: np.random.Generator,
    seen_before: SeenFn,
) -> np.ndarray:
    """Draw ``k`` items (with replacement) the user never touched before ``t``.

    Rejection sampling against the user's history; when every item has been
    seen, falls back to uniform over all items except ``pos``.
    """
    if num_items < 2:
        raise DataError("need at least two items to sample negatives")
    seen = seen_before(u, t)
    banned = np.zeros(num_items, dtype=bool)
    banned[seen] = True
    banned[pos] = True
    n_allowed = num_items - int(banned.sum())
    if n_allowed == 0:
        warned = _EXHAUSTED_WARNED.setdefault(getattr(seen_before, "__self__", seen_before), set())
        if u not in warned:
            warned.add(u)
            logger.warning("user %d has interacted with every item before t=%d; "
                           "sampling negatives uniformly (further cases for this user not logged)", u, t)
        banned[:] = False
        banned[pos] = True
        n_allowed = num_items - 1
    out = np.empty(k, dtype=np.int64)
    got = 0
    # rejection is cheap when most items are allowed; switch to explicit draw otherwise
    if n_allowed * 4 >= num_items:
        while got < k:
            cand = rng.integers(0, num_items, size=2 * (k - got) + 4)
            cand = cand[~banned[cand]]
            take = min(len(cand), k - got)
            out[got : got + take] = cand[:take]
            got += take
    else:
        allowed = np.flatnonzero(~banned)
        out[:] = allowed[rng.integers(0, len(allowed), size=k)]
    return out


def stream_seen_fn(stream: Stream) -> SeenFn:
    """Past-item lookup built from ``stream`` alone (used when no history store is given)."""
    from .history import HistoryStore

    store = HistoryStore(stream.num_users, stream.num_items)
    store.extend(stream.t, stream.u, stream.i)
    return store.items_seen_before


def draw_negatives(
    t: np.ndarray,
    u: np.ndarray,
    i: np.ndarray,
    keys: np.ndarray,
    num_items: int,
    k: int,
    seed: int,
    tag: int,
    seen_before: SeenFn,
) -> np.ndarray:
    out = np.empty((len(t), k), dtype=np.int64)
    for r in range(len(t)):
        rng = row_rng(seed, int(keys[r]), tag)
        out[r] = sample_negatives(num_items, int(u[r]), int(t[r]), int(i[r]), k, rng, seen_before)
    return out


def batches(
    stream: Stream,
    batch_size: int,
    neg_per_pos: int = 1,
    rng_seed: int = 0,
    seen_before: SeenFn | None = None,
    offset: int = 0,
    tag: int = TRAIN_TAG,
) -> Iterator[MiniBatch]:
    """Consecutive chronological mini-batches with per-row seeded negatives.

    ``offset`` is added to row positions to form the seeding keys, so batches
    of a sub-stream can be keyed by their position in the full stream.
    """
    if batch_size < 1 or neg_per_pos < 1:
        raise ValueError("batch_size and neg_per_pos must be >= 1")
    if seen_before is None:
        seen_before = stream_seen_fn(stream)
    for start in range(0, len(stream), batch_size):
        sl = slice(start, start + batch_size)
        keys = np.arange(start, min(start + batch_size, len(stream)), dtype=np.int64) + offset
        t, u, i = stream.t[sl], stream.u[sl], stream.i[sl]
        neg = draw_negatives(t, u, i, keys, stream.num_items, neg_per_pos, rng_seed, tag, seen_before)
        yield MiniBatch(t, u, i, keys, neg)


# --- canonical dump -------------------------------------------------------


def write_canonical(
    stream: Stream, out_dir: str | Path, spec: SplitSpec | None = None
) -> dict:
    """Write ``interactions.tsv``, id maps, and the ``dataset.json`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interactions.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("timestamp\tuser\titem\n")
        for t, u, i in zip(stream.t.tolist(), stream.u.tolist(), stream.i.tolist()):
            fh.write(f"{t}\t{u}\t{i}\n")
    for name, ids in (("users.tsv", stream.user_ids), ("items.tsv", stream.item_ids)):
        with open(out / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("dense\toriginal\n")
            for k, orig in enumerate(ids):
                fh.write(f"{k}\t{orig}\n")
    sidecar = {
        "num_users": stream.num_users,
        "num_items": stream.num_items,
        "num_interactions": len(stream),
        "split_boundaries": list(split_boundaries(len(stream), spec)) if spec else None,
    }
    (out / "dataset.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return sidecar


def read_canonical(in_dir: str | Path) -> tuple[Stream, dict]:
    src = Path(in_dir)
    sidecar = json.loads((src / "dataset.json").read_text())

    def ids(name: str) -> list[str]:
        lines = (src / name).read_text(encoding="utf-8").splitlines()[1:]
        return [ln.split("\t", 1)[1] for ln in lines]

    arr = np.loadtxt(src / "interactions.tsv", dtype=np.int64, skiprows=1, ndmin=2)
    stream = Stream(arr[:, 0], arr[:, 1], arr[:, 2], ids("users.tsv"), ids("items.tsv"))
    if len(stream) != sidecar["num_interactions"]:
        raise DataError("canonical dump is inconsistent with its sidecar")
    return stream, sidecar


def from_arrays(
    t: Sequence[int], u: Sequence[int], i: Sequence[int], num_users: int | None = None,
    num_items: int | None = None,
) -> Stream:
    """Build a stream from dense-id arrays (sorted stably by ``t``)."""
    t = np.asarray(t, dtype=np.int64)
    order = np.argsort(t, kind="stable")
    u = np.asarray(u, dtype=np.int64)[order]
    i = np.asarray(i, dtype=np.int64)[order]
    nu = num_users if num_users is not None else int(u.max()) + 1 if len(u) else 0
    ni = num_items if num_items is not None else int(i.max()) + 1 if len(i) else 0
    return Stream(t[order], u, i, [str(k) for k in range(nu)], [str(k) for k in range(ni)])
