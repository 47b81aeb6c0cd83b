"""Synthetic interaction stream with a mid-stream preference switch.

Users are split into groups and items into clusters. In the first regime
group ``g`` mostly picks items from cluster ``g``; after the switch it moves
to cluster ``(g + shift) mod clusters``. Each user also carries a personal
item preference inside a cluster so that per-user structure exists beyond
the group level.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import Stream, from_arrays


@dataclass
class DriftConfig:
    num_users: int = 50
    num_items: int = 40
    num_interactions: int = 5000
    groups: int = 5
    switch_at: float = 0.5  # fraction of the stream where the regime changes
    shift: int = 1
    p_cluster: float = 0.9  # probability an interaction stays in the preferred cluster
    concentration: float = 1.0  # Dirichlet concentration of within-cluster preferences
    seed: int = 0

    def __post_init__(self):
        if self.groups < 2 or self.groups > min(self.num_users, self.num_items):
            raise ValueError("need 2 <= groups <= min(num_users, num_items)")
        if not 0.0 < self.switch_at < 1.0 or not 0.0 <= self.p_cluster <= 1.0:
            raise ValueError("switch_at in (0,1) and p_cluster in [0,1] required")


def cluster_of(num: int, groups: int) -> np.ndarray:
    """Contiguous near-equal partition of ``range(num)`` into ``groups`` labels."""
    return (np.arange(num) * groups) // num


def drift_stream(cfg: DriftConfig | None = None, **kw) -> tuple[Stream, dict]:
    """Generate the stream; timestamps are 0..N-1, id spaces are the full ranges."""
    cfg = cfg or DriftConfig(**kw)
    rng = np.random.default_rng(cfg.seed)
    U, I, N, G = cfg.num_users, cfg.num_items, cfg.num_interactions, cfg.groups
    ugroup = cluster_of(U, G)
    icluster = cluster_of(I, G)
    members = [np.flatnonzero(icluster == c) for c in range(G)]
    taste = [rng.dirichlet(np.full(len(members[c]), cfg.concentration), size=U) for c in range(G)]

    switch = int(cfg.switch_at * N)
    users = rng.integers(0, U, size=N)
    users[:U] = rng.permutation(U)  # every user appears at least once
    items = np.empty(N, dtype=np.int64)
    stay = rng.random(N) < cfg.p_cluster
    for n in range(N):
        u = users[n]
        g = ugroup[u]
        c = g if n < switch else (g + cfg.shift) % G
        if stay[n]:
            items[n] = rng.choice(members[c], p=taste[c][u])
        else:
            items[n] = rng.integers(0, I)
    t = np.arange(N, dtype=np.int64)
    stream = from_arrays(t, users, items, num_users=U, num_items=I)
    info = {"config": asdict(cfg), "switch_index": switch,
            "user_group": ugroup.tolist(), "item_cluster": icluster.tolist()}
    return stream, info
