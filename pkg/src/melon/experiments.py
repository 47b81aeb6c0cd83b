"""Synthetic preference-drift comparison of update strategies.

Protocol (fixed; every strategy starts from the same pretrained recommender):

1. generate a drift stream and split it chronologically into pretraining
   (first 40%) and online (remaining 60%) parts;
2. pretrain one BPR model with the default strategy (Adam) for
   ``pretrain_epochs`` shuffled epochs;
3. for every compared strategy copy the pretrained parameters (and Adam
   state for Adam-driven baselines); learned strategies additionally get
   ``meta_epochs`` meta-only epochs on the pretraining part;
4. run the prequential online loop and report mean HR@5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import trainer as T
from .dataset import SplitSpec, split
from .meta import MeLONConfig
from .recommenders import BPR
from .strategies import make_strategy
from .synthetic import DriftConfig, drift_stream

# name -> (strategy kind, meta-model input mode)
VARIANTS = {
    "default": ("default", None),
    "eals": ("eals", None),
    "mwnet": ("mwnet", None),
    "metasgd": ("metasgd", None),
    "melon": ("melon", "2d"),
    "melon_I": ("melon", "interaction"),
    "melon_P": ("melon", "parameter"),
}


@dataclass
class DriftProtocol:
    batch_size: int = 64
    pretrain_epochs: int = 20
    meta_epochs: int = 3
    split: tuple = (0.4, 0.0, 0.6)
    dim: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"  # recommender optimizer of the non-meta baselines
    data: dict = field(default_factory=dict)  # DriftConfig overrides


def drift_comparison(seed: int, variants=("default", "melon", "melon_I", "melon_P"),
                     protocol: DriftProtocol | None = None, metric: str = "HR@5") -> dict[str, float]:
    p = protocol or DriftProtocol()
    stream, _ = drift_stream(DriftConfig(**{**p.data, "seed": seed}))
    pre, _, online = split(stream, SplitSpec(*p.split))

    base = BPR(stream.num_users, stream.num_items, dim=p.dim, seed=seed)
    cfg = T.TrainConfig(lr=p.lr, batch_size=p.batch_size, seed=seed)
    st0 = T.init_state(base, make_strategy("default", base, lr=p.lr, optimizer="adam"), cfg)
    T.pretrain(st0, pre, p.pretrain_epochs)

    out = {}
    for name in variants:
        kind, mode = VARIANTS[name]
        model = BPR(stream.num_users, stream.num_items, dim=p.dim, seed=seed)
        model.params.flat[:] = base.params.flat
        melon = MeLONConfig(dim=p.dim, seed=seed, mode=mode) if mode else None
        strategy = make_strategy(kind, model, lr=p.lr, optimizer=p.optimizer, seed=seed, melon=melon)
        st = T.init_state(model, strategy, cfg)
        if st.rec_opt is not None:
            st.rec_opt.load(st0.rec_opt.state())
        if strategy.learned and p.meta_epochs:
            T.pretrain(st, pre, p.meta_epochs, update_recommender=False)
            st.history = type(st.history)(stream.num_users, stream.num_items)
        st.history.extend(pre.t, pre.u, pre.i)
        rows = T.run_online(st, online, offset=len(pre))
        out[name] = T.report(rows)[metric]
    return out
