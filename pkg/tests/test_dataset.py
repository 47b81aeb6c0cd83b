import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melon.dataset import (
    EVAL_TAG, TRAIN_TAG, DataError, Interaction, SplitSpec, batches, filter_min_interactions,
    from_arrays, load, read_canonical, split, stream_seen_fn, write_canonical,
)

from oracles import CHAIN_KEEP_ITEMS, CHAIN_KEEP_USERS, CHAIN_ROWS


def write(tmp_path, text, name="log.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_first_row_maps_to_zero(tmp_path):
    s = load(write(tmp_path, "5,alice,book1,4.0\n"))
    assert list(s) == [Interaction(t=5, u=0, i=0)]
    assert s.user_ids == ["alice"] and s.item_ids == ["book1"]


def test_unsorted_input_is_sorted(tmp_path):
    s = load(write(tmp_path, "9,a,x\n3,b,y\n5,a,z\n"))
    assert s.t.tolist() == [3, 5, 9]


def test_ties_keep_file_order(tmp_path):
    s = load(write(tmp_path, "4,a,x\n4,b,y\n4,c,z\n"))
    assert [s.user_ids[u] for u in s.u] == ["a", "b", "c"]


def test_missing_item_column_names_line(tmp_path):
    with pytest.raises(DataError, match=r":2:"):
        load(write(tmp_path, "1,a,x\n2,b\n"))


def test_header_is_skipped_and_tsv_supported(tmp_path):
    s = load(write(tmp_path, "timestamp\tuser\titem\trating\n1\tu\ti\t5\n", "log.tsv"))
    assert len(s) == 1


def test_empty_file_is_an_error(tmp_path):
    with pytest.raises(DataError):
        load(write(tmp_path, ""))


def test_bad_timestamp_after_header(tmp_path):
    with pytest.raises(DataError, match=":3:"):
        load(write(tmp_path, "t,u,i\n1,a,b\nnope,a,b\n"))


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load("/nonexistent/file.csv")


def test_id_maps_round_trip(tmp_path):
    rows = [(3, "u9", "i2"), (1, "u1", "i7"), (2, "u9", "i7")]
    s = load(write(tmp_path, "".join(f"{t},{u},{i}\n" for t, u, i in rows)))
    back = sorted((int(t), s.user_ids[u], s.item_ids[i]) for t, u, i in s)
    assert back == sorted(rows)
    assert len(set(s.user_ids)) == s.num_users


# -- filtering --------------------------------------------------------------


def _counts_stream(user_counts, items_per_user=1):
    t, u, i = [], [], []
    n = 0
    for uid, c in enumerate(user_counts):
        for k in range(c):
            t.append(n)
            u.append(uid)
            i.append(k % 40)
            n += 1
    return from_arrays(t, u, i)


def test_user_with_19_interactions_removed_at_k20():
    # user 0: 25 interactions on 25 items; user 1: 19 on items 0..18. Items need 20 too,
    # so give a third heavy user covering everything.
    t, u, i = [], [], []
    n = 0
    for uid, items in ((0, range(25)), (1, range(19)), (2, range(25))):
        for rep in range(20 if uid != 1 else 1):
            for it in items:
                t.append(n)
                u.append(uid)
                i.append(it)
                n += 1
    s = filter_min_interactions(from_arrays(t, u, i), 20)
    assert s.num_users == 2
    assert "1" not in s.user_ids


def test_k1_is_identity():
    s = from_arrays([0, 1, 2], [0, 1, 0], [1, 0, 2])
    out = filter_min_interactions(s, 1)
    assert out is s


def test_chain_removal_matches_fixpoint_oracle(tmp_path):
    text = "".join(f"{n},{u},{it}\n" for n, (u, it) in enumerate(CHAIN_ROWS))
    s = filter_min_interactions(load(write(tmp_path, text)), 2)
    assert set(s.user_ids) == CHAIN_KEEP_USERS
    assert set(s.item_ids) == CHAIN_KEEP_ITEMS
    assert s.u.max() < s.num_users and s.i.max() < s.num_items


def test_filter_exhaustion_is_an_error():
    with pytest.raises(DataError, match="exhausted"):
        filter_min_interactions(from_arrays([0, 1], [0, 1], [0, 1]), 5)


# -- split ------------------------------------------------------------------


@pytest.mark.parametrize(
    "n, fracs, sizes",
    [
        (1000, (0.95, 0.005, 0.045), (950, 5, 45)),
        (10, (0.8, 0.1, 0.1), (8, 1, 1)),
        (3, (0.95, 0.005, 0.045), (2, 0, 1)),
    ],
)
def test_split_sizes(n, fracs, sizes):
    s = from_arrays(np.arange(n), np.zeros(n, int), np.zeros(n, int))
    with pytest.warns(UserWarning) if 0 in sizes else _nullcontext():
        parts = split(s, SplitSpec(*fracs))
    assert tuple(len(p) for p in parts) == sizes


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        SplitSpec(1.2, -0.1, -0.1)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 300), a=st.floats(0, 1), b=st.floats(0, 1))
def test_split_concatenation_is_identity(n, a, b):
    pre = a
    valid = (1 - a) * b
    spec = SplitSpec(pre, valid, 1 - pre - valid)
    rng = np.random.default_rng(n)
    s = from_arrays(np.arange(n), rng.integers(0, 5, n), rng.integers(0, 7, n))
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p, v, t = split(s, spec)
    joined = p.concat(v).concat(t)
    assert np.array_equal(joined.t, s.t) and np.array_equal(joined.u, s.u) and np.array_equal(joined.i, s.i)


# -- batches / negatives ------------------------------------------------------


def _random_stream(seed=0, n=300, users=12, items=30):
    rng = np.random.default_rng(seed)
    return from_arrays(np.sort(rng.integers(0, n // 2, n)), rng.integers(0, users, n), rng.integers(0, items, n),
                       num_users=users, num_items=items)


def test_batch_sizes_chunk():
    s = from_arrays(np.arange(7), np.zeros(7, int), np.arange(7) % 3, num_items=10)
    assert [len(b) for b in batches(s, 3)] == [3, 3, 1]


def test_one_negative_per_positive():
    s = _random_stream()
    for b in batches(s, 50, neg_per_pos=1):
        assert b.neg.shape == (len(b), 1)


def test_same_seed_same_negatives():
    s = _random_stream()
    a = [b.neg for b in batches(s, 64, 5, rng_seed=3)]
    b = [b.neg for b in batches(s, 64, 5, rng_seed=3)]
    c = [b.neg for b in batches(s, 64, 5, rng_seed=4)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_train_and_eval_tags_differ():
    s = _random_stream()
    a = next(batches(s, 64, 5, tag=TRAIN_TAG)).neg
    b = next(batches(s, 64, 5, tag=EVAL_TAG)).neg
    assert not np.array_equal(a, b)


def test_negatives_never_seen_before_t_brute_force():
    s = _random_stream(seed=5)
    for b in batches(s, 40, neg_per_pos=20, rng_seed=1):
        for r in range(len(b)):
            t, u = b.t[r], b.u[r]
            past = {int(i) for tt, uu, i in zip(s.t, s.u, s.i) if uu == u and tt < t}
            assert not past & set(b.neg[r].tolist())
            assert b.i[r] not in b.neg[r]


def test_exhausted_user_falls_back_to_uniform(caplog):
    # user 0 touches every item before t=10
    s = from_arrays([0, 1, 2, 10], [0, 0, 0, 0], [0, 1, 2, 1], num_items=3)
    with caplog.at_level("WARNING"):
        b = list(batches(s, 4, neg_per_pos=6))[0]
    assert set(b.neg[3].tolist()) <= {0, 2}
    assert "every item" in caplog.text


def test_keys_with_offset_match_full_stream_batches():
    s = _random_stream()
    seen = stream_seen_fn(s)
    full = list(batches(s, 50, 3, rng_seed=2, seen_before=seen))
    tail = list(batches(s[100:], 50, 3, rng_seed=2, seen_before=seen, offset=100))
    assert np.array_equal(full[2].neg, tail[0].neg)


# -- canonical dump -----------------------------------------------------------


def test_canonical_round_trip_and_sidecar(tmp_path):
    s = _random_stream()
    side = write_canonical(s, tmp_path / "d", SplitSpec(0.8, 0.1, 0.1))
    assert side == {"num_users": s.num_users, "num_items": s.num_items, "num_interactions": len(s),
                    "split_boundaries": [240, 270]}
    back, meta = read_canonical(tmp_path / "d")
    assert np.array_equal(back.t, s.t) and np.array_equal(back.u, s.u) and np.array_equal(back.i, s.i)
    assert back.user_ids == s.user_ids


def test_canonical_dump_is_byte_identical_on_rerun(tmp_path):
    s = _random_stream()
    write_canonical(s, tmp_path / "a")
    write_canonical(s, tmp_path / "b")
    for name in ("interactions.tsv", "users.tsv", "items.tsv", "dataset.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
