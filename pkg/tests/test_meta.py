import numpy as np
import pytest

from melon import autodiff as ad
from melon.autodiff import Tape
from melon.dataset import MiniBatch
from melon.history import HistoryStore
from melon.meta import (
    MeLON, MeLONConfig, apply_update, attention_weights, extended_embedding, gather_inputs, preprocess,
)
from melon.recommenders import BPR

from oracles import EXP_MINUS_1, SIGMOID_20, SIGMOID_MINUS_4


def setup(n=4, d=8, seed=0, mode="2d", forget=True, rows=None):
    rng = np.random.default_rng(seed)
    model = BPR(6, 10, dim=d, seed=seed, init_std=0.3)
    hist = HistoryStore(6, 10)
    hist.extend(np.arange(30), rng.integers(0, 6, 30), rng.integers(0, 10, 30))
    if rows is None:
        u = rng.integers(0, 6, n)
        i = rng.integers(0, 10, n)
    else:
        u, i = (np.array(x) for x in zip(*rows))
        n = len(u)
    neg = (i + 1 + rng.integers(0, 9, n)) % 10
    b = MiniBatch(np.full(n, 40), u, i, np.arange(n), neg[:, None])
    grads = model.per_interaction_grads(b)
    U, I = model.embedding_tables()
    meta = MeLON(MeLONConfig(dim=d, mode=mode, forget_gate=forget, seed=seed))
    inp = gather_inputs(b, grads, U, I, hist, 10, 0)
    return meta, inp, model, b


# -- attention / extension -------------------------------------------------------


def test_single_neighbor_weight_is_one():
    tape = Tape()
    a = tape.leaf(np.ones((4, 1)))
    w = attention_weights(tape.leaf([[0.3, -1.0]]), tape.leaf([[[2.0, 0.5]]]), a)
    np.testing.assert_array_equal(w.value, [[1.0]])


def test_identical_neighbors_split_evenly():
    tape = Tape()
    rng = np.random.default_rng(0)
    a = tape.leaf(rng.standard_normal((6, 1)))
    nb = np.tile(rng.standard_normal(3), (1, 2, 1))
    w = attention_weights(tape.leaf(rng.standard_normal((1, 3))), tape.leaf(nb), a)
    np.testing.assert_allclose(w.value, [[0.5, 0.5]], rtol=0, atol=1e-15)


def test_attention_permutation_equivariant():
    rng = np.random.default_rng(1)
    c, nb, a = rng.standard_normal((2, 3)), rng.standard_normal((2, 5, 3)), rng.standard_normal((6, 1))
    perm = rng.permutation(5)
    tape = Tape()
    w1 = attention_weights(tape.leaf(c), tape.leaf(nb), tape.leaf(a)).value
    w2 = attention_weights(tape.leaf(c), tape.leaf(nb[:, perm]), tape.leaf(a)).value
    np.testing.assert_allclose(w2, w1[:, perm], rtol=1e-14)
    np.testing.assert_allclose(w1.sum(axis=1), 1.0, rtol=1e-14)


def test_masked_neighbors_get_zero_weight():
    rng = np.random.default_rng(2)
    tape = Tape()
    mask = np.array([[True, True, False]])
    w = attention_weights(tape.leaf(rng.standard_normal((1, 2))), tape.leaf(rng.standard_normal((1, 3, 2))),
                          tape.leaf(rng.standard_normal((4, 1))), mask).value
    assert w[0, 2] == 0.0 and w[0, :2].sum() == pytest.approx(1.0)


def _ext(center, nb, mask, W, b, a=None):
    tape = Tape()
    d = center.shape[1]
    a = np.zeros((2 * d, 1)) if a is None else a
    return extended_embedding(tape.leaf(center), tape.leaf(nb), mask, tape.leaf(a), tape.leaf(W), tape.leaf(b)).value


def test_empty_history_uses_zero_aggregate():
    rng = np.random.default_rng(3)
    e = rng.standard_normal((1, 3))
    W, b = rng.standard_normal((6, 3)), rng.standard_normal(3)
    out = _ext(e, np.zeros((1, 0, 3)), np.zeros((1, 0), bool), W, b)
    np.testing.assert_allclose(out, np.maximum(np.concatenate([e, np.zeros((1, 3))], 1) @ W + b, 0))
    # a fully masked padded row behaves the same
    out2 = _ext(e, rng.standard_normal((1, 2, 3)), np.zeros((1, 2), bool), W, b)
    np.testing.assert_allclose(out2, out, rtol=1e-15)


def test_single_neighbor_aggregate_is_that_neighbor():
    e, n = np.array([[0.2, 0.4]]), np.array([[[1.5, -0.7]]])
    W = np.vstack([np.zeros((2, 2)), np.eye(2)])  # picks the aggregate half
    out = _ext(e, n, np.ones((1, 1), bool), np.hstack([W, -W]), np.zeros(4))
    np.testing.assert_allclose(out, [[1.5, 0.0, 0.0, 0.7]])


def test_identity_block_passes_self_through():
    e = np.array([[0.3, 1.2, 0.0]])
    W = np.zeros((6, 6))
    W[:3, :3] = np.eye(3)
    out = _ext(e, np.random.default_rng(0).standard_normal((1, 2, 3)), np.ones((1, 2), bool), W, np.zeros(6))
    np.testing.assert_array_equal(out[0, :3], e[0])


# -- representations / heads ----------------------------------------------------------


def test_interaction_repr_shape_and_range():
    meta, inp, _, _ = setup()
    tape = Tape()
    h = meta.interaction_repr(meta.leaves(tape), inp).value
    assert h.shape == (4, meta.config.repr_dim)
    assert np.all(h >= 0)


def test_interaction_repr_zero_input_gives_relu_bias():
    meta, inp, _, _ = setup()
    params = {k: v.copy() for k, v in meta.params.items()}
    for k in ("ext_user.weight", "ext_user.bias", "ext_item.weight", "ext_item.bias"):
        params[k][...] = 0.0
    params["inter.bias"][...] = np.linspace(-1, 1, len(params["inter.bias"]))
    tape = Tape()
    h = meta.interaction_repr(meta.leaves(tape, params), inp).value
    np.testing.assert_array_equal(h, np.tile(np.maximum(params["inter.bias"], 0), (4, 1)))


@pytest.mark.parametrize(
    "v, expect",
    [(1.0, (0.0, 1.0)), (np.exp(-11.0), (-1.0, EXP_MINUS_1)), (-np.exp(5.0), (0.5, -1.0)), (0.0, (-1.0, 0.0))],
)
def test_preprocess_examples(v, expect):
    np.testing.assert_allclose(preprocess(v, 10.0), expect, rtol=1e-14, atol=1e-15)


def test_preprocess_bounded():
    # bounded for |v| <= e^p
    mags = np.exp(np.linspace(-25.0, 10.0, 50))
    v = np.concatenate([-mags, [0.0], mags])
    out = preprocess(v, 10.0)
    assert np.all(np.abs(out) <= 1.0 + 1e-12)


def test_role_layers_default_two():
    assert MeLONConfig().role_layers == 2
    meta = MeLON(MeLONConfig(dim=4))
    assert "role.1.weight" in meta.params and "role.2.weight" not in meta.params


def test_role_repr_zero_weights():
    meta = MeLON(MeLONConfig(dim=4))
    params = {k: np.zeros_like(v) for k, v in meta.params.items()}
    tape = Tape()
    h = meta.role_repr(meta.leaves(tape, params), tape.const(np.ones((5, 6)))).value
    assert np.all(h == 0.0)


def test_role_repr_finite_for_large_gradients():
    meta = MeLON(MeLONConfig(dim=4, seed=1))
    mags = np.logspace(-12, 6, 200)
    feats = np.concatenate([preprocess(mags, 10), preprocess(mags, 10), preprocess(-mags, 10)], axis=1)
    tape = Tape()
    h = meta.role_repr(meta.leaves(tape), tape.const(feats)).value
    assert np.all(np.isfinite(h))


def _heads_zero(meta, bias=0.0):
    params = {k: v.copy() for k, v in meta.params.items()}
    params["lr.weight"][...] = 0.0
    params["lr.bias"][...] = bias
    return params


def test_zero_head_gives_one_half():
    meta, inp, _, _ = setup()
    tape = Tape()
    W, _ = meta.rate_nodes(meta.leaves(tape, _heads_zero(meta)), inp)
    assert np.all(W.value == 0.5)


def test_bias_minus_four():
    meta, inp, _, _ = setup()
    tape = Tape()
    W, _ = meta.rate_nodes(meta.leaves(tape, _heads_zero(meta, -4.0)), inp)
    np.testing.assert_allclose(W.value, SIGMOID_MINUS_4, rtol=1e-14)


@pytest.mark.parametrize("mode", ["2d", "interaction", "parameter"])
def test_rates_in_open_unit_interval(mode):
    meta, inp, _, _ = setup(mode=mode, seed=4)
    W, F = meta.rates(inp)
    assert np.all((W > 0) & (W < 1)) and np.all((F > 0) & (F < 1))


# -- update ------------------------------------------------------------------------------


def test_apply_update_examples():
    assert apply_update(0.5, 0.1, 2.0) == pytest.approx(0.3, abs=1e-16)
    assert apply_update(0.7, 0.3, 0.0) == 0.7
    f = 1.0 / (1.0 + np.exp(-20.0))
    assert f == pytest.approx(SIGMOID_20, rel=1e-15)
    assert abs(apply_update(0.7, 0.0, 1.0, f) - 0.7) < 1e-6


# -- batch rates ------------------------------------------------------------------------------


def test_bpr_batch_shape():
    meta, inp, _, _ = setup(n=4, d=8)
    W, F = meta.rates(inp)
    assert W.shape == (4, 24) and F.shape == (4, 24)


def test_identical_interactions_identical_rows():
    meta, inp, _, _ = setup(rows=[(1, 2), (3, 4), (1, 2)])
    # same (u, i) and the same sampled negative are needed for identical inputs
    inp.grads.coords[2] = inp.grads.coords[0]
    inp.grads.values[2] = inp.grads.values[0]
    inp.grads.grads[2] = inp.grads.grads[0]
    inp.grads.losses[2] = inp.grads.losses[0]
    W, _ = meta.rates(inp)
    np.testing.assert_array_equal(W[0], W[2])


def test_rates_vary_within_a_row():
    meta, inp, _, _ = setup(seed=5)
    W, _ = meta.rates(inp)
    assert np.ptp(W[0]) > 0


def test_parameter_direction_is_local():
    meta, inp, _, _ = setup(seed=6)
    W0, _ = meta.rates(inp)
    inp.grads.grads[1, 3] *= -50.0
    W1, _ = meta.rates(inp)
    changed = W0 != W1
    assert changed[1, 3] and changed.sum() == 1


def test_interaction_direction_changes_rates():
    meta, inp, _, _ = setup(seed=7)
    W0, _ = meta.rates(inp)
    inp.user_self[0] += 1.0
    W1, _ = meta.rates(inp)
    assert np.any(W0[0] != W1[0]) and np.array_equal(W0[1:], W1[1:])


def test_interaction_mode_rows_constant_parameter_mode_columns_constant():
    meta, inp, _, _ = setup(mode="interaction", seed=8)
    W, _ = meta.rates(inp)
    assert np.all(W == W[:, :1])
    meta, inp, _, _ = setup(mode="parameter", seed=8, rows=[(0, 1), (0, 2), (3, 1)])
    W, _ = meta.rates(inp)
    c = inp.grads.coords
    for m in np.unique(c):
        assert np.ptp(W[c == m]) == 0


def test_forget_gate_optional_and_deterministic():
    meta, inp, _, _ = setup(forget=False)
    assert "forget.weight" not in meta.params
    W, F = meta.rates(inp)
    assert F is None
    meta2, inp2, _, _ = setup(forget=False)
    np.testing.assert_array_equal(meta2.rates(inp2)[0], W)


def test_config_validation():
    with pytest.raises(ValueError):
        MeLONConfig(mode="3d")
    with pytest.raises(ValueError):
        MeLONConfig(p=0)
    assert MeLONConfig(dim=16).repr_dim == 16


def test_rates_differentiable_in_phi():
    meta, inp, _, _ = setup(seed=9)
    tape = Tape()
    phi = meta.leaves(tape)
    W, F = meta.rate_nodes(phi, inp)
    g = tape.backward((W * W).sum() + F.sum())
    assert all(np.isfinite(g[n]).all() for n in phi.values())
    assert np.abs(g[phi["lr.weight"]]).max() > 0 and np.abs(g[phi["att_user"]]).max() > 0
