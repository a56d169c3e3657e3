import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elecrec import autodiff as ad
from elecrec.optim import AdamState, UninitializedGradientError, adam_step
from oracles import bce_reference, gradcheck, softmax_ce_reference


def rng(seed=0):
    return np.random.default_rng(seed)


def weighted_sum(t, r):
    # contracts any output with fixed random weights so every element matters
    return (t * r).sum()


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 3.0]])
    out = ad.matmul(ad.Tensor(np.eye(2)), ad.Tensor(m))
    np.testing.assert_array_equal(out.data, m.astype(np.float32))


def test_matmul_hand_example():
    out = ad.Tensor([[1, 2], [3, 4]]) @ ad.Tensor([[0], [1]])
    np.testing.assert_array_equal(out.data, [[2], [4]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))


def test_matmul_gradcheck():
    r = rng(1)
    R = r.standard_normal((3, 2))
    arrays = {"a": r.standard_normal((3, 4)), "b": r.standard_normal((4, 2))}
    assert gradcheck(lambda p: weighted_sum(p["a"] @ p["b"], R), arrays) == []


def test_batched_matmul_gradcheck():
    r = rng(2)
    R = r.standard_normal((2, 3, 3, 2))
    arrays = {"a": r.standard_normal((2, 3, 3, 4)), "b": r.standard_normal((2, 3, 4, 2))}
    assert gradcheck(lambda p: weighted_sum(p["a"] @ p["b"], R), arrays) == []


def test_folded_3d_by_2d_matmul_gradcheck():
    r = rng(3)
    R = r.standard_normal((2, 3, 5))
    arrays = {"a": r.standard_normal((2, 3, 4)), "b": r.standard_normal((4, 5))}
    assert gradcheck(lambda p: weighted_sum(p["a"] @ p["b"], R), arrays) == []


# ---------------------------------------------------------------- embedding


def test_embedding_all_padding_copies_row_zero():
    table = rng().standard_normal((5, 3)).astype(np.float32)
    out = ad.embedding_lookup(ad.Tensor(table), np.zeros((2, 4), dtype=np.int64))
    assert out.shape == (2, 4, 3)
    np.testing.assert_array_equal(out.data, np.broadcast_to(table[0], (2, 4, 3)))


def test_embedding_duplicate_ids_accumulate():
    table = ad.parameter(np.zeros((3, 2)))
    out = ad.embedding_lookup(table, np.array([[1, 1]]))
    up = np.array([[[1.0, 2.0], [10.0, 20.0]]])
    ad.backward((out * up).sum())
    np.testing.assert_array_equal(table.grad[1], [11.0, 22.0])
    np.testing.assert_array_equal(table.grad[[0, 2]], 0.0)


def test_embedding_gradcheck():
    r = rng(4)
    ids = r.integers(0, 7, size=(2, 4))
    R = r.standard_normal((2, 4, 3))
    arrays = {"table": r.standard_normal((7, 3))}
    assert gradcheck(lambda p: weighted_sum(ad.embedding_lookup(p["table"], ids), R), arrays) == []


def test_embedding_out_of_vocabulary_reports_id_and_position():
    with pytest.raises(ad.VocabularyError, match=r"9.*\(1, 0\)"):
        ad.embedding_lookup(ad.Tensor(np.zeros((5, 2))), np.array([[1, 2], [9, 0]]))


# ---------------------------------------------------------------- softmax cross-entropy


def test_ce_uniform_logits():
    loss = ad.softmax_cross_entropy(ad.Tensor(np.zeros((4, 100))), np.arange(4), np.ones(4, bool))
    assert float(loss.data) == pytest.approx(math.log(100), abs=1e-6)
    assert float(loss.data) == pytest.approx(4.6052, abs=1e-4)


def test_ce_saturated_correct_class():
    logits = np.zeros((1, 10))
    logits[0, 3] = 20.0
    loss = ad.softmax_cross_entropy(ad.Tensor(logits), np.array([3]), np.array([True]))
    # exact value is log(1 + 9 e^-20) = 1.86e-8, so a 1e-8 bound is unattainable at V=10
    exact = math.log1p(9 * math.exp(-20))
    assert 0.0 <= float(loss.data) <= exact * (1 + 1e-3)
    big = np.zeros((1, 10))
    big[0, 3] = 25.0
    assert float(ad.softmax_cross_entropy(ad.Tensor(big), np.array([3]), np.array([True])).data) < 1e-8


def test_ce_matches_bruteforce():
    r = rng(5)
    logits = r.standard_normal((3, 5))
    targets = r.integers(0, 5, 3)
    valid = np.ones(3, bool)
    loss = ad.softmax_cross_entropy(ad.Tensor(logits, dtype=np.float64), targets, valid)
    assert float(loss.data) == pytest.approx(softmax_ce_reference(logits, targets, valid), abs=1e-6)
    loss32 = ad.softmax_cross_entropy(ad.Tensor(logits), targets, valid)
    assert float(loss32.data) == pytest.approx(softmax_ce_reference(logits, targets, valid), abs=1e-6)


def test_ce_masked_rows_have_zero_gradient():
    r = rng(6)
    logits = ad.parameter(r.standard_normal((4, 6)))
    valid = np.array([True, False, True, False])
    ad.backward(ad.softmax_cross_entropy(logits, np.array([0, 1, 2, 3]), valid))
    np.testing.assert_array_equal(logits.grad[~valid], 0.0)
    # masked rows contribute zero loss: changing them does not move the value
    moved = logits.data.copy()
    moved[~valid] += 100.0
    a = ad.softmax_cross_entropy(ad.Tensor(logits.data), np.array([0, 1, 2, 3]), valid)
    b = ad.softmax_cross_entropy(ad.Tensor(moved), np.array([0, 1, 2, 3]), valid)
    assert float(a.data) == float(b.data)


def test_ce_all_masked_is_degenerate():
    with pytest.raises(ad.DegenerateBatchError):
        ad.softmax_cross_entropy(ad.Tensor(np.zeros((2, 3))), np.array([0, 1]), np.zeros(2, bool))


def test_ce_gradcheck():
    r = rng(7)
    targets = r.integers(0, 5, 4)
    valid = np.array([True, True, False, True])
    arrays = {"x": r.standard_normal((4, 5))}
    assert gradcheck(lambda p: ad.softmax_cross_entropy(p["x"], targets, valid), arrays) == []


# ---------------------------------------------------------------- sigmoid BCE


@pytest.mark.parametrize("label", [0.0, 1.0])
def test_bce_zero_logit(label):
    loss = ad.sigmoid_bce(ad.Tensor([0.0]), np.array([label]), np.array([True]))
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-6)


def test_bce_saturated():
    loss = ad.sigmoid_bce(ad.Tensor([20.0]), np.array([1.0]), np.array([True]))
    assert float(loss.data) < 1e-8


def test_bce_stable_at_extreme_logits():
    loss = ad.sigmoid_bce(ad.Tensor([1000.0, -1000.0]), np.array([0.0, 1.0]), np.ones(2, bool))
    assert float(loss.data) == pytest.approx(1000.0)


def test_bce_matches_per_element_formula():
    r = rng(8)
    x = r.standard_normal(5) * 3
    y = r.integers(0, 2, 5).astype(float)
    valid = np.ones(5, bool)
    loss = ad.sigmoid_bce(ad.Tensor(x, dtype=np.float64), y, valid)
    assert float(loss.data) == pytest.approx(bce_reference(x, y, valid), abs=1e-6)


def test_bce_all_masked_is_degenerate():
    with pytest.raises(ad.DegenerateBatchError):
        ad.sigmoid_bce(ad.Tensor([1.0, 2.0]), np.array([0.0, 1.0]), np.zeros(2, bool))


def test_bce_gradcheck():
    r = rng(9)
    y = r.integers(0, 2, 6).astype(float)
    valid = np.array([1, 1, 0, 1, 1, 0], bool)
    arrays = {"x": r.standard_normal(6)}
    assert gradcheck(lambda p: ad.sigmoid_bce(p["x"], y, valid), arrays) == []


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(ad.Tensor(np.full((1, 4), 3.0)), ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_standardized_row():
    out = ad.layer_norm(ad.Tensor([[1.0, -1.0]]), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)


def test_layer_norm_gradcheck():
    r = rng(10)
    R = r.standard_normal((2, 4))
    arrays = {"x": r.standard_normal((2, 4)), "g": 1 + 0.3 * r.standard_normal(4), "b": r.standard_normal(4)}
    assert gradcheck(lambda p: weighted_sum(ad.layer_norm(p["x"], p["g"], p["b"]), R), arrays) == []


# ---------------------------------------------------------------- remaining ops


def test_softmax_rows_sum_to_one():
    r = rng(11)
    out = ad.softmax(ad.Tensor(r.standard_normal((6, 3, 17)) * 10))
    np.testing.assert_allclose(out.data.sum(-1), 1.0, atol=1e-6)


def test_softmax_with_mask_surrogate():
    x = np.array([[0.0, ad.MASK_VALUE, 1.0]])
    out = ad.softmax(ad.Tensor(x))
    assert out.data[0, 1] == 0.0
    assert out.data.sum() == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize(
    "name,shapes,fn",
    [
        ("add_broadcast", {"a": (3, 4), "b": (4,)}, lambda p: p["a"] + p["b"]),
        ("sub_broadcast", {"a": (2, 1, 3), "b": (4, 3)}, lambda p: p["a"] - p["b"]),
        ("mul_broadcast", {"a": (3, 4), "b": (3, 1)}, lambda p: p["a"] * p["b"]),
        ("scalar_mul", {"a": (3, 4)}, lambda p: p["a"] * 2.5),
        ("gelu", {"a": (3, 5)}, lambda p: ad.gelu(p["a"] * 2.0)),
        ("softmax", {"a": (3, 5)}, lambda p: ad.softmax(p["a"])),
        ("reshape", {"a": (2, 6)}, lambda p: p["a"].reshape(3, 4)),
        ("transpose", {"a": (2, 3, 4)}, lambda p: p["a"].transpose(2, 0, 1)),
        ("sum_axis", {"a": (3, 4)}, lambda p: p["a"].sum(axis=0)),
        ("mean_axis", {"a": (3, 4)}, lambda p: ad.mean(p["a"], axis=-1, keepdims=True)),
        ("slice_rows", {"a": (5, 3)}, lambda p: ad.slice_rows(p["a"], 2)),
        ("pad_axis1", {"a": (2, 3, 2)}, lambda p: ad.pad_axis1(p["a"], 2)),
    ],
)
def test_elementwise_and_structural_gradcheck(name, shapes, fn):
    r = rng(hash(name) % 1000)
    arrays = {k: r.standard_normal(s) for k, s in shapes.items()}
    out_shape = fn({k: ad.Tensor(v) for k, v in arrays.items()}).shape
    R = r.standard_normal(out_shape)
    assert gradcheck(lambda p: weighted_sum(fn(p), R), arrays) == []


def test_dropout_gradcheck_with_frozen_mask():
    r = rng(12)
    R = r.standard_normal((4, 5))
    arrays = {"a": r.standard_normal((4, 5))}

    def build(p):
        return weighted_sum(ad.dropout(p["a"], 0.3, np.random.default_rng(99), True), R)

    assert gradcheck(build, arrays) == []


def test_dropout_inverted_scaling_and_eval_identity():
    x = ad.Tensor(np.ones((200, 200)))
    y = ad.dropout(x, 0.2, np.random.default_rng(0), True)
    kept = y.data[y.data != 0]
    np.testing.assert_allclose(kept, 1 / 0.8, rtol=1e-6)
    assert abs(y.data.mean() - 1.0) < 0.02
    assert ad.dropout(x, 0.2, np.random.default_rng(0), False) is x


# ---------------------------------------------------------------- backward


def test_backward_constant_writes_nothing():
    c = ad.Tensor(3.0)
    ad.backward(c)
    assert c.grad is None


def test_backward_sum_is_ones():
    w = ad.parameter(np.array([0.5, -1.0, 2.0]))
    ad.backward(w.sum())
    np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])


def test_backward_two_layer_composite_gradcheck():
    r = rng(13)
    x = r.standard_normal((5, 3))
    y = r.integers(0, 4, 5)

    def build(p):
        h = ad.gelu(x @ p["w1"] + p["b1"])
        h = ad.layer_norm(h, p["g"], p["bb"])
        return ad.softmax_cross_entropy(h @ p["w2"], y, np.ones(5, bool))

    arrays = {"w1": r.standard_normal((3, 6)), "b1": r.standard_normal(6), "g": np.ones(6) + 0.1 * r.standard_normal(6),
              "bb": 0.1 * r.standard_normal(6), "w2": r.standard_normal((6, 4))}
    assert gradcheck(build, arrays) == []


def test_backward_rejects_non_scalar():
    w = ad.parameter(np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.backward(w * 2.0)


def test_backward_twice_is_reuse_error():
    w = ad.parameter(np.ones(3))
    loss = (w * 2.0).sum()
    ad.backward(loss)
    with pytest.raises(ad.TapeError):
        ad.backward(loss)


def test_every_reachable_parameter_gets_gradient():
    r = rng(14)
    a = ad.parameter(r.standard_normal((2, 3)))
    b = ad.parameter(r.standard_normal((3, 3)))
    unused = ad.parameter(r.standard_normal(3))
    ad.backward(((a @ b) * (a @ b)).sum())
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert unused.grad is None


def test_gradients_deterministic():
    def run():
        r = rng(15)
        a = ad.parameter(r.standard_normal((4, 8)))
        g = ad.parameter(np.ones(8))
        z = ad.parameter(np.zeros(8))
        loss = ad.softmax(ad.layer_norm(ad.gelu(a), g, z)).sum() + (a * a).mean()
        ad.backward(loss)
        return loss.data.copy(), a.grad.copy(), g.grad.copy()

    for x, y in zip(run(), run()):
        np.testing.assert_array_equal(x, y)


def test_float32_graph_stays_float32():
    r = rng(16)
    x = ad.parameter(r.standard_normal((3, 4)))
    g = ad.parameter(np.ones(4))
    b = ad.parameter(np.zeros(4))
    h = ad.gelu(ad.layer_norm(x, g, b)) * 0.5 + 1.0
    loss = ad.softmax_cross_entropy(ad.softmax(h), np.array([0, 1, 2]), np.ones(3, bool))
    for t in (h, loss):
        assert t.data.dtype == np.float32
    ad.backward(loss)
    assert x.grad.dtype == np.float32


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params():
    p = ad.parameter(np.array([1.0, -2.0]))
    p.grad = np.zeros(2, np.float32)
    adam_step({"p": p}, AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_hand_value():
    p = ad.parameter(np.array([1.0]))
    p.grad = np.ones(1, np.float32)
    state = AdamState(lr=1e-3)
    adam_step({"p": p}, state)
    expected = 1.0 - 1e-3 * (1 / (1 + 1e-8))
    assert float(p.data[0]) == pytest.approx(expected, abs=1e-7)
    assert state.step == 1
    np.testing.assert_array_equal(p.grad, 0.0)


def test_adam_symmetric_params_stay_identical():
    a = ad.parameter(np.array([0.3, 0.7]))
    b = ad.parameter(np.array([0.3, 0.7]))
    state = AdamState()
    r = rng(17)
    for _ in range(25):
        g = r.standard_normal(2).astype(np.float32)
        a.grad, b.grad = g.copy(), g.copy()
        adam_step({"a": a, "b": b}, state)
    np.testing.assert_array_equal(a.data, b.data)


def test_adam_missing_gradient_names_parameter():
    a = ad.parameter(np.ones(2))
    with pytest.raises(UninitializedGradientError, match="lonely"):
        adam_step({"lonely": a}, AdamState())


def test_adam_moment_buffers_match_shapes_and_step_increases():
    a = ad.parameter(np.ones((2, 3)))
    state = AdamState()
    for i in range(3):
        a.grad = np.ones((2, 3), np.float32)
        adam_step({"a": a}, state)
        assert state.step == i + 1
    assert state.m["a"].shape == (2, 3) and state.v["a"].shape == (2, 3)


# ---------------------------------------------------------------- properties


@settings(max_examples=15, deadline=None)
@given(m=st.integers(1, 4), k=st.integers(1, 4), n=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_property_matmul_gradients(m, k, n, seed):
    r = rng(seed)
    R = r.standard_normal((m, n))
    arrays = {"a": r.standard_normal((m, k)), "b": r.standard_normal((k, n))}
    assert gradcheck(lambda p: weighted_sum(p["a"] @ p["b"], R), arrays) == []


@settings(max_examples=15, deadline=None)
@given(rows=st.integers(1, 3), d=st.integers(2, 6), seed=st.integers(0, 10_000))
def test_property_layer_norm_gradients(rows, d, seed):
    r = rng(seed)
    R = r.standard_normal((rows, d))
    arrays = {"x": r.standard_normal((rows, d)), "g": 1 + 0.2 * r.standard_normal(d), "b": r.standard_normal(d)}
    assert gradcheck(lambda p: weighted_sum(ad.layer_norm(p["x"], p["g"], p["b"]), R), arrays) == []


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 6), v=st.integers(2, 9), seed=st.integers(0, 10_000))
def test_property_ce_gradients_and_masking(n, v, seed):
    r = rng(seed)
    valid = r.random(n) < 0.7
    valid[0] = True
    targets = r.integers(0, v, n)
    arrays = {"x": r.standard_normal((n, v)) * 2}
    assert gradcheck(lambda p: ad.softmax_cross_entropy(p["x"], targets, valid), arrays) == []


@settings(max_examples=20, deadline=None)
@given(shape=st.tuples(st.integers(1, 4), st.integers(1, 30)), scale=st.floats(0.1, 50), seed=st.integers(0, 10_000))
def test_property_softmax_normalized(shape, scale, seed):
    x = rng(seed).standard_normal(shape) * scale
    np.testing.assert_allclose(ad.softmax(ad.Tensor(x)).data.sum(-1), 1.0, atol=1e-6)
