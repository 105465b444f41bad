import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitfield.errors import ContractError, LabelError, ShapeError, TrainingDiverged
from vitfield.tensor import (
    SGD,
    Adam,
    Tape,
    Tensor,
    backward,
    load_tensors,
    save_tensors,
)

from helpers import max_rel_err, numerical_grad


def test_matmul_identity():
    tp = Tape()
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = tp.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_hand_arithmetic():
    tp = Tape()
    out = tp.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_error_names_both_shapes():
    tp = Tape()
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        tp.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_matches_triple_loop_reference():
    rng = np.random.default_rng(0)
    for _ in range(5):
        m, k, n = rng.integers(1, 17, size=3)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        ref = np.zeros((m, n))
        for i in range(m):
            for j in range(n):
                for l in range(k):
                    ref[i, j] += a[i, l] * b[l, j]
        out = Tape().matmul(Tensor(a), Tensor(b))
        assert np.abs(out.data - ref).max() < 1e-10


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    a = Tensor.param(rng.standard_normal((3, 3)))
    b = Tensor.param(rng.standard_normal((3, 3)))

    def loss_fn():
        tp = Tape(recording=False)
        return tp.sum(tp.matmul(a, b)).item()

    tp = Tape()
    loss = tp.sum(tp.matmul(a, b))
    backward(tp, loss)
    assert max_rel_err(a.grad, numerical_grad(loss_fn, a.data)) < 1e-4
    assert max_rel_err(b.grad, numerical_grad(loss_fn, b.data)) < 1e-4


def test_add_zero_case():
    out = Tape().add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_scale_hand_arithmetic():
    out = Tape().scale(Tensor([1.0, 2.0, 3.0]), 2.0)
    np.testing.assert_array_equal(out.data, [2.0, 4.0, 6.0])


def test_elementwise_rejects_incompatible_shapes():
    tp = Tape()
    with pytest.raises(ShapeError):
        tp.add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        tp.mul(Tensor(np.zeros((2, 4))), Tensor(np.zeros(4)))  # trailing vec is bias-only


def test_trailing_bias_broadcast_gradient():
    rng = np.random.default_rng(3)
    x = Tensor.param(rng.standard_normal((4, 3)))
    b = Tensor.param(rng.standard_normal(3))

    def loss_fn():
        tp = Tape(recording=False)
        return tp.sum(tp.gelu(tp.add(x, b))).item()

    tp = Tape()
    loss = tp.sum(tp.gelu(tp.add(x, b)))
    backward(tp, loss)
    assert max_rel_err(b.grad, numerical_grad(loss_fn, b.data)) < 1e-4


def test_gelu_gradient_on_minus3_to_3():
    x = Tensor.param(np.linspace(-3.0, 3.0, 13))

    def loss_fn():
        tp = Tape(recording=False)
        return tp.sum(tp.gelu(x)).item()

    tp = Tape()
    loss = tp.sum(tp.gelu(x))
    backward(tp, loss)
    assert max_rel_err(x.grad, numerical_grad(loss_fn, x.data)) < 1e-4


def test_softmax_symmetry():
    out = Tape().softmax(Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_large_constant_input_no_overflow():
    out = Tape().softmax(Tensor([1000.0, 1000.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_matches_direct_evaluation():
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    out = Tape().softmax(Tensor(x))
    assert np.abs(out.data - direct).max() < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(values):
    out = Tape().softmax(Tensor(values))
    assert abs(out.data.sum() - 1.0) < 1e-9
    assert np.all(out.data >= 0.0)


def test_softmax_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = Tensor.param(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))  # non-uniform readout so the grad is nontrivial

    def loss_fn():
        tp = Tape(recording=False)
        return tp.sum(tp.mul(tp.softmax(x), Tensor(w))).item()

    tp = Tape()
    loss = tp.sum(tp.mul(tp.softmax(x), Tensor(w)))
    backward(tp, loss)
    assert max_rel_err(x.grad, numerical_grad(loss_fn, x.data)) < 1e-4


def test_layer_norm_constant_row_is_zeroed():
    tp = Tape()
    out = tp.layer_norm(Tensor(np.full((2, 4), 3.7)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.abs(out.data).max() < 1e-3  # eps keeps the zero-variance row finite


def test_layer_norm_output_mean_zero():
    rng = np.random.default_rng(5)
    out = Tape().layer_norm(Tensor(rng.standard_normal((6, 8))),
                            Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.abs(out.data.mean(axis=-1)).max() < 1e-6


def test_layer_norm_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    x = Tensor.param(rng.standard_normal((3, 5)))
    gain = Tensor.param(rng.standard_normal(5))
    bias = Tensor.param(rng.standard_normal(5))
    w = rng.standard_normal((3, 5))

    def loss_fn():
        tp = Tape(recording=False)
        return tp.sum(tp.mul(tp.layer_norm(x, gain, bias), Tensor(w))).item()

    tp = Tape()
    loss = tp.sum(tp.mul(tp.layer_norm(x, gain, bias), Tensor(w)))
    backward(tp, loss)
    for t in (x, gain, bias):
        assert max_rel_err(t.grad, numerical_grad(loss_fn, t.data)) < 1e-4


def test_cross_entropy_uniform_logits():
    loss = Tape().cross_entropy(Tensor(np.zeros((1, 5))), [2])
    assert abs(loss.item() - np.log(5.0)) < 1e-12


def test_cross_entropy_saturated_logits():
    logits = np.zeros((1, 4))
    logits[0, 1] = 20.0
    loss = Tape().cross_entropy(Tensor(logits), [1])
    assert loss.item() < 1e-6


def test_cross_entropy_matches_direct_log_softmax():
    rng = np.random.default_rng(17)
    logits = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, size=4)
    lse = np.log(np.exp(logits).sum(axis=1))
    direct = float((lse - logits[np.arange(4), labels]).mean())
    loss = Tape().cross_entropy(Tensor(logits), labels)
    assert abs(loss.item() - direct) < 1e-10


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(LabelError, match="7"):
        Tape().cross_entropy(Tensor(np.zeros((2, 5))), [1, 7])


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(19)
    logits = Tensor.param(rng.standard_normal((4, 5)))
    labels = [0, 3, 2, 4]

    def loss_fn():
        return Tape(recording=False).cross_entropy(logits, labels).item()

    tp = Tape()
    backward(tp, tp.cross_entropy(logits, labels))
    assert max_rel_err(logits.grad, numerical_grad(loss_fn, logits.data)) < 1e-4


def test_backward_rejects_non_scalar_root():
    tp = Tape()
    out = tp.add(Tensor.param(np.zeros((2, 2))), Tensor(np.ones((2, 2))))
    with pytest.raises(ContractError):
        backward(tp, out)


def test_backward_rejects_unrecorded_root():
    with pytest.raises(ContractError):
        backward(Tape(), Tensor.param(np.zeros(())))


def test_backward_fanout_sums_both_contributions():
    # One node feeds two consumers; total gradient must be the sum.
    rng = np.random.default_rng(23)
    x = Tensor.param(rng.standard_normal((3, 3)))

    def build(tp):
        y = tp.gelu(x)
        return tp.sum(tp.add(tp.matmul(y, y), y))

    def loss_fn():
        return build(Tape(recording=False)).item()

    tp = Tape()
    backward(tp, build(tp))
    assert max_rel_err(x.grad, numerical_grad(loss_fn, x.data)) < 1e-4


def test_backward_accumulates_until_reset():
    x = Tensor.param(np.array([[2.0]]))
    for expected in (4.0, 8.0):
        tp = Tape()
        backward(tp, tp.sum(tp.mul(x, x)))
        assert x.grad[0, 0] == pytest.approx(expected)
    x.zero_grad()
    assert x.grad is None


def test_backward_visits_each_entry_at_most_once():
    tp = Tape()
    x = Tensor.param(np.arange(6.0).reshape(2, 3))
    y = tp.gelu(x)
    loss = tp.sum(tp.add(tp.mul(y, y), y))

    calls = {i: 0 for i in range(len(tp.entries))}
    patched = []
    for i, e in enumerate(tp.entries):
        def wrap(fn, i=i):
            def inner(g):
                calls[i] += 1
                return fn(g)
            return inner
        patched.append(e._replace(backward=wrap(e.backward)))
    tp.entries = patched
    backward(tp, loss)
    assert all(c <= 1 for c in calls.values())


def test_tape_entries_are_topologically_ordered():
    tp = Tape()
    x = Tensor.param(np.ones((2, 2)))
    y = tp.matmul(tp.gelu(x), tp.add(x, 1.0))
    tp.sum(y)
    produced = set()
    for e in tp.entries:
        for nid in e.input_ids:
            # every non-leaf input must already have been produced
            assert nid in produced or nid not in tp._output_ids
        produced.add(e.output_id)


def test_primitive_gradients_across_seeds():
    # Umbrella finite-difference sweep over every differentiable primitive.
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = Tensor.param(rng.standard_normal((3, 4)))
        w = Tensor(rng.standard_normal((3, 4)))
        k = Tensor.param(rng.standard_normal((4, 3)))

        def build(tp):
            h = tp.mul(tp.softmax(x, axis=-1), w)
            h = tp.add(h, tp.matmul(x, tp.matmul(k, x)))
            h = tp.gelu(tp.reshape(h, (2, 6)))
            h = tp.concat([h, tp.relu(h)], axis=-1)
            return tp.sum(tp.narrow(h, 1, 2, 7))

        def loss_fn():
            return build(Tape(recording=False)).item()

        tp = Tape()
        backward(tp, build(tp))
        assert max_rel_err(x.grad, numerical_grad(loss_fn, x.data)) < 1e-4
        assert max_rel_err(k.grad, numerical_grad(loss_fn, k.data)) < 1e-4


def test_optimizer_zero_gradient_is_fixed_point():
    p = Tensor.param(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_optimizer_step_descends_quadratic():
    for opt_cls in (Adam, SGD):
        w = Tensor.param(np.array([1.0]))
        opt = opt_cls([w], lr=0.05)
        w.grad = 2.0 * w.data  # d/dw w^2
        opt.step()
        assert w.data[0] ** 2 < 1.0


def test_optimizer_reaches_quadratic_minimum():
    # f(w) = (w0-3)^2 + 2*(w1+1)^2, minimum at (3, -1).
    w = Tensor.param(np.array([0.0, 0.0]))
    opt = Adam([w], lr=0.05)
    for _ in range(200):
        opt.zero_grad()
        w.grad = np.array([2.0 * (w.data[0] - 3.0), 4.0 * (w.data[1] + 1.0)])
        opt.step()
    assert np.abs(w.data - np.array([3.0, -1.0])).max() < 1e-3


def test_optimizer_aborts_on_nan_gradient():
    p = Tensor.param(np.zeros(3))
    opt = Adam([("blocks.0.w_q", p)], lr=0.1)
    p.grad = np.array([0.0, np.nan, 0.0])
    with pytest.raises(TrainingDiverged, match="blocks.0.w_q"):
        opt.step()


def test_conv2d_gradient_matches_finite_differences():
    rng = np.random.default_rng(29)
    x = Tensor.param(rng.standard_normal((2, 4, 4, 2)))
    w = Tensor.param(rng.standard_normal((3, 3, 2, 3)) * 0.5)
    b = Tensor.param(rng.standard_normal(3))

    def build(tp):
        return tp.sum(tp.gelu(tp.conv2d(x, w, b)))

    def loss_fn():
        return build(Tape(recording=False)).item()

    tp = Tape()
    backward(tp, build(tp))
    for t in (x, w, b):
        assert max_rel_err(t.grad, numerical_grad(loss_fn, t.data)) < 1e-4


def test_maxpool_gradient_matches_finite_differences():
    rng = np.random.default_rng(31)
    x = Tensor.param(rng.standard_normal((2, 4, 4, 3)))

    def build(tp):
        return tp.sum(tp.maxpool2d(x, 2))

    def loss_fn():
        return build(Tape(recording=False)).item()

    tp = Tape()
    backward(tp, build(tp))
    assert max_rel_err(x.grad, numerical_grad(loss_fn, x.data)) < 1e-4


def test_batched_matmul_with_shared_weight():
    rng = np.random.default_rng(37)
    x = Tensor.param(rng.standard_normal((4, 3, 5)))
    w = Tensor.param(rng.standard_normal((5, 2)))

    def build(tp):
        return tp.sum(tp.matmul(x, w))

    def loss_fn():
        return build(Tape(recording=False)).item()

    tp = Tape()
    backward(tp, build(tp))
    assert w.grad.shape == (5, 2)
    assert max_rel_err(w.grad, numerical_grad(loss_fn, w.data)) < 1e-4
    assert max_rel_err(x.grad, numerical_grad(loss_fn, x.data)) < 1e-4


def test_expand_leading_gradient_sums_over_batch():
    x = Tensor.param(np.array([[1.0, 2.0]]))
    tp = Tape()
    backward(tp, tp.sum(tp.expand_leading(x, 5)))
    np.testing.assert_allclose(x.grad, [[5.0, 5.0]])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(41)
    named = [
        ("embed", Tensor(rng.standard_normal((4, 3)))),
        ("head.bias", Tensor(rng.standard_normal(5))),
        ("scalarish", Tensor(rng.standard_normal((1,)))),
    ]
    path = tmp_path / "ckpt.bin"
    save_tensors(path, named)
    loaded = load_tensors(path)
    assert list(loaded) == ["embed", "head.bias", "scalarish"]
    for name, t in named:
        np.testing.assert_array_equal(loaded[name], t.data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(Exception, match="magic"):
        load_tensors(path)
