import numpy as np
import pytest

from gnnbench import (
    DimensionError,
    IndexBoundsError,
    Tape,
    TraceRecorder,
    UsageError,
    add,
    add_bias,
    backward,
    clip,
    concat,
    gather_rows,
    log,
    matmul,
    mul,
    relu,
    scale_rows,
    sigmoid,
    tanh,
    tensor_sum,
    unsorted_segment_sum,
)

from gnnbench.tensor import tensor

from oracles import (
    assert_grads_close,
    finite_diff_grads,
    gather_loop,
    matmul_loop,
    segment_sum_loop,
)


def last_record(rec):
    return rec.records[-1]


class TestMatmul:
    def test_ones_product(self):
        with TraceRecorder() as rec:
            out = matmul(tensor(np.ones((2, 3))), tensor(np.ones((3, 4))))
        assert out.shape == (2, 4)
        np.testing.assert_array_equal(out.numpy(), np.full((2, 4), 3.0, np.float32))
        assert last_record(rec).flops == 48
        assert last_record(rec).category == "matmul"

    def test_scalar_like(self):
        with TraceRecorder() as rec:
            out = matmul(tensor([[2.0]]), tensor([[3.0]]))
        assert out.numpy()[0, 0] == 6.0
        assert last_record(rec).flops == 2

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 2))
        out = matmul(tensor(a, dtype="f64"), tensor(b, dtype="f64"))
        np.testing.assert_allclose(out.numpy(), matmul_loop(a, b), rtol=1e-12)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(tensor(np.ones((2, 3))), tensor(np.ones((4, 5))))

    def test_byte_model(self):
        with TraceRecorder() as rec:
            matmul(tensor(np.ones((2, 3))), tensor(np.ones((3, 4))))
        # f32: (2*3 + 3*4 + 2*4) elements read/written once
        assert last_record(rec).hbm_bytes == 4 * (6 + 12 + 8)


class TestSegmentSum:
    def test_basic(self):
        with TraceRecorder() as rec:
            out = unsorted_segment_sum(tensor([[1, 2], [3, 4], [5, 6]]), [1, 0, 1], 2)
        np.testing.assert_array_equal(out.numpy(), [[3, 4], [6, 8]])
        assert last_record(rec).flops == 6

    def test_empty_segment_is_zero(self):
        out = unsorted_segment_sum(tensor([[1.0], [2.0]]), [0, 1], 3)
        np.testing.assert_array_equal(out.numpy()[2], [0.0])

    def test_matches_loop(self):
        rng = np.random.default_rng(1)
        data = rng.normal(size=(50, 4))
        ids = rng.integers(0, 10, size=50)
        out = unsorted_segment_sum(tensor(data, dtype="f64"), ids, 10)
        np.testing.assert_allclose(out.numpy(), segment_sum_loop(data, ids, 10), rtol=1e-12)

    def test_out_of_range_names_row(self):
        with pytest.raises(IndexBoundsError, match="row 1"):
            unsorted_segment_sum(tensor([[1.0], [2.0]]), [0, 5], 2)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(20, 3))
        b = rng.normal(size=(20, 3))
        ids = rng.integers(0, 5, size=20)
        alpha, beta = 1.7, -0.3
        lhs = unsorted_segment_sum(tensor(alpha * a + beta * b, dtype="f64"), ids, 5).numpy()
        rhs = (alpha * unsorted_segment_sum(tensor(a, dtype="f64"), ids, 5).numpy()
               + beta * unsorted_segment_sum(tensor(b, dtype="f64"), ids, 5).numpy())
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-14)


class TestGather:
    def test_basic(self):
        out = gather_rows(tensor([[1.0], [2.0], [3.0]]), [2, 0])
        np.testing.assert_array_equal(out.numpy(), [[3.0], [1.0]])

    def test_duplicate_backward_sums(self):
        x = tensor([[1.0, 2.0]], dtype="f64", param=True)
        with Tape() as tape:
            out = gather_rows(x, [0, 0, 0])
            loss = tensor_sum(out)
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[x.node_id].numpy(), [[3.0, 3.0]])

    def test_matches_loop(self):
        rng = np.random.default_rng(3)
        data = rng.normal(size=(9, 5))
        idx = rng.integers(0, 9, size=14)
        out = gather_rows(tensor(data, dtype="f64"), idx)
        np.testing.assert_array_equal(out.numpy(), gather_loop(data, idx))

    def test_out_of_range(self):
        with pytest.raises(IndexBoundsError):
            gather_rows(tensor([[1.0]]), [1])

    def test_adjoint_of_segment_sum(self):
        # <gather(x, idx), y> == <x, segment_sum(y, idx, N)>
        rng = np.random.default_rng(4)
        x = rng.normal(size=(8, 3))
        idx = rng.integers(0, 8, size=20)
        y = rng.normal(size=(20, 3))
        lhs = float((gather_loop(x, idx) * y).sum())
        uss = unsorted_segment_sum(tensor(y, dtype="f64"), idx, 8).numpy()
        rhs = float((x * uss).sum())
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestConcat:
    def test_vectors(self):
        with TraceRecorder() as rec:
            out = concat([tensor([1.0, 2.0]), tensor([3.0])], axis=0)
        np.testing.assert_array_equal(out.numpy(), [1.0, 2.0, 3.0])
        assert last_record(rec).flops == 0

    def test_axis1(self):
        out = concat([tensor(np.ones((2, 2))), tensor(np.ones((2, 3)))], axis=1)
        assert out.shape == (2, 5)

    def test_incompatible(self):
        with pytest.raises(DimensionError):
            concat([tensor(np.ones((2, 2))), tensor(np.ones((3, 3)))], axis=1)

    def test_gradient_splits_upstream(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 2))
        proj = rng.normal(size=(2, 5))

        def run():
            ta = tensor(a, dtype="f64", param=True)
            tb = tensor(b, dtype="f64", param=True)
            with Tape() as tape:
                out = concat([ta, tb], axis=1)
                loss = tensor_sum(mul(out, tensor(proj, dtype="f64")))
            return ta, tb, tape, loss

        ta, tb, tape, loss = run()
        grads = backward(tape, loss)
        fd = finite_diff_grads(
            lambda: float((np.concatenate([a, b], axis=1) * proj).sum()),
            {"a": a, "b": b})
        assert_grads_close(grads[ta.node_id].numpy(), fd["a"], label="concat/a")
        assert_grads_close(grads[tb.node_id].numpy(), fd["b"], label="concat/b")


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert sigmoid(tensor([0.0])).numpy()[0] == 0.5

    def test_relu(self):
        out = relu(tensor([-3.0, 3.0]))
        np.testing.assert_array_equal(out.numpy(), [0.0, 3.0])

    def test_scalar_broadcast(self):
        out = add(tensor([1.0, 2.0]), 1.0)
        np.testing.assert_array_equal(out.numpy(), [2.0, 3.0])
        out = mul(tensor([1.0, 2.0]), -1.0)
        np.testing.assert_array_equal(out.numpy(), [-1.0, -2.0])

    def test_bad_broadcast(self):
        with pytest.raises(DimensionError):
            add(tensor([1.0, 2.0]), tensor([1.0, 2.0, 3.0]))

    def test_tanh_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(5,))
        tx = tensor(x, dtype="f64", param=True)
        with Tape() as tape:
            loss = tensor_sum(tanh(tx))
        grads = backward(tape, loss)
        fd = finite_diff_grads(lambda: float(np.tanh(x).sum()), {"x": x})
        np.testing.assert_allclose(grads[tx.node_id].numpy(), fd["x"], rtol=1e-6)


@pytest.mark.parametrize("op_name", ["matmul", "segment_sum", "gather", "add", "mul",
                                     "relu", "tanh", "sigmoid", "log", "clip",
                                     "add_bias", "scale_rows"])
def test_gradcheck_each_op(op_name):
    """Central finite differences vs the analytic gradient, per op."""
    rng = np.random.default_rng(abs(hash(op_name)) % 2**32)
    ids = rng.integers(0, 4, size=7)

    if op_name == "matmul":
        arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    elif op_name == "segment_sum":
        arrays = {"a": rng.normal(size=(7, 3))}
    elif op_name == "gather":
        arrays = {"a": rng.normal(size=(4, 3))}
    elif op_name in ("add", "mul"):
        arrays = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=(3, 3))}
    elif op_name == "log":
        arrays = {"a": rng.uniform(0.5, 2.0, size=(4,))}
    elif op_name == "clip":
        # keep samples away from the clamp boundaries, where clip is not differentiable
        raw = rng.uniform(-1.0, 1.0, size=(8,))
        raw[np.abs(np.abs(raw) - 0.5) < 0.05] = 0.0
        arrays = {"a": raw}
    elif op_name == "add_bias":
        arrays = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(3,))}
    elif op_name == "scale_rows":
        arrays = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(4,))}
    elif op_name == "relu":
        a = rng.normal(size=(9,))
        a[np.abs(a) < 0.05] += 0.2   # keep clear of the kink
        arrays = {"a": a}
    else:
        arrays = {"a": rng.normal(size=(6,))}

    proj = {"r": None}

    def build():
        ts = {k: tensor(v, dtype="f64", param=True) for k, v in arrays.items()}
        with Tape() as tape:
            if op_name == "matmul":
                out = matmul(ts["a"], ts["b"])
            elif op_name == "segment_sum":
                out = unsorted_segment_sum(ts["a"], ids, 4)
            elif op_name == "gather":
                out = gather_rows(ts["a"], ids)
            elif op_name == "add":
                out = add(ts["a"], ts["b"])
            elif op_name == "mul":
                out = mul(ts["a"], ts["b"])
            elif op_name == "relu":
                out = relu(ts["a"])
            elif op_name == "tanh":
                out = tanh(ts["a"])
            elif op_name == "sigmoid":
                out = sigmoid(ts["a"])
            elif op_name == "log":
                out = log(ts["a"])
            elif op_name == "clip":
                out = clip(ts["a"], -0.5, 0.5)
            elif op_name == "add_bias":
                out = add_bias(ts["a"], ts["b"])
            elif op_name == "scale_rows":
                out = scale_rows(ts["a"], ts["b"])
            if proj["r"] is None:
                proj["r"] = rng.normal(size=out.shape)
            loss = tensor_sum(mul(out, tensor(proj["r"], dtype="f64")))
        return ts, tape, loss

    sample_ts, tape, loss = build()
    grads = backward(tape, loss)
    fd = finite_diff_grads(lambda: build()[2].item(), arrays)
    for key, t in sample_ts.items():
        assert_grads_close(grads[t.node_id].numpy(), fd[key], label=f"{op_name}/{key}")


class TestBackward:
    def test_linear_loss_gradient_is_input(self):
        x_val = np.array([1.0, -2.0, 3.0])
        w = tensor(np.zeros(3), dtype="f64", param=True)
        x = tensor(x_val, dtype="f64")
        with Tape() as tape:
            loss = tensor_sum(mul(w, x))
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[w.node_id].numpy(), x_val)

    def test_product_rule_at_zero(self):
        w = tensor([0.0], dtype="f64", param=True)
        with Tape() as tape:
            loss = tensor_sum(mul(sigmoid(w), w))
        grads = backward(tape, loss)
        # d/dw [sigmoid(w) * w] at 0 = sigmoid(0) + 0 * sigmoid'(0) = 0.5
        assert grads[w.node_id].numpy()[0] == pytest.approx(0.5, abs=1e-12)

    def test_loss_off_tape_is_usage_error(self):
        w = tensor([1.0], param=True)
        with Tape() as tape:
            mul(w, 2.0)
        stray = tensor_sum(tensor([1.0]))
        with pytest.raises(UsageError):
            backward(tape, stray)

    def test_unreached_param_gets_zero_gradient(self):
        w = tensor([1.0, 2.0], dtype="f64", param=True)
        v = tensor([3.0], dtype="f64", param=True)
        with Tape() as tape:
            mul(v, 2.0)                       # v participates but not in loss
            loss = tensor_sum(mul(w, w))
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[v.node_id].numpy(), [0.0])
        np.testing.assert_array_equal(grads[w.node_id].numpy(), [2.0, 4.0])

    def test_backward_emits_grad_records(self):
        w = tensor(np.ones((2, 2)), param=True)
        x = tensor(np.ones((2, 2)))
        with TraceRecorder() as rec:
            with Tape() as tape:
                loss = tensor_sum(matmul(w, x))
            backward(tape, loss)
        cats = {r.category for r in rec.records}
        assert "matmul-grad" in cats and "other-grad" in cats
        assert all(r.duration_s > 0 for r in rec.records)


class TestFlopBookkeeping:
    def test_randomized_closed_forms(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            m, k, n = rng.integers(1, 9, size=3)
            e, f, s = rng.integers(1, 9, size=3)
            with TraceRecorder() as rec:
                matmul(tensor(np.ones((m, k))), tensor(np.ones((k, n))))
                unsorted_segment_sum(tensor(np.ones((e, f))),
                                     rng.integers(0, s, size=e), int(s))
                concat([tensor(np.ones((e, f))), tensor(np.ones((e, f)))], axis=0)
                gather_rows(tensor(np.ones((s, f))), rng.integers(0, s, size=e))
            recorded = [r.flops for r in rec.records]
            assert recorded == [2 * m * k * n, e * f, 0, 0]


class TestDeterminism:
    def test_bitwise_repeatability(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(6, 5)).astype(np.float32)
        b = rng.normal(size=(5, 4)).astype(np.float32)
        ids = rng.integers(0, 3, size=6)

        def run():
            ta = tensor(a, param=True)
            tb = tensor(b, param=True)
            with Tape() as tape:
                h = tanh(matmul(ta, tb))
                g = unsorted_segment_sum(h, ids, 3)
                loss = tensor_sum(mul(g, g))
            grads = backward(tape, loss)
            return h.numpy(), grads[ta.node_id].numpy(), grads[tb.node_id].numpy()

        first = run()
        second = run()
        for x, y in zip(first, second):
            assert np.array_equal(x, y)


class TestFiniteness:
    def test_all_finite_flags_nan(self):
        t = tensor([1.0, 2.0])
        assert t.all_finite()
        t2 = tensor([np.nan, 1.0])
        assert not t2.all_finite()


class TestScopes:
    def test_scoped_kernel_names(self):
        with TraceRecorder() as rec:
            with rec.scope("encode"):
                matmul(tensor(np.ones((1, 2))), tensor(np.ones((2, 1))))
        assert rec.records[0].op == "encode/matmul"
