import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layoutsim import numerics as nx
from layoutsim.numerics import DimensionError, MlpParams, NumericError, Tape, Tensor


def loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def loop_mlp(weights, biases, acts, x):
    rows = []
    for row in x:
        v = list(row)
        for w, b, act in zip(weights, biases, acts):
            nv = []
            for o in range(w.shape[0]):
                s = b[o]
                for i in range(w.shape[1]):
                    s += w[o, i] * v[i]
                nv.append(max(s, 0.0) if act == "relu" else s)
            v = nv
        rows.append(v)
    return np.array(rows)


def test_matmul_identity_and_dot():
    assert np.array_equal(nx.matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]]).data, [[3, 4], [5, 6]])
    assert nx.matmul([[1, 2]], [[3], [4]]).data.tolist() == [[11.0]]


def test_matmul_against_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(nx.matmul(a, b).data, loop_matmul(a, b), rtol=1e-12, atol=0)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_tensor_rejects_nan():
    with pytest.raises(NumericError):
        Tensor([1.0, float("nan")])


class TestMlp:
    def test_zero_weights_give_relu_bias(self):
        b = np.array([-1.0, 2.0])
        p = MlpParams([Tensor(np.zeros((2, 3)))], [Tensor(b)], ["relu"])
        out = nx.mlp_apply(p, np.random.default_rng(1).normal(size=(4, 3)))
        assert np.array_equal(out.data, np.tile([0.0, 2.0], (4, 1)))

    def test_identity_layer(self):
        x = np.random.default_rng(2).normal(size=(5, 3))
        p = MlpParams([Tensor(np.eye(3))], [Tensor(np.zeros(3))], ["none"])
        assert np.array_equal(nx.mlp_apply(p, x).data, x)

    def test_two_layers_match_loop_oracle(self):
        rng = np.random.default_rng(3)
        p = nx.init_mlp(rng, [4, 6, 3])
        p.biases[0].data[:] = rng.normal(size=6)
        x = rng.normal(size=(5, 4))
        expected = loop_mlp([w.data for w in p.weights], [b.data for b in p.biases], p.activations, x)
        np.testing.assert_allclose(nx.mlp_apply(p, x).data, expected, rtol=1e-12, atol=1e-14)

    def test_dimension_mismatch(self):
        p = nx.init_mlp(np.random.default_rng(0), [4, 2])
        with pytest.raises(DimensionError):
            nx.mlp_apply(p, np.ones((1, 3)))

    def test_layers_must_chain(self):
        with pytest.raises(DimensionError):
            MlpParams([Tensor(np.ones((3, 2))), Tensor(np.ones((2, 4)))], [Tensor(np.zeros(3)), Tensor(np.zeros(2))], ["relu", "none"])


class TestSoftmax:
    def test_examples(self):
        assert np.allclose(nx.softmax_rows([[0.0, 0.0]]).data, [[0.5, 0.5]])
        s = nx.softmax_rows([[1000.0, 0.0]]).data
        assert np.all(np.isfinite(s)) and s[0, 0] == pytest.approx(1.0) and s[0, 1] == pytest.approx(0.0)
        np.testing.assert_allclose(
            nx.softmax_rows([[math.log(1), math.log(2), math.log(3)]]).data, [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-12
        )

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e6, 1e6)))
    def test_rows_sum_to_one(self, x):
        s = nx.softmax_rows(x).data
        assert np.all(np.abs(s.sum(axis=1) - 1.0) <= 1e-9)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = nx.total(x)
        assert np.array_equal(nx.backward(tape, loss)[x], np.ones((3, 4)))

    def test_squared_norm(self):
        v = np.random.default_rng(1).normal(size=(5, 1))
        x = Tensor(v, requires_grad=True)
        with Tape() as tape:
            loss = nx.matmul(nx.transpose(x), x)
        np.testing.assert_allclose(nx.backward(tape, loss)[x], 2 * v, rtol=1e-12)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = nx.relu(x)
        with pytest.raises(DimensionError):
            nx.backward(tape, y)

    def test_loss_not_on_tape(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        loss = nx.total(x)  # recorded nowhere
        with pytest.raises(ValueError, match="not on the tape"):
            nx.backward(Tape(), loss)

    def test_each_op_against_finite_differences(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        c = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        idx = np.array([0, 2, 2, 1])

        def forward():
            h = nx.matmul(a, b)  # 3x3
            h = nx.add(h, c)
            s = nx.softmax_rows(nx.mul(h, h))
            g = nx.sigmoid(nx.concat_cols([s, nx.relu(h)]))
            g = nx.layer_norm_rows(g)
            z = nx.gather_rows(g, idx)
            z = nx.segment_sum(z, np.array([1, 0, 1, 1]), 2)
            z = nx.sub(nx.cols(z, 1, 5), nx.scale(nx.cols(nx.sum_rows(z), 0, 4), 0.3))
            return nx.add(nx.l2_norm(z), nx.total(nx.linear(z, nx.transpose(b), None)))

        with Tape() as tape:
            loss = forward()
        grads = nx.backward(tape, loss)
        err = nx.finite_diff_check(lambda: forward().item(), [a, b, c], grads)
        assert err < 1e-6


class TestFiniteDiff:
    def test_quadratic_is_exact(self):
        x = Tensor(np.array([[0.3, -1.2, 2.0]]), requires_grad=True)
        grads = {x: 2 * x.data}
        assert nx.finite_diff_check(lambda: float(np.sum(x.data**2)), [x], grads) < 1e-9

    def test_relu_network_away_from_kinks(self):
        rng = np.random.default_rng(7)
        p = nx.init_mlp(rng, [3, 8, 2])
        x = rng.normal(size=(4, 3))
        with Tape() as tape:
            loss = nx.total(nx.mul(nx.mlp_apply(p, x), nx.mlp_apply(p, x)))
        grads = nx.backward(tape, loss)
        f = lambda: float(np.sum(nx.mlp_apply(p, x).data ** 2))
        assert nx.finite_diff_check(f, p.tensors(), grads) < 1e-4

    def test_corrupted_gradient_is_flagged(self):
        x = Tensor(np.array([[0.5, -1.5]]), requires_grad=True)
        grads = {x: 2 * (2 * x.data)}  # doubled
        err = nx.finite_diff_check(lambda: float(np.sum(x.data**2)), [x], grads)
        assert err == pytest.approx(0.5, abs=1e-6)  # |2g - g| / max(2g, g)
        assert err >= 0.3

    def test_smaller_step_recovers_slope_near_kink(self):
        x = Tensor(np.array([[3e-6, 0.7]]), requires_grad=True)
        with Tape() as tape:
            loss = nx.total(nx.relu(x))
        grads = nx.backward(tape, loss)
        f = lambda: float(np.maximum(x.data, 0).sum())
        assert nx.finite_diff_check(f, [x], grads) > 0.1  # the 1e-5 probe straddles the kink
        report = nx.finite_diff_report(f, [x], grads, eps=[1e-5, 1e-6])
        assert report.worst < 1e-9 and report.checked == 2

    def test_multi_step_still_flags_wrong_gradients(self):
        x = Tensor(np.array([[0.5, -1.5, 2.0]]), requires_grad=True)
        grads = {x: 2 * x.data * np.array([[1.0, 1.0, 1.1]])}
        report = nx.finite_diff_report(lambda: float(np.sum(x.data**2)), [x], grads, eps=[1e-4, 1e-5, 1e-6])
        assert report.worst == pytest.approx(0.1 / 1.1, rel=1e-6)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            nx.finite_diff_check(lambda: 0.0, [], {}, eps=0)


def test_tape_replay_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(11)
        p = nx.init_mlp(rng, [4, 5, 3])
        x = rng.normal(size=(6, 4))
        with Tape() as tape:
            loss = nx.total(nx.softmax_rows(nx.mlp_apply(p, x)))
            loss = nx.l2_norm(nx.mlp_apply(p, x))
        g = nx.backward(tape, loss)
        return loss.data.tobytes() + b"".join(g[t].tobytes() for t in p.tensors())

    assert run() == run()


def test_no_recording_without_tape():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = nx.relu(x)
    assert not y.requires_grad


def test_fp_guard_surfaces_overflow():
    with pytest.raises(NumericError):
        with nx.fp_guard():
            nx.mul(np.array([[1e200]]), np.array([[1e200]]))


def test_good_enough_stops_at_first_agreeing_step():
    x = nx.Tensor(np.array([[2.0]]), requires_grad=True)
    calls = []

    def f():
        calls.append(1)
        return float(x.data[0, 0] ** 2)

    rep = nx.finite_diff_report(f, [x], {x: np.array([[4.0]])}, eps=[1e-5, 1e-6, 1e-7], good_enough=1e-6)
    assert rep.worst <= 1e-6 and len(calls) == 2
