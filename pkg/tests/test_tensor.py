import math

import numpy as np
import pytest

from patchlm import tensor as T


def matmul_oracle(a, b):
    """Triple-loop reference product."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def conv1d_oracle(x, kernel, dilation, causal=True):
    """Direct summation: y[o,t] = sum_{i,j} k[o,i,j] * x[i, t-(K-1-j)*d]."""
    c_in, length = x.shape
    c_out, _, ksize = kernel.shape
    out_len = length if causal else length - (ksize - 1) * dilation
    y = np.zeros((c_out, out_len))
    for o in range(c_out):
        for t in range(out_len):
            base = t if causal else t + (ksize - 1) * dilation
            for i in range(c_in):
                for j in range(ksize):
                    src = base - (ksize - 1 - j) * dilation
                    if 0 <= src < length:
                        y[o, t] += kernel[o, i, j] * x[i, src]
    return y


def logsumexp_oracle(row):
    m = max(row)
    return m + math.log(sum(math.exp(v - m) for v in row))


class TestMatmul:
    def test_identity(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(T.Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_arithmetic(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(4, 3))
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        np.testing.assert_allclose(out.data, matmul_oracle(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeMismatch):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))

    def test_associativity(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            a = rng.normal(size=(4, 5))
            b = rng.normal(size=(5, 6))
            c = rng.normal(size=(6, 3))
            left = (a @ b) @ c
            right = a @ (b @ c)
            assert np.abs(left - right).max() < 1e-9

    def test_backward_rules(self):
        rng = np.random.default_rng(3)
        a = T.parameter(rng.normal(size=(3, 4)))
        b = T.parameter(rng.normal(size=(4, 2)))
        out = T.matmul(a, b)
        g = rng.normal(size=(3, 2))
        out.backward(g)
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_rows(T.Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_stabilized(self):
        out = T.softmax_rows(T.Tensor([[1000.0, 1000.0, 1000.0]]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [[1 / 3] * 3])

    def test_masked(self):
        out = T.softmax_rows(T.Tensor([[0.0, 0.0]]), mask=np.array([[True, False]]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(20, 7)) * 10
        mask = rng.random((20, 7)) > 0.3
        mask[:, 0] = True
        out = T.softmax_rows(T.Tensor(x), mask=mask)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(20), atol=1e-12)
        assert (out.data[~mask] == 0.0).all()

    def test_masked_values_do_not_leak(self):
        # bit-exact independence from masked-out scores
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 6))
        mask = rng.random((4, 6)) > 0.4
        mask[:, 2] = True
        y1 = T.softmax_rows(T.Tensor(x), mask=mask).data
        x2 = x.copy()
        x2[~mask] = 1e9
        y2 = T.softmax_rows(T.Tensor(x2), mask=mask).data
        np.testing.assert_array_equal(y1, y2)

    def test_all_masked_row(self):
        with pytest.raises(T.AllMaskedRow):
            T.softmax_rows(T.Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))


class TestConv1d:
    def test_running_sum(self):
        x = T.Tensor([[1.0, 2.0, 3.0, 4.0]])
        k = T.Tensor(np.ones((1, 1, 3)))
        out = T.conv1d(x, k, dilation=1, causal_left_pad=True)
        np.testing.assert_array_equal(out.data, [[1.0, 3.0, 6.0, 9.0]])

    def test_k1_is_channel_map(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(4, 3))
        out = T.conv1d(T.Tensor(x), T.Tensor(w[:, :, None]), dilation=7)
        np.testing.assert_allclose(out.data, w @ x, atol=1e-12)

    @pytest.mark.parametrize("dilation,causal", [(1, True), (2, True), (3, True), (2, False)])
    def test_against_direct_sum(self, dilation, causal):
        rng = np.random.default_rng(dilation)
        x = rng.normal(size=(3, 17))
        k = rng.normal(size=(2, 3, 3))
        out = T.conv1d(T.Tensor(x), T.Tensor(k), dilation=dilation, causal_left_pad=causal)
        np.testing.assert_allclose(out.data, conv1d_oracle(x, k, dilation, causal), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeMismatch):
            T.conv1d(T.Tensor(np.ones((3, 5))), T.Tensor(np.ones((2, 4, 3))))


class TestCrossEntropy:
    def test_uniform(self):
        logits = T.Tensor(np.zeros((4, 259)))
        out = T.cross_entropy(logits, [5, 100, 258, 0])
        assert abs(out.item() - math.log(259)) < 1e-12

    def test_confident_correct(self):
        logits = np.zeros((3, 259))
        tgt = [7, 19, 250]
        for i, t in enumerate(tgt):
            logits[i, t] = 30.0
        out = T.cross_entropy(T.Tensor(logits), tgt)
        assert out.item() < 1e-9

    def test_against_logsumexp_oracle(self):
        rng = np.random.default_rng(13)
        logits = rng.normal(size=(4, 259)) * 5
        tgt = rng.integers(0, 259, size=4).tolist()
        expected = np.mean([logsumexp_oracle(logits[i]) - logits[i, tgt[i]] for i in range(4)])
        out = T.cross_entropy(T.Tensor(logits), tgt)
        assert abs(out.item() - expected) < 1e-10

    def test_ignore_and_empty(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(3, 259))
        full = T.cross_entropy(T.Tensor(logits[:2]), [4, 9])
        part = T.cross_entropy(T.Tensor(logits), [4, 9, 258], ignore={258})
        assert abs(full.item() - part.item()) < 1e-12
        with pytest.raises(T.EmptyBatch):
            T.cross_entropy(T.Tensor(logits), [258, 258, 258], ignore={258})

    def test_out_of_range(self):
        with pytest.raises(T.OutOfRange):
            T.cross_entropy(T.Tensor(np.zeros((1, 259))), [259])

    def test_sum_reduction(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(5, 10))
        mean = T.cross_entropy(T.Tensor(logits), [1, 2, 3, 4, 5])
        total = T.cross_entropy(T.Tensor(logits), [1, 2, 3, 4, 5], reduction="sum")
        assert abs(total.item() - 5 * mean.item()) < 1e-10


class TestDropout:
    def test_rate_zero_identity(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3))
        out = T.dropout(x, 0.0, rng=np.random.default_rng(0), train=True)
        assert out is x

    def test_eval_identity(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3))
        out = T.dropout(x, 0.9, rng=np.random.default_rng(0), train=False)
        assert out is x

    def test_inverted_scaling(self):
        rng = np.random.default_rng(4)
        x = T.Tensor(np.ones((200, 50)))
        out = T.dropout(x, 0.25, rng=rng, train=True)
        vals = np.unique(out.data)
        assert set(np.round(vals, 12)) <= {0.0, round(1 / 0.75, 12)}
        assert abs(out.data.mean() - 1.0) < 0.05


class TestBackwardMachinery:
    def test_fanout_accumulation(self):
        a = T.parameter([3.0])
        out = T.sum_all(a + a)
        out.backward()
        np.testing.assert_array_equal(a.grad, [2.0])

    def test_each_op_backward_once(self):
        calls = []
        a = T.parameter(np.ones(3))
        b = a * 2.0
        orig = b._bw

        def counting(g):
            calls.append(1)
            orig(g)

        b._bw = counting
        out = T.sum_all(T.add(b, b))
        out.backward()
        assert len(calls) == 1
        np.testing.assert_array_equal(a.grad, [4.0, 4.0, 4.0])

    def test_no_grad_skips_recording(self):
        a = T.parameter(np.ones((2, 2)))
        with T.no_grad():
            out = T.matmul(a, a)
        assert out._bw is None and not out.requires_grad


class TestGradCheck:
    def test_quadratic(self):
        x = T.parameter([1.0, 2.0])
        err = T.grad_check(lambda t: T.sum_all(T.mul(t, t)), x, eps=1e-6)
        assert err < 1e-8
        x.zero_grad()
        out = T.sum_all(T.mul(x, x))
        out.backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)

    def test_softmax_cross_entropy_pipeline(self):
        rng = np.random.default_rng(21)
        x = T.parameter(rng.normal(size=(3, 259)))
        tgt = rng.integers(0, 259, size=3).tolist()

        def f(t):
            return T.cross_entropy(t, tgt)

        assert T.grad_check(f, x, eps=1e-6, sample=64, rng=rng) < 1e-6

    def test_nonfinite_raises(self):
        x = T.parameter([1.0])
        with pytest.raises(T.NonFiniteGradient):
            T.grad_check(lambda t: T.sum_all(t * float("inf")), x)

    @pytest.mark.parametrize("seed", range(10))
    def test_every_op_differentiable(self, seed):
        rng = np.random.default_rng(seed)
        x = T.parameter(rng.normal(size=(3, 8)))
        k = rng.normal(size=(3, 3, 2))
        w = rng.normal(size=(8, 3))
        mask = rng.random((3, 8)) > 0.3
        mask[:, 0] = True
        idx = rng.integers(0, 8, size=5)

        c38 = T.Tensor(rng.normal(size=(3, 8)))
        c68 = T.Tensor(rng.normal(size=(6, 8)))
        c35 = T.Tensor(rng.normal(size=(3, 5)))
        c83 = T.Tensor(rng.normal(size=(8, 3)))
        cases = {
            "matmul": lambda t: T.sum_all(T.matmul(t, T.Tensor(w))),
            "softmax": lambda t: T.sum_all(T.mul(T.softmax_rows(t, mask=mask), c38)),
            "conv": lambda t: T.sum_all(T.conv1d(t, T.Tensor(k), dilation=2)),
            "relu": lambda t: T.sum_all(T.relu(t)),
            "mean": lambda t: T.sum_all(T.mean_axis(t, axis=1)),
            "narrow": lambda t: T.sum_all(T.mul(T.narrow(t, 1, 2, 4), T.narrow(t, 1, 0, 4))),
            "concat": lambda t: T.sum_all(T.mul(T.concat([t, t], axis=0), c68)),
            "index_select": lambda t: T.sum_all(T.mul(T.index_select(t, 1, idx), c35)),
            "transpose": lambda t: T.sum_all(T.mul(T.transpose(t), c83)),
            "reshape": lambda t: T.sum_all(T.mul(T.reshape(t, (8, 3)), c83)),
            "repeat": lambda t: T.sum_all(T.mul(T.repeat(t, 0, 2), c68)),
            "bmm": lambda t: T.sum_all(T.bmm(T.reshape(t, (3, 2, 4)), T.reshape(t, (3, 4, 2)))),
        }
        for name, f in cases.items():
            x.zero_grad()
            err = T.grad_check(f, x, eps=1e-6)
            assert err < 1e-6, f"{name} grad error {err}"


def test_outputs_finite_on_random_inputs():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(4, 16)) * 3
    for out in [
        T.softmax_rows(T.Tensor(x)),
        T.conv1d(T.Tensor(x), T.Tensor(rng.normal(size=(4, 4, 3)))),
        T.relu(T.Tensor(x)),
        T.matmul(T.Tensor(x), T.Tensor(rng.normal(size=(16, 4)))),
    ]:
        assert np.isfinite(out.data).all()
