import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from msan import tensorcore as tc
from msan.tensorcore import ParamStore, Tensor


def brute_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2)
        np.testing.assert_array_equal(tc.matmul(Tensor(eye), Tensor(eye)).data, eye)

    def test_row_dot_products(self):
        out = tc.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(tc.DimensionError, match=r"\(3, 2\).*\(3, 2\)"):
            tc.matmul(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 2))))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_triple_loop_exactly(self, seed):
        r = np.random.default_rng(seed)
        m, k, n = r.integers(1, 17, size=3)
        # integer-valued entries make every summation order exact
        a = r.integers(-50, 50, size=(m, k)).astype(float)
        b = r.integers(-50, 50, size=(k, n)).astype(float)
        np.testing.assert_array_equal(tc.matmul(Tensor(a), Tensor(b)).data, brute_matmul(a, b))

    def test_matches_triple_loop_on_reals(self, rng):
        a, b = rng.normal(size=(16, 16)), rng.normal(size=(16, 16))
        np.testing.assert_allclose(tc.matmul(Tensor(a), Tensor(b)).data, brute_matmul(a, b), rtol=1e-12, atol=1e-12)


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(tc.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_against_exp_normalisation(self):
        expect = np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum()
        out = tc.softmax_rows(Tensor([[1.0, 2.0]])).data[0]
        np.testing.assert_allclose(out, expect, rtol=1e-14)
        np.testing.assert_allclose(out, [0.26894, 0.73106], atol=1e-5)

    def test_large_logits_do_not_overflow(self):
        out = tc.softmax_rows(Tensor([[1000.0, 1000.0]])).data
        np.testing.assert_array_equal(out, [[0.5, 0.5]])

    def test_empty_rows_rejected(self):
        with pytest.raises(tc.DimensionError):
            tc.softmax_rows(Tensor(np.zeros((2, 0))))

    def test_mask_zeroes_entries(self):
        out = tc.softmax(Tensor([[1.0, 2.0, 3.0]]), mask=[[True, False, True]]).data
        assert out[0, 1] == 0.0
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=8),
                      elements=st.floats(-1e3, 1e3)))
    def test_rows_are_distributions(self, x):
        p = tc.softmax_rows(Tensor(x)).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(tc.elementwise(Tensor([-1.0, 0.0, 2.0]), "relu").data, [0, 0, 2])

    def test_sigmoid_values(self):
        assert tc.elementwise(Tensor(0.0), "sigmoid").item() == 0.5
        assert tc.elementwise(Tensor(2.0), "sigmoid").item() == pytest.approx(1 / (1 + np.exp(-2.0)), rel=1e-14)
        assert tc.elementwise(Tensor(2.0), "sigmoid").item() == pytest.approx(0.88080, abs=1e-5)

    def test_sigmoid_strictly_inside_unit_interval(self):
        s = tc.sigmoid(Tensor(np.linspace(-30, 30, 61))).data
        assert np.all((s > 0) & (s < 1))

    @pytest.mark.parametrize("kind,expect", [("add", [3.0, 4.0]), ("mul", [2.0, 4.0]), ("sub", [-1.0, 0.0])])
    def test_binary_with_scalar(self, kind, expect):
        np.testing.assert_array_equal(tc.elementwise(Tensor([1.0, 2.0]), kind, 2.0).data, expect)

    def test_incompatible_shapes(self):
        with pytest.raises(tc.DimensionError):
            tc.elementwise(Tensor(np.ones((2, 3))), "add", Tensor(np.ones((4,))))

    def test_unknown_kind(self):
        with pytest.raises(tc.ContractError):
            tc.elementwise(Tensor([1.0]), "cube")


class TestConcatAndPool:
    def test_single_input_unchanged(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(tc.concat_feature([Tensor(a)]).data, a)

    def test_shape_law_and_column_bookkeeping(self, rng):
        xs = [rng.normal(size=(2, 3)) for _ in range(3)]
        out = tc.concat_feature([Tensor(x) for x in xs]).data
        assert out.shape == (2, 9)
        np.testing.assert_array_equal(out[:, 4], xs[1][:, 1])

    def test_row_mismatch(self):
        with pytest.raises(tc.DimensionError):
            tc.concat_feature([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])

    def test_gradient_splits_back(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 1)), requires_grad=True)
        w = np.arange(6.0).reshape(2, 3)
        tc.backward(tc.sum(tc.mul(tc.concat_feature([a, b]), w)))
        np.testing.assert_array_equal(a.grad, w[:, :2])
        np.testing.assert_array_equal(b.grad, w[:, 2:])

    def test_maxpool_single_row(self):
        np.testing.assert_array_equal(tc.maxpool_time(Tensor([[1.0, -2.0]])).data, [1.0, -2.0])

    def test_maxpool_per_column(self):
        np.testing.assert_array_equal(tc.maxpool_time(Tensor([[1.0, 5.0], [3.0, 2.0]])).data, [3.0, 5.0])

    def test_maxpool_tie_goes_to_first_row(self):
        x = Tensor([[2.0, 1.0], [2.0, 1.0], [0.0, 1.0]], requires_grad=True)
        tc.backward(tc.sum(tc.maxpool_time(x)))
        np.testing.assert_array_equal(x.grad, [[1, 1], [0, 0], [0, 0]])

    def test_maxpool_empty(self):
        with pytest.raises(tc.EmptySequenceError):
            tc.maxpool_time(Tensor(np.zeros((0, 3))))

    def test_maxpool_respects_mask(self):
        x = Tensor([[[1.0], [9.0]]])
        assert tc.maxpool_time(x, mask=[[True, False]]).data.item() == 1.0


class TestBackward:
    def test_sum_gives_ones(self):
        p = ParamStore()
        w = p.add("w", [[1.0, 2.0], [3.0, 4.0]])
        tc.backward(tc.sum(w), p)
        np.testing.assert_array_equal(w.grad, np.ones((2, 2)))

    def test_power_rule(self):
        p = ParamStore()
        w = p.add("w", [[1.0, -2.0], [0.5, 4.0]])
        tc.backward(tc.sum(tc.mul(w, w)), p)
        np.testing.assert_array_equal(w.grad, 2 * w.data)

    def test_unreached_params_get_zero_grad(self):
        p = ParamStore()
        w = p.add("w", [1.0])
        u = p.add("u", [[1.0, 2.0]])
        tc.backward(tc.sum(w), p)
        np.testing.assert_array_equal(u.grad, np.zeros((1, 2)))

    def test_non_scalar_loss(self):
        with pytest.raises(tc.ContractError):
            tc.backward(Tensor(np.ones(3), requires_grad=True))

    def test_shared_subexpression_accumulates(self):
        x = Tensor(3.0, requires_grad=True)
        y = tc.mul(x, x)
        tc.backward(tc.add(y, y))
        assert x.grad == pytest.approx(12.0)

    def test_ops_are_pure(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        first = tc.softmax(tc.matmul(Tensor(a), Tensor(b))).data
        second = tc.softmax(tc.matmul(Tensor(a), Tensor(b))).data
        assert first.tobytes() == second.tobytes()


class TestGradCheck:
    def test_linear_function_is_exact(self, rng):
        p = ParamStore()
        p.add("x", rng.normal(size=(3, 4)))
        w = rng.normal(size=(3, 4))
        report = tc.grad_check(lambda p: tc.sum(tc.mul(p["x"], w)), p)
        assert report.passed
        assert report.worst < 1e-8

    def test_softmax_matmul_chain(self, rng):
        p = ParamStore()
        p.add("a", rng.normal(size=(3, 4)))
        p.add("b", rng.normal(size=(4, 5)))
        w = rng.normal(size=(3, 5))
        report = tc.grad_check(lambda p: tc.sum(tc.mul(tc.softmax_rows(tc.matmul(p["a"], p["b"])), w)), p, seed=0)
        assert report.passed

    def test_corrupted_backward_is_caught(self, rng):
        def doubled_square(x):
            return tc._node(x.data**2, (x,), lambda g: (4.0 * x.data * g,))  # correct factor is 2

        p = ParamStore()
        p.add("x", rng.normal(size=5))
        report = tc.grad_check(lambda p: tc.sum(doubled_square(p["x"])), p)
        assert not report.passed
        assert report.worst == pytest.approx(1 / 3, rel=1e-6)

    def test_nondeterministic_function(self):
        p = ParamStore()
        p.add("x", [1.0])
        calls = iter(range(100))
        with pytest.raises(tc.DeterminismError):
            tc.grad_check(lambda p: tc.mul(tc.sum(p["x"]), float(next(calls))), p)

    @pytest.mark.parametrize("eps,tol", [(0.0, 1e-4), (1e-5, 0.0), (-1.0, 1e-4)])
    def test_bad_settings(self, eps, tol):
        p = ParamStore()
        p.add("x", [1.0])
        with pytest.raises(tc.ContractError):
            tc.grad_check(lambda p: tc.sum(p["x"]), p, eps=eps, tol=tol)


class TestLSTM:
    def test_matches_reference_recurrence(self, rng):
        B, T, D, H = 2, 4, 3, 5
        x = rng.normal(size=(B, T, D))
        w_in, w_rec, bias = rng.normal(size=(D, 4 * H)), rng.normal(size=(H, 4 * H)), rng.normal(size=4 * H)
        out = tc.lstm(Tensor(x), Tensor(w_in), Tensor(w_rec), Tensor(bias)).data
        sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
        h, c = np.zeros((B, H)), np.zeros((B, H))
        for t in range(T):
            z = x[:, t] @ w_in + h @ w_rec + bias
            i, f, g, o = sig(z[:, :H]), sig(z[:, H : 2 * H]), np.tanh(z[:, 2 * H : 3 * H]), sig(z[:, 3 * H :])
            c = f * c + i * g
            h = o * np.tanh(c)
            np.testing.assert_allclose(out[:, t], h, rtol=1e-12, atol=1e-13)


class TestParamStore:
    def test_sorted_iteration(self):
        p = ParamStore()
        for name in ("b.w", "a.z", "a.b"):
            p.add(name, [0.0])
        assert p.names() == ["a.b", "a.z", "b.w"]
        assert [n for n, _ in p.items()] == p.names()

    def test_duplicate_name(self):
        p = ParamStore()
        p.add("w", [0.0])
        with pytest.raises(ValueError):
            p.add("w", [1.0])

    def test_zero_grads(self, rng):
        p = ParamStore()
        w = p.add("w", rng.normal(size=(2, 2)))
        tc.backward(tc.sum(tc.mul(w, w)), p)
        p.zero_grads()
        assert all(np.all(t.grad == 0) for t in p.values())

    def test_init_is_keyed_by_name(self):
        a, b = ParamStore(rng_seed=3), ParamStore(rng_seed=3)
        a.uniform("x", (3,), 1.0)
        a.uniform("y", (3,), 1.0)
        b.uniform("y", (3,), 1.0)
        np.testing.assert_array_equal(a["y"].data, b["y"].data)
        assert not np.array_equal(a["x"].data, a["y"].data)

    def test_shared_init_key(self):
        p = ParamStore(rng_seed=0)
        p.uniform("x", (4,), 1.0, key="k")
        p.uniform("y", (4,), 1.0, key="k")
        np.testing.assert_array_equal(p["x"].data, p["y"].data)

    def test_checkpoint_round_trip_is_exact(self, tmp_path, rng):
        p = ParamStore(rng_seed=7)
        p.add("enc.w", rng.normal(size=(3, 4)))
        p.add("bias", rng.normal(size=(4,)) * 1e-300)
        p.add("scalar", 3.141592653589793)
        p.save(tmp_path / "ck.npz", meta={"d": 4})
        q, meta = ParamStore.load(tmp_path / "ck.npz")
        assert meta == {"d": 4}
        assert q.rng_seed == 7
        assert q.names() == p.names()
        for name in p.names():
            assert q[name].data.tobytes() == p[name].data.tobytes()
            assert q[name].shape == p[name].shape
