import numpy as np
import pytest

from ccan import autograd as ag
from ccan.autograd import Tensor
from ccan.errors import NumericError, ShapeError, UsageError


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        a = t64(np.eye(2))
        b = t64([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(ag.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_hand_product(self):
        out = ag.matmul(t64([[1.0, 2.0]]), t64([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))

    def test_grad_of_sum_is_ones_times_bt(self):
        # d/dA sum(A @ B) = ones(m, n) @ B^T, cross-checked by finite differences
        rng = np.random.default_rng(0)
        a = t64(rng.normal(size=(3, 4)), requires_grad=True)
        b_val = rng.normal(size=(4, 2))
        b = t64(b_val)
        ag.backward(ag.sum_all(ag.matmul(a, b)))
        expected = np.ones((3, 2)) @ b_val.T
        np.testing.assert_allclose(a.grad, expected, atol=1e-12)

        report = ag.grad_check(lambda: ag.sum_all(ag.matmul(a, b)), [("a", a)], eps=1e-4)
        assert report.max_rel_err < 1e-6


class TestSoftmax:
    def test_uniform(self):
        out = ag.softmax(t64([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3])

    def test_large_inputs_stable(self):
        out = ag.softmax(t64([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_closed_form(self):
        # e^0 / (e^0 + 3) = 1/4 when the other logit is ln 3
        out = ag.softmax(t64([[0.0, np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_rows_stochastic_random(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            x = t64(rng.normal(scale=rng.uniform(0.1, 50), size=(5, 7)))
            out = ag.softmax(x)
            np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-6)
            assert (out.data > 0).all()

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            ag.softmax(t64([[np.nan, 0.0]]))


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        gamma, beta = t64(np.ones(4)), t64(np.zeros(4))
        out = ag.layer_norm(t64([[5.0, 5.0, 5.0, 5.0]]), gamma, beta)
        np.testing.assert_allclose(out.data, np.zeros((1, 4)))

    def test_already_normalized(self):
        gamma, beta = t64(np.ones(2)), t64(np.zeros(2))
        out = ag.layer_norm(t64([[1.0, -1.0]]), gamma, beta, eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = t64(rng.normal(size=(3, 4)), requires_grad=True)
        gamma = t64(rng.normal(size=4), requires_grad=True)
        beta = t64(rng.normal(size=4), requires_grad=True)

        def f():
            h = ag.layer_norm(x, gamma, beta)
            return ag.sum_all(ag.mul(h, h))

        report = ag.grad_check(f, [("x", x), ("gamma", gamma), ("beta", beta)], eps=1e-5)
        assert report.max_rel_err < 1e-6


class TestGelu:
    def test_zero(self):
        assert ag.gelu(t64([0.0])).data[0] == 0.0

    def test_asymptotics(self):
        np.testing.assert_allclose(ag.gelu(t64([10.0])).data[0], 10.0, rtol=1e-9)
        np.testing.assert_allclose(ag.gelu(t64([-10.0])).data[0], 0.0, atol=1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = t64(rng.normal(size=6), requires_grad=True)
        report = ag.grad_check(lambda: ag.sum_all(ag.mul(ag.gelu(x), ag.gelu(x))), [("x", x)], eps=1e-5)
        assert report.max_rel_err < 1e-6


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = t64([1.0, 2.0, 3.0], requires_grad=True)
        ag.backward(ag.sum_all(x))
        np.testing.assert_allclose(x.grad, [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        x = t64([1.0, 2.0], requires_grad=True)
        ag.backward(ag.sum_all(ag.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = t64([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            ag.backward(x)

    def test_repeated_backward_accumulates(self):
        x = t64([1.0, 1.0], requires_grad=True)
        ag.backward(ag.sum_all(x))
        ag.backward(ag.sum_all(x))
        np.testing.assert_allclose(x.grad, [2.0, 2.0])

    def test_reuse_sums_both_paths(self):
        # y used twice: grad equals the sum of the single-use decompositions
        rng = np.random.default_rng(4)
        val = rng.normal(size=(2, 2))
        x = t64(val, requires_grad=True)
        ag.backward(ag.sum_all(ag.mul(x, x) + ag.mul(x, x)))
        reused = x.grad.copy()

        x1 = t64(val, requires_grad=True)
        ag.backward(ag.sum_all(ag.mul(x1, x1)))
        np.testing.assert_allclose(reused, 2.0 * x1.grad)

    def test_bias_broadcast_gradient(self):
        x = t64(np.ones((3, 2)), requires_grad=True)
        b = t64([1.0, 2.0], requires_grad=True)
        ag.backward(ag.sum_all(x + b))
        np.testing.assert_allclose(b.grad, [3.0, 3.0])
        np.testing.assert_allclose(x.grad, np.ones((3, 2)))

    def test_disallowed_broadcast(self):
        with pytest.raises(ShapeError):
            ag.add(t64(np.ones((3, 2))), t64(np.ones((1, 2))))


class TestGradCheck:
    def test_exact_polynomial(self):
        x = t64([1.0, -2.0, 0.5], requires_grad=True)
        report = ag.grad_check(lambda: ag.sum_all(ag.mul(x, x)), [("x", x)], eps=1e-4)
        assert report.max_rel_err < 1e-6

    def test_rejects_bad_eps(self):
        x = t64([1.0], requires_grad=True)
        with pytest.raises(UsageError):
            ag.grad_check(lambda: ag.sum_all(x), [("x", x)], eps=0.0)

    def test_detects_corrupted_gradient(self):
        x = t64([1.0, 2.0], requires_grad=True)

        def bad_square(v):
            out = Tensor(v.data**2)

            def backward(g):
                ag._accum(v, g * 3.0 * v.data)  # deliberately wrong factor

            return ag._make_node(out, (v,), backward)

        report = ag.grad_check(lambda: ag.sum_all(bad_square(x)), [("x", x)], eps=1e-4)
        assert report.max_rel_err > 0.1

    def test_rejects_nondeterministic_f(self):
        x = t64([1.0], requires_grad=True)
        rng = np.random.default_rng(5)

        def f():
            return ag.sum_all(x) * float(rng.normal())

        with pytest.raises(UsageError):
            ag.grad_check(f, [("x", x)])


def _op_cases(rng):
    """(name, params, loss builder) for every differentiable op."""
    a = t64(rng.normal(size=(3, 4)), requires_grad=True)
    b = t64(rng.normal(size=(4, 3)), requires_grad=True)
    c = t64(rng.normal(size=(3, 4)), requires_grad=True)
    bias = t64(rng.normal(size=4), requires_grad=True)
    gamma = t64(rng.normal(size=4) + 1.0, requires_grad=True)
    beta = t64(rng.normal(size=4), requires_grad=True)
    pos = t64(rng.uniform(0.1, 2.0, size=(3, 4)), requires_grad=True)
    tall = t64(rng.normal(size=(4, 4)), requires_grad=True)
    # keep clip inputs off the kinks at +-0.9 so central differences stay valid
    clip_vals = rng.uniform(-2.0, 2.0, size=(3, 4))
    for bound in (-0.9, 0.9):
        near = np.abs(clip_vals - bound) < 0.01
        clip_vals[near] = bound + 0.05
    clip_in = t64(clip_vals, requires_grad=True)

    def sq(v):
        return ag.sum_all(ag.mul(v, v))

    return [
        ("add", [("a", a), ("c", c)], lambda: sq(a + c)),
        ("add_bias", [("a", a), ("bias", bias)], lambda: sq(a + bias)),
        ("sub", [("a", a), ("c", c)], lambda: sq(ag.sub(a, c))),
        ("neg", [("a", a)], lambda: sq(ag.neg(a))),
        ("mul", [("a", a), ("c", c)], lambda: sq(ag.mul(a, c))),
        ("scale", [("a", a)], lambda: sq(a * 1.7)),
        ("matmul", [("a", a), ("b", b)], lambda: sq(ag.matmul(a, b))),
        ("transpose", [("a", a)], lambda: sq(ag.transpose(a))),
        ("softmax", [("a", a)], lambda: sq(ag.softmax(a))),
        ("layer_norm", [("a", a), ("gamma", gamma), ("beta", beta)], lambda: sq(ag.layer_norm(a, gamma, beta))),
        ("gelu", [("a", a)], lambda: sq(ag.gelu(a))),
        ("sigmoid", [("a", a)], lambda: sq(ag.sigmoid(a))),
        ("log", [("pos", pos)], lambda: sq(ag.log(pos))),
        ("clip", [("clip_in", clip_in)], lambda: sq(ag.clip(clip_in, -0.9, 0.9))),
        ("concat_rows", [("a", a), ("c", c)], lambda: sq(ag.concat_rows([a, c]))),
        ("slice_rows", [("a", a)], lambda: sq(ag.slice_rows(a, 1, 3))),
        ("concat_cols", [("a", a), ("c", c)], lambda: sq(ag.concat_cols([a, c]))),
        ("slice_cols", [("a", a)], lambda: sq(ag.slice_cols(a, 1, 3))),
        ("avg_pool_rows", [("tall", tall)], lambda: sq(ag.avg_pool_rows(tall, 2))),
        ("mean_rows", [("a", a)], lambda: sq(ag.mean_rows(a))),
        ("max_rows", [("a", a)], lambda: sq(ag.max_rows(a))),
    ]


@pytest.mark.parametrize("seed", range(21))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, params, f in _op_cases(rng):
        report = ag.grad_check(f, params, eps=1e-3)
        assert report.max_rel_err < 1e-3, f"{name} (seed {seed}): {report.max_rel_err}"


class TestStructureOps:
    def test_avg_pool_rows_values(self):
        out = ag.avg_pool_rows(t64([[2.0], [4.0], [10.0], [0.0]]), 2)
        np.testing.assert_allclose(out.data, [[3.0], [5.0]])

    def test_avg_pool_rows_identity(self):
        x = t64(np.arange(6.0).reshape(3, 2))
        np.testing.assert_allclose(ag.avg_pool_rows(x, 1).data, x.data)

    def test_avg_pool_rows_indivisible(self):
        with pytest.raises(ShapeError):
            ag.avg_pool_rows(t64(np.zeros((5, 2))), 2)

    def test_max_rows_dominant_token(self):
        x = t64([[0.0, 1.0], [1e9, -1e9], [2.0, 3.0]])
        np.testing.assert_allclose(ag.max_rows(x).data, [[1e9, 3.0]])

    def test_clip_values(self):
        out = ag.clip(t64([-2.0, 0.5, 2.0]), 0.0, 1.0)
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])


class TestProbe:
    def test_matmul_macs_counted(self):
        with ag.op_probe() as probe:
            ag.matmul(t64(np.zeros((3, 4))), t64(np.zeros((4, 5))))
        assert probe.macs == 3 * 4 * 5

    def test_no_grad_skips_graph(self):
        x = t64([1.0], requires_grad=True)
        with ag.no_grad():
            out = ag.sum_all(x)
        assert out._backward is None and not out.requires_grad


def test_float32_default_dtype():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).data.dtype == np.float64
