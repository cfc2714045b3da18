import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewbit.diffcore import (
    Adam, BatchNorm, Conv2d, Dense, Parameter, ShapeError, Tensor, container, conv2d, dense,
    functional as F, grad_check, mse, precision, softmax_cross_entropy, tanh,
)
from fewbit.diffcore.gradcheck import relative_error


def uniform(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


class TestDense:
    def test_identity_weight(self):
        y = dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [[1, 2]])

    def test_zero_input_passes_bias(self, rng):
        y = dense(Tensor([[0.0, 0.0]]), Tensor(rng.normal(size=(2, 2))), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(y.data, [[3, 4]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="incompatible"):
            dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))

    def test_gradient_vs_finite_differences(self, rng):
        with precision("float64"):
            x = Tensor(uniform(rng, 2, 3), requires_grad=True)
            w = Parameter(uniform(rng, 3, 2), "w")
            b = Parameter(uniform(rng, 2), "b")
            report = grad_check(lambda: F.sum_all(dense(x, w, b)), [x, w, b], ["x", "w", "b"],
                                tolerance=1e-4)
        assert report.passed, report.summary()


class TestConv2d:
    def test_identity_kernel(self, rng):
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        x = rng.normal(size=(2, 1, 5, 5))
        y = conv2d(Tensor(x), Tensor(k), Tensor([0.0]))
        np.testing.assert_allclose(y.data, x)

    def test_zero_input_gives_bias(self, rng):
        y = conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(rng.normal(size=(1, 2, 3, 3))), Tensor([2.5]))
        np.testing.assert_array_equal(y.data, np.full((1, 1, 4, 4), 2.5))

    def test_rejects_non_3x3(self):
        with pytest.raises(ShapeError, match="3x3"):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))))
        with pytest.raises(ValueError):
            Conv2d(1, 1, np.random.default_rng(0), kernel_size=5)

    def test_matches_direct_loop(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((1, 3, 5, 5))
        for f in range(3):
            for i in range(5):
                for j in range(5):
                    ref[0, f, i, j] = (padded[0, :, i:i + 3, j:j + 3] * k[f]).sum() + b[f]
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k), Tensor(b)).data, ref, rtol=1e-12)

    def test_gradient_vs_finite_differences(self, rng):
        with precision("float64"):
            x = Tensor(uniform(rng, 1, 2, 5, 5), requires_grad=True)
            k = Parameter(uniform(rng, 3, 2, 3, 3), "k")
            b = Parameter(uniform(rng, 3), "b")
            weights = uniform(rng, 1, 3, 5, 5)
            report = grad_check(lambda: F.sum_all(F.mul(conv2d(x, k, b), weights)), [x, k, b],
                                ["x", "k", "b"], tolerance=1e-4)
        assert report.passed, report.summary()


class TestBatchNorm:
    def test_two_point_batch(self):
        bn = BatchNorm(1, dtype=np.float64)
        y = bn(Tensor(np.array([[1.0], [3.0]])))
        expected = 1 / math.sqrt(1 + 1e-5)
        np.testing.assert_allclose(y.data, [[-expected], [expected]], rtol=1e-12)
        np.testing.assert_allclose(y.data, [[-0.999995], [0.999995]], atol=1e-6)

    def test_zero_gamma_outputs_beta(self, rng):
        bn = BatchNorm(3, dtype=np.float64)
        bn.gamma.data[:] = 0
        bn.beta.data[:] = [1, 2, 3]
        y = bn(Tensor(rng.normal(size=(5, 3))))
        np.testing.assert_array_equal(y.data, np.tile([1.0, 2.0, 3.0], (5, 1)))

    @pytest.mark.parametrize("batch", [16, 64])
    def test_train_statistics(self, rng, batch):
        bn = BatchNorm(4, dtype=np.float64)
        y = bn(Tensor(rng.normal(3, 5, size=(batch, 4)))).data
        assert np.all(np.abs(y.mean(axis=0)) < 1e-5)
        assert np.all(np.abs(y.var(axis=0) - 1) < 1e-4)

    def test_running_stats_update_and_eval(self, rng):
        bn = BatchNorm(2, dtype=np.float64)
        x = rng.normal(size=(8, 2))
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0))
        bn.eval()
        y = bn(Tensor(x[:1])).data
        np.testing.assert_allclose(y, (x[:1] - bn.running_mean) / np.sqrt(bn.running_var + 1e-5))

    def test_train_mode_needs_two_items(self):
        with pytest.raises(ValueError, match="at least 2"):
            BatchNorm(2)(Tensor(np.ones((1, 2))))

    def test_gradient_vs_finite_differences(self, rng):
        with precision("float64"):
            bn = BatchNorm(3)
            bn.gamma.data[:] = uniform(rng, 3)
            bn.beta.data[:] = uniform(rng, 3)
            x = Tensor(uniform(rng, 6, 3), requires_grad=True)
            weights = uniform(rng, 6, 3)
            report = grad_check(lambda: F.sum_all(F.mul(bn(x), weights)), [x, bn.gamma, bn.beta],
                                ["x", "gamma", "beta"], tolerance=1e-4)
        assert report.passed, report.summary()


class TestTanh:
    def test_zero(self):
        assert tanh(Tensor([0.0])).data[0] == 0

    def test_saturation(self):
        v = tanh(Tensor([50.0], dtype="float64")).data[0]
        assert 1 - 1e-6 <= v <= 1

    def test_gradient_at_point(self):
        x = Tensor([0.3], requires_grad=True, dtype="float64")
        tanh(x).backward(np.ones(1))
        numeric = (math.tanh(0.3 + 1e-6) - math.tanh(0.3 - 1e-6)) / 2e-6
        assert abs(x.grad[0] - numeric) / abs(numeric) < 1e-6


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
        assert float(loss.data) == pytest.approx(math.log(4), abs=1e-6)
        assert float(loss.data) == pytest.approx(1.386294, abs=1e-6)

    def test_saturated_correct(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1000
        assert float(softmax_cross_entropy(Tensor(logits), np.array([2])).data) == pytest.approx(0, abs=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradient(self, rng):
        with precision("float64"):
            z = Tensor(uniform(rng, 4, 5) * 3, requires_grad=True)
            labels = np.array([0, 4, 2, 2])
            report = grad_check(lambda: softmax_cross_entropy(z, labels), [z], ["logits"], tolerance=1e-4)
        assert report.passed, report.summary()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
    def test_shift_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(3, 6)) * 4
        shifts = rng.uniform(-1, 1, size=(3, 1)) * c
        labels = rng.integers(0, 6, size=3)
        a = float(softmax_cross_entropy(Tensor(logits, dtype="float64"), labels).data)
        b = float(softmax_cross_entropy(Tensor(logits + shifts, dtype="float64"), labels).data)
        assert abs(a - b) <= 1e-6


class TestMSE:
    def test_equal_is_zero(self, rng):
        a = rng.normal(size=(3, 3))
        assert float(mse(Tensor(a), Tensor(a)).data) == 0

    def test_unit(self):
        assert float(mse(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).data) == 1

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_gradient(self, rng):
        with precision("float64"):
            a = Tensor(uniform(rng, 3, 4), requires_grad=True)
            b = Tensor(uniform(rng, 3, 4), requires_grad=True)
            report = grad_check(lambda: mse(a, b), [a, b], ["a", "b"], tolerance=1e-6)
        assert report.passed, report.summary()


class TestPoolAndShape:
    def test_mean_pool_gradient(self, rng):
        with precision("float64"):
            x = Tensor(uniform(rng, 2, 3, 4, 4), requires_grad=True)
            w = uniform(rng, 2, 3, 2, 2)
            report = grad_check(lambda: F.sum_all(F.mul(F.mean_pool2d(x), w)), [x], ["x"])
        assert report.passed, report.summary()

    def test_concat_transpose_gradient(self, rng):
        with precision("float64"):
            a = Tensor(uniform(rng, 2, 3), requires_grad=True)
            b = Tensor(uniform(rng, 2, 2), requires_grad=True)
            w = uniform(rng, 5, 2)
            fn = lambda: F.sum_all(F.mul(F.transpose(F.concat([a, b], axis=1), (1, 0)), w))
            report = grad_check(fn, [a, b], ["a", "b"])
        assert report.passed, report.summary()


class TestAdam:
    def test_zero_gradient_leaves_params(self, rng):
        p = Parameter(rng.normal(size=(3,)), "p")
        before = p.data.copy()
        opt = Adam([p], lr=0.1)
        for _ in range(5):
            opt.zero_grad()
            opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_single_step_hand_evaluated(self):
        # m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps)
        p = Parameter(np.array([1.0]), "p", dtype="float64")
        opt = Adam([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8)
        p.grad[:] = 1.0
        opt.step()
        assert p.data[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)
        assert p.data[0] == pytest.approx(0.9, abs=1e-7)
        assert opt.state.step == 1

    def test_zero_lr_group_is_bit_identical(self, rng):
        frozen = Parameter(rng.normal(size=(4,)), "frozen")
        live = Parameter(rng.normal(size=(4,)), "live")
        before = frozen.data.copy()
        opt = Adam([{"params": [frozen], "lr": 0.0}, {"params": [live], "lr": 0.01}])
        for _ in range(3):
            frozen.grad[:] = rng.normal(size=4)
            live.grad[:] = rng.normal(size=4)
            opt.step()
        assert frozen.data.tobytes() == before.tobytes()
        assert not np.array_equal(live.data, before)
        assert opt.state.step == 3

    def test_decoupled_weight_decay(self):
        p = Parameter(np.array([2.0]), "p", dtype="float64")
        opt = Adam([p], lr=0.1, weight_decay=0.5)
        opt.step()  # zero gradient: only the decay acts
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_moment_shapes(self, rng):
        params = [Parameter(rng.normal(size=s), str(s)) for s in [(2, 3), (4,)]]
        opt = Adam(params)
        for p in params:
            assert opt.state.exp_avg[id(p)].shape == p.shape
            assert opt.state.exp_avg_sq[id(p)].shape == p.shape


class TestGradCheck:
    def test_dense_tanh_mse_chain(self, rng):
        with precision("float64"):
            layer = Dense(4, 3, rng)
            x = Tensor(uniform(rng, 5, 4))
            target = uniform(rng, 5, 3)
            report = grad_check(lambda: mse(tanh(layer(x)), target), layer.parameters(), tolerance=1e-4)
        assert report.passed, report.summary()

    def test_constant_output_is_degenerate_pass(self):
        with precision("float64"):
            w = Parameter(np.ones((2, 2)), "w")
            report = grad_check(lambda: F.sum_all(F.scale(w, 0.0)), [w], ["w"])
        assert report.passed
        assert report.max_rel_error["w"] == 0

    def test_reports_wrong_gradient(self):
        with precision("float64"):
            x = Tensor(np.array([0.5, -0.2]), requires_grad=True)

            def broken():
                y = F.scale(x, 3.0)
                return F.sum_all(F.straight_through(y, y.data * y.data))  # forward y^2, backward as identity

            report = grad_check(broken, [x], ["x"])
        assert not report.passed

    def test_reports_non_finite(self):
        with precision("float64"):
            x = Tensor(np.array([1.0]), requires_grad=True)
            report = grad_check(lambda: F.sum_all(F.scale(x, np.inf)), [x], ["x"])
        assert not report.passed
        assert "non-finite" in report.failures[0]

    def test_relative_error_floor(self):
        err = relative_error(np.array([1e-9, 1.0, 0.0]), np.array([-1e-9, 1.0 + 1e-6, 5e-7]))
        assert err[0] == 0
        assert err[1] == pytest.approx(1e-6, rel=1e-3)
        assert err[2] == pytest.approx(1.0)


class TestTensor:
    def test_parameter_gradient_shape(self, rng):
        p = Parameter(rng.normal(size=(3, 2)), "p")
        assert p.gradient.shape == p.shape
        dense(Tensor(rng.normal(size=(4, 3))), p).backward(np.ones((4, 2), dtype=p.dtype))
        assert p.gradient.shape == p.shape

    def test_values_row_major(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(t.values, [0, 1, 2, 3, 4, 5])
        assert int(np.prod(t.shape)) == t.values.size

    def test_precision_context(self):
        assert Tensor([1]).dtype == np.float32
        with precision("float64"):
            assert Tensor([1]).dtype == np.float64
            assert Parameter(np.zeros(2, dtype=np.float32), "p").dtype == np.float64
        with pytest.raises(ValueError):
            with precision("float16"):
                pass

    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True, dtype="float64")
        y = F.mul(x, x)
        z = F.add(y, y)
        z.backward(np.ones(1))
        assert x.grad[0] == pytest.approx(8.0)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            layer = Dense(6, 4, rng)
            x = Tensor(rng.normal(size=(3, 6)))
            out = mse(tanh(layer(x)), np.zeros((3, 4), dtype=np.float32))
            out.backward()
            return out.data.tobytes() + layer.weight.grad.tobytes()

        assert run() == run()


class TestContainer:
    def test_round_trip(self, rng, tmp_path):
        arrays = {"a.weight": rng.normal(size=(3, 2)).astype(np.float32),
                  "b": rng.normal(size=(4,)), "steps": np.arange(3, dtype=np.int64)}
        path = tmp_path / "m.fcmp"
        container.save(path, arrays, {"k": 1})
        back, meta = container.load(path)
        assert meta == {"k": 1}
        assert list(back) == list(arrays)
        for key in arrays:
            assert back[key].dtype == arrays[key].dtype
            np.testing.assert_array_equal(back[key], arrays[key])

    def test_layout_header(self):
        blob = container.dumps({"w": np.array([1.0], dtype=np.float32)}, {})
        assert blob[:4] == b"FCMP"
        assert blob[4:6] == (1).to_bytes(2, "little")
        assert blob.endswith(np.float32(1.0).tobytes())

    def test_truncated(self):
        blob = container.dumps({"w": np.ones(4)}, {})
        with pytest.raises(container.ContainerError, match="truncated"):
            container.loads(blob[:-3])

    def test_bad_magic(self):
        with pytest.raises(container.ContainerError, match="magic"):
            container.loads(b"XXXX" + b"\0" * 20)
