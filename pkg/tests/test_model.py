"""Tests for dense layers, the two heads, Adam, and checkpoint round-trips."""

import math

import numpy as np
import pytest

from smoothproxy.losses import LossHyperparams, ProxyBank, smooth_proxy_anchor_loss
from smoothproxy.model import (
    Adam,
    Backbone,
    ConfidenceModel,
    DenseLayer,
    EmbeddingModel,
    bce_loss_and_grad,
    init_params,
    load_checkpoint,
    one_hot,
    parameters_equal,
    save_checkpoint,
    snapshot_parameters,
)
from smoothproxy.numerics import SeededRng

SIGMOID_2 = 0.8807970779778823  # 1 / (1 + e^-2)
LOG_2 = 0.6931471805599453
ADAM_FIRST_STEP = 0.09999999966666669  # lr=0.1, g=3, fresh state


def fd_gradient(forward, arr, h=1e-6):
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for idx in range(flat.size):
        keep = flat[idx]
        flat[idx] = keep + h
        up = forward()
        flat[idx] = keep - h
        down = forward()
        flat[idx] = keep
        out[idx] = (up - down) / (2.0 * h)
    return grad


def assert_grad_close(got, want, rel, floor=1e-2):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(float(np.max(np.abs(got))), float(np.max(np.abs(want))), floor)
    err = float(np.max(np.abs(got - want))) / scale
    assert err < rel, f"scale-relative gradient error {err:.3e} exceeds {rel:.1e}"


class TestInitParams:
    def test_he_variance(self):
        w = init_params(SeededRng(1), (1000, 1000), "he")
        target = 2.0 / 1000
        assert abs(np.var(w) - target) < 0.1 * target

    def test_xavier_bounds(self):
        w = init_params(SeededRng(2), (50, 30), "xavier")
        limit = math.sqrt(6.0 / 80)
        assert np.all(np.abs(w) <= limit)
        assert abs(np.mean(w)) < 0.02

    def test_unit_normal_rows(self):
        w = init_params(SeededRng(3), (7, 5), "unit_normal_rows")
        assert np.allclose(np.linalg.norm(w, axis=1), 1.0, atol=1e-12)

    def test_deterministic(self):
        a = init_params(SeededRng(4), (6, 6), "he")
        b = init_params(SeededRng(4), (6, 6), "he")
        assert np.array_equal(a, b)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError, match="scheme"):
            init_params(SeededRng(5), (2, 2), "glorot")


class TestDenseLayer:
    def test_zero_params_sigmoid_gives_half(self):
        layer = DenseLayer(np.zeros((3, 2)), np.zeros(3), "sigmoid")
        out = layer.forward(np.array([[5.0, -2.0]]))
        assert np.all(out == 0.5)

    def test_identity_chain_value(self):
        reduce = DenseLayer(np.array([[1.0]]), np.zeros(1), "relu")
        classify = DenseLayer(np.array([[1.0]]), np.zeros(1), "sigmoid")
        hidden = reduce.forward(np.array([[2.0]]))
        assert hidden[0, 0] == 2.0
        out = classify.forward(hidden)
        assert out[0, 0] == pytest.approx(SIGMOID_2, rel=1e-14)

    def test_relu_kills_negative_signal(self):
        reduce = DenseLayer(np.array([[1.0]]), np.zeros(1), "relu")
        classify = DenseLayer(np.array([[3.0]]), np.array([0.7]), "sigmoid")
        out = classify.forward(reduce.forward(np.array([[-4.0]])))
        # relu output is 0, so only the classifier bias survives
        assert out[0, 0] == pytest.approx(1.0 / (1.0 + math.exp(-0.7)), rel=1e-14)

    def test_linear_backward_weight_gradient(self):
        rng = SeededRng(11)
        x = rng.generator.normal(size=(4, 3))
        layer = DenseLayer(rng.generator.normal(size=(2, 3)), np.zeros(2), "none")
        out = layer.forward(x)
        _, grads = layer.backward(np.ones_like(out))
        # loss = sum of outputs: every weight row sees the column sums of x
        expect = np.tile(x.sum(axis=0), (2, 1))
        assert np.allclose(grads["weights"], expect, atol=1e-12)
        assert np.allclose(grads["bias"], [4.0, 4.0], atol=1e-12)

    def test_relu_subgradient_at_zero_is_zero(self):
        layer = DenseLayer(np.array([[1.0]]), np.zeros(1), "relu")
        layer.forward(np.array([[0.0]]))
        grad_x, grads = layer.backward(np.array([[1.0]]))
        assert grad_x[0, 0] == 0.0
        assert grads["weights"][0, 0] == 0.0

    def test_backward_before_forward_raises(self):
        layer = DenseLayer(np.eye(2), np.zeros(2), "none")
        with pytest.raises(RuntimeError, match="before forward"):
            layer.backward(np.ones((1, 2)))

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            DenseLayer(np.eye(2), np.zeros(3))
        layer = DenseLayer(np.eye(2), np.zeros(2))
        with pytest.raises(ValueError, match="columns"):
            layer.forward(np.ones((1, 3)))

    def test_backward_matches_finite_differences(self):
        rng = SeededRng(12)
        for activation in ("none", "relu", "sigmoid"):
            x = rng.generator.normal(size=(5, 4))
            layer = DenseLayer.create(rng.child(activation), 4, 3, activation)
            target = rng.generator.normal(size=(5, 3))

            def forward():
                out = layer.forward(x)
                return float(np.sum((out - target) ** 2))

            forward()
            out = layer.forward(x)
            _, grads = layer.backward(2.0 * (out - target))
            fd_w = fd_gradient(forward, layer.weights)
            fd_b = fd_gradient(forward, layer.bias)
            assert_grad_close(grads["weights"], fd_w, 1e-5)
            assert_grad_close(grads["bias"], fd_b, 1e-5)


class TestConfidenceModel:
    def test_create_dims_and_default_hidden(self):
        model = ConfidenceModel.create(SeededRng(21), 32, 10)
        assert model.reduce.in_dim == 32
        assert model.reduce.out_dim == 8  # feature_dim // 4
        assert model.class_count == 10

    def test_outputs_in_open_interval(self):
        rng = SeededRng(22)
        model = ConfidenceModel.create(rng, 6, 4)
        conf = model.forward(rng.generator.normal(size=(9, 6)))
        assert conf.shape == (9, 4)
        assert np.all(conf > 0.0) and np.all(conf < 1.0)

    def test_forward_counter(self):
        rng = SeededRng(23)
        model = ConfidenceModel.create(rng, 4, 3)
        assert model.forward_calls == 0
        x = rng.generator.normal(size=(2, 4))
        model.forward(x)
        model.forward(x)
        assert model.forward_calls == 2

    def test_bce_backward_matches_finite_differences(self):
        rng = SeededRng(24)
        model = ConfidenceModel.create(rng, 5, 3)
        x = rng.generator.normal(size=(6, 5))
        targets = one_hot(rng.generator.integers(0, 3, size=6), 3)

        def forward():
            return bce_loss_and_grad(model.forward(x), targets)[0]

        conf = model.forward(x)
        _, grad_logits = bce_loss_and_grad(conf, targets)
        grads = model.backward_from_logits(grad_logits)
        for name, param in model.parameters().items():
            fd = fd_gradient(forward, param)
            assert_grad_close(grads[name], fd, 1e-5, floor=1e-4)


class TestEmbeddingModel:
    def test_identity_map_normalizes(self):
        model = EmbeddingModel(DenseLayer(np.eye(2), np.zeros(2), "none"))
        out = model.forward(np.array([[3.0, 4.0]]))
        assert np.allclose(out, [[0.6, 0.8]], atol=1e-15)

    def test_unit_rows_always(self):
        rng = SeededRng(31)
        model = EmbeddingModel.create(rng, 7, 4)
        out = model.forward(rng.generator.normal(size=(20, 7)))
        assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) < 1e-9

    def test_positive_rescaling_invariance(self):
        rng = SeededRng(32)
        model = EmbeddingModel.create(rng, 5, 3)
        x = rng.generator.normal(size=(8, 5))
        base = model.forward(x)
        model.embed.weights *= 7.0
        model.embed.bias *= 7.0
        scaled = model.forward(x)
        assert np.max(np.abs(scaled - base)) < 1e-9

    def test_zero_row_error_names_row(self):
        model = EmbeddingModel(DenseLayer(np.zeros((2, 2)), np.zeros(2), "none"))
        with pytest.raises(ValueError, match="row 0"):
            model.forward(np.ones((1, 2)))

    def test_end_to_end_gradients_with_smooth_loss(self):
        rng = SeededRng(33)
        hp = LossHyperparams()
        model = EmbeddingModel.create(rng, 5, 4)
        bank = ProxyBank.initialize(rng.child("bank"), [0, 1, 2], 4)
        x = rng.generator.normal(size=(6, 5))
        conf = rng.generator.uniform(0.0, 1.0, size=(6, 3))

        def forward():
            emb = model.forward(x)
            return smooth_proxy_anchor_loss(emb, bank, conf, hp).loss

        emb = model.forward(x)
        res = smooth_proxy_anchor_loss(emb, bank, conf, hp)
        _, grads = model.backward(res.grad_embeddings)
        for name, param in model.parameters().items():
            fd = fd_gradient(forward, param)
            assert_grad_close(grads[name], fd, 1e-5)
        fd_px = fd_gradient(forward, bank.proxies)
        assert_grad_close(res.grad_proxies, fd_px, 1e-5)

    def test_backward_before_forward_raises(self):
        model = EmbeddingModel(DenseLayer(np.eye(2), np.zeros(2), "none"))
        with pytest.raises(RuntimeError):
            model.backward(np.ones((1, 2)))


class TestBce:
    def test_perfect_prediction_near_zero(self):
        t = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, _ = bce_loss_and_grad(t, t)
        assert loss == pytest.approx(0.0, abs=1e-10)

    def test_uniform_half_gives_log2(self):
        conf = np.full((4, 3), 0.5)
        targets = one_hot([0, 1, 2, 0], 3)
        loss, _ = bce_loss_and_grad(conf, targets)
        assert loss == pytest.approx(LOG_2, rel=1e-14)

    def test_gradient_form(self):
        conf = np.array([[0.8, 0.3]])
        targ = np.array([[1.0, 0.0]])
        _, grad = bce_loss_and_grad(conf, targ)
        assert np.allclose(grad, [[-0.2 / 2, 0.3 / 2]], atol=1e-15)

    def test_gradient_matches_fd_through_sigmoid(self):
        rng = SeededRng(41)
        logits = rng.generator.normal(size=(5, 4))
        targets = one_hot(rng.generator.integers(0, 4, size=5), 4)

        def sig(z):
            return 1.0 / (1.0 + np.exp(-z))

        def forward():
            return bce_loss_and_grad(sig(logits), targets)[0]

        _, grad = bce_loss_and_grad(sig(logits), targets)
        fd = fd_gradient(forward, logits)
        assert_grad_close(grad, fd, 1e-6, floor=1e-4)

    def test_target_validation(self):
        with pytest.raises(ValueError, match="0 or 1"):
            bce_loss_and_grad(np.array([[0.5]]), np.array([[0.4]]))


class TestAdam:
    def test_zero_gradient_no_change(self):
        opt = Adam(lr=0.1)
        p = np.array([1.0, -2.0])
        opt.step({"p": p}, {"p": np.zeros(2)})
        assert np.array_equal(p, [1.0, -2.0])

    def test_first_step_hand_value(self):
        opt = Adam(lr=0.1)
        p = np.array([5.0])
        opt.step({"p": p}, {"p": np.array([3.0])})
        assert p[0] == pytest.approx(5.0 - ADAM_FIRST_STEP, rel=1e-12)

    def test_matches_scalar_reference(self):
        rng = SeededRng(51)
        grads = rng.generator.normal(size=20)
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        m = v = 0.0
        ref = 0.7
        for t, g in enumerate(grads, 1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        opt = Adam(lr=lr)
        p = np.array([0.7])
        for g in grads:
            opt.step({"p": p}, {"p": np.array([g])})
        assert p[0] == pytest.approx(ref, rel=1e-12)

    def test_decoupled_weight_decay(self):
        opt = Adam(lr=0.1, weight_decay=0.5)
        p = np.array([2.0])
        opt.step({"p": p}, {"p": np.zeros(1)})
        # pure decay: p - lr*wd*p, no Adam movement with zero gradient
        assert p[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, rel=1e-14)

    def test_non_finite_gradient_aborts_untouched(self):
        opt = Adam(lr=0.1, weight_decay=0.1)
        p = np.array([1.0, 2.0])
        with pytest.raises(ValueError, match="non-finite"):
            opt.step({"p": p}, {"p": np.array([1.0, float("nan")])})
        assert np.array_equal(p, [1.0, 2.0])
        assert opt.step_count == 0

    def test_key_mismatch(self):
        opt = Adam(lr=0.1)
        with pytest.raises(ValueError, match="keys"):
            opt.step({"a": np.zeros(1)}, {"b": np.zeros(1)})


class TestBackbone:
    def test_identity_when_dims_match(self):
        bb = Backbone.create(SeededRng(61), 8, 8)
        assert bb.is_identity
        x = np.ones((2, 8))
        assert np.array_equal(bb.transform(x), x)

    def test_projection_when_dims_differ(self):
        bb = Backbone.create(SeededRng(62), 8, 5)
        out = bb.transform(np.ones((3, 8)))
        assert out.shape == (3, 5)

    def test_deterministic(self):
        a = Backbone.create(SeededRng(63), 6, 4)
        b = Backbone.create(SeededRng(63), 6, 4)
        assert np.array_equal(a.weights, b.weights)

    def test_dim_validation(self):
        bb = Backbone.create(SeededRng(64), 8, 5)
        with pytest.raises(ValueError):
            bb.transform(np.ones((2, 7)))


class TestCheckpoints:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = SeededRng(71)
        arrays = {
            "w": rng.generator.normal(size=(3, 4)),
            "b": rng.generator.normal(size=4),
        }
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "test", arrays, {"note": 1})
        kind, loaded, extra = load_checkpoint(path)
        assert kind == "test"
        assert extra == {"note": 1}
        for name in arrays:
            assert loaded[name].tobytes() == arrays[name].tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "test", {"w": np.ones((4, 4))})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_confidence_model_roundtrip(self, tmp_path):
        rng = SeededRng(72)
        model = ConfidenceModel.create(rng, 6, 4)
        x = rng.generator.normal(size=(5, 6))
        before = model.forward(x)
        path = tmp_path / "conf.ckpt"
        model.save(path)
        loaded = ConfidenceModel.load(path)
        assert np.array_equal(loaded.forward(x), before)
        assert parameters_equal(
            snapshot_parameters(model.parameters()),
            snapshot_parameters(loaded.parameters()),
        )

    def test_embedding_model_roundtrip(self, tmp_path):
        rng = SeededRng(73)
        model = EmbeddingModel.create(rng, 6, 3)
        x = rng.generator.normal(size=(5, 6))
        before = model.forward(x)
        path = tmp_path / "emb.ckpt"
        model.save(path)
        loaded = EmbeddingModel.load(path)
        assert np.array_equal(loaded.forward(x), before)

    def test_kind_mismatch(self, tmp_path):
        rng = SeededRng(74)
        model = EmbeddingModel.create(rng, 4, 2)
        path = tmp_path / "emb.ckpt"
        model.save(path)
        with pytest.raises(ValueError, match="expected confidence"):
            ConfidenceModel.load(path)


class TestSnapshots:
    def test_detects_mutation(self):
        rng = SeededRng(81)
        model = ConfidenceModel.create(rng, 4, 2)
        snap = snapshot_parameters(model.parameters())
        assert parameters_equal(snap, snapshot_parameters(model.parameters()))
        model.classify.bias[0] += 1e-16
        assert not parameters_equal(snap, snapshot_parameters(model.parameters()))
