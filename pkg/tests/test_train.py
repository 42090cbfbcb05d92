import numpy as np
import pytest

from gluattn import tensor as T
from gluattn.data import Dataset, image_dataset, synth_images
from gluattn.errors import ConfigError, DivergenceError, NumericError, ShapeError
from gluattn.gradcheck import grad_check
from gluattn.model import ModelConfig, init_model
from gluattn.tensor import Tensor
from gluattn.train import (AdamW, OptimizerState, TrainConfig, adamw_step, cosine_lr, cross_entropy,
                           decays, evaluate, fit)

LN_10 = 2.302585092994045684
# 1 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * 0.01 * 1.0, mpmath at 40 digits
ADAMW_ONE_STEP = 0.899000002


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype="f64")


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(f64(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(LN_10, abs=1e-9)

    def test_saturated(self):
        logits = np.full((2, 4), -50.0)
        logits[[0, 1], [2, 3]] = 50.0
        assert cross_entropy(f64(logits), [2, 3]).item() < 1e-40

    def test_large_logits_stay_finite(self):
        assert np.isfinite(cross_entropy(f64([[1e4, -1e4, 0.0]]), [1]).item())

    def test_gradient(self):
        x = f64(np.random.default_rng(0).normal(size=(4, 5)))
        assert grad_check(lambda x: cross_entropy(x, [0, 3, 1, 4]), x) < 1e-6

    def test_sequence_targets(self):
        logits = f64(np.zeros((2, 3, 7)))
        assert cross_entropy(logits, np.zeros((2, 3), int)).item() == pytest.approx(np.log(7), abs=1e-12)

    def test_target_checks(self):
        with pytest.raises(ShapeError):
            cross_entropy(f64(np.zeros((2, 3))), [0])
        with pytest.raises(ShapeError):
            cross_entropy(f64(np.zeros((2, 3))), [0, 3])


class TestAdamW:
    def test_single_step_value(self):
        p = f64([1.0])
        adamw_step(OptimizerState(), {"w": p}, {"w": np.array([0.5])}, lr=0.1, weight_decay=0.01)
        assert p.data[0] == pytest.approx(ADAMW_ONE_STEP, abs=1e-9)

    def test_zero_grad_zero_decay_is_noop(self):
        p = f64([1.5, -2.0])
        for _ in range(3):
            adamw_step(OptimizerState(), {"w": p}, {"w": np.zeros(2)}, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_decay_uses_pre_update_value(self):
        p = f64([2.0])
        adamw_step(OptimizerState(), {"w": p}, {"w": np.zeros(1)}, lr=0.5, weight_decay=0.1)
        assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0, abs=1e-15)

    def test_decay_filter(self):
        assert decays("blocks.0.attn.w_q")
        assert decays("patch_proj.weight")
        assert not decays("blocks.0.ln1.gain")
        assert not decays("final_ln.shift")
        assert not decays("tok_embed.table")
        assert not decays("pos_embed.table")

    def test_non_finite_gradient_named(self):
        with pytest.raises(NumericError, match="blocks.1.ffn"):
            adamw_step(OptimizerState(), {"blocks.1.ffn": f64([1.0])}, {"blocks.1.ffn": np.array([np.nan])},
                       lr=0.1)

    def test_bias_correction_over_steps(self):
        # constant gradient: m_hat = g and v_hat = g^2 at every step
        p = f64([0.0])
        state = OptimizerState()
        for _ in range(5):
            adamw_step(state, {"w": p}, {"w": np.array([2.0])}, lr=0.01, eps=0.0, weight_decay=0.0)
        assert p.data[0] == pytest.approx(-0.05, abs=1e-15)

    def test_bitwise_deterministic(self):
        def run():
            rng = np.random.default_rng(0)
            p = f64(rng.normal(size=(3, 3)))
            state = OptimizerState()
            for _ in range(10):
                adamw_step(state, {"w": p}, {"w": rng.normal(size=(3, 3))}, lr=1e-2)
            return p.data.tobytes()
        assert run() == run()

    def test_grad_clip(self):
        p = f64([0.0, 0.0])
        p.grad = np.array([30.0, 40.0])
        opt = AdamW([("w", p)], TrainConfig(grad_clip=1.0, weight_decay=0.0, eps=0.0))
        opt.step(0.1)
        # Adam normalizes per coordinate, so clipping only rescales m and v jointly
        np.testing.assert_allclose(p.data, [-0.1, -0.1], rtol=0, atol=1e-15)
        assert opt.state.m["w"][1] == pytest.approx(0.1 * 0.8, abs=1e-15)


class TestCosine:
    cfg = TrainConfig(lr_max=1e-3, lr_min=1e-5, total_steps=100)

    def test_endpoints(self):
        assert cosine_lr(self.cfg, 0) == 1e-3
        assert cosine_lr(self.cfg, 100) == 1e-5

    def test_midpoint(self):
        assert cosine_lr(self.cfg, 50) == pytest.approx((1e-3 + 1e-5) / 2, abs=1e-15)

    def test_monotone(self):
        values = [cosine_lr(self.cfg, t) for t in range(101)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            cosine_lr(self.cfg, 101)
        with pytest.raises(ConfigError):
            cosine_lr(TrainConfig(), 0)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_max=1e-4, lr_min=1e-3)


def small_problem(n=32, seed=0):
    px, y = synth_images(n, 4, seed, size=8, noise=0.05)
    data = image_dataset(px, y, 4, "f64")
    cfg = ModelConfig(1, 12, 2, 16, "glu", "classify", n_classes=4, n_patches=4, patch_dim=48)
    return cfg, data


class TestFit:
    def test_zero_epochs(self):
        cfg, data = small_problem()
        model = init_model(cfg, dtype="f64")
        before = model.state_dict()
        before = {k: v.copy() for k, v in before.items()}
        assert fit(model, data, TrainConfig(epochs=0)) == []
        for k, v in model.state_dict().items():
            assert v.tobytes() == before[k].tobytes()

    def test_deterministic(self):
        cfg, data = small_problem()
        tc = TrainConfig(lr_max=3e-3, batch_size=8, epochs=3, seed=7)
        runs = []
        for _ in range(2):
            model = init_model(cfg, seed=1, dtype="f64")
            hist = fit(model, data, tc, val=data)
            runs.append(([(r.phase, r.loss, r.lr) for r in hist], model.head.weight.data.tobytes()))
        assert runs[0] == runs[1]

    def test_loss_decreases(self):
        cfg, data = small_problem()
        model = init_model(cfg, seed=1, dtype="f64")
        before, _ = evaluate(model, data)
        fit(model, data, TrainConfig(lr_max=3e-3, batch_size=8, epochs=30))
        after, acc = evaluate(model, data)
        assert after < 0.5 * before
        assert acc > 0.9

    def test_records(self):
        cfg, data = small_problem()
        hist = fit(init_model(cfg, dtype="f64"), data, TrainConfig(lr_max=1e-3, batch_size=10, epochs=2),
                   val=data)
        train = [r for r in hist if r.phase == "train"]
        assert [r.step for r in train] == list(range(1, 9))
        assert [r.phase for r in hist].count("val") == 2
        assert train[0].lr == 1e-3
        assert train[-1].lr < train[0].lr

    def test_divergence(self):
        cfg, data = small_problem()
        model = init_model(cfg, dtype="f64")
        model.head.weight.data[0, 0] = np.inf
        with pytest.raises(DivergenceError) as info:
            fit(model, data, TrainConfig(epochs=1, batch_size=8))
        assert info.value.step == 1


class TestEvaluate:
    class Constant:
        """Stand-in model returning fixed logits for every example."""

        dtype = np.float64

        def __init__(self, row):
            self.row = np.asarray(row, dtype=np.float64)

        def __call__(self, x):
            return T.Tensor(np.tile(self.row, (x.shape[0], 1)), dtype="f64")

    def test_ties_go_to_lowest_class(self):
        data = Dataset(np.zeros((4, 1, 1)), np.array([0, 1, 0, 2]), "classify")
        loss, acc = evaluate(self.Constant([1.0, 1.0, 0.0]), data)
        assert acc == 0.5
        assert loss == pytest.approx(np.mean([-np.log(np.e / (2 * np.e + 1))] * 3 + [-np.log(1 / (2 * np.e + 1))]),
                                     abs=1e-12)

    def test_constant_logits_predict_class_zero(self):
        data = Dataset(np.zeros((50, 1, 1)), np.arange(50) % 10, "classify")
        _, acc = evaluate(self.Constant(np.zeros(10)), data)
        assert acc == 0.1

    def test_perfect_predictor(self):
        targets = np.array([2, 0, 1, 1])

        class Oracle:
            dtype = np.float64

            def __call__(self, x):
                return T.Tensor(np.eye(3)[targets[: x.shape[0]]] * 20.0, dtype="f64")

        _, acc = evaluate(Oracle(), Dataset(np.zeros((4, 1, 1)), targets, "classify"))
        assert acc == 1.0

    def test_batching_does_not_change_result(self):
        cfg, data = small_problem(n=20)
        model = init_model(cfg, dtype="f64")
        a = evaluate(model, data, batch_size=3)
        b = evaluate(model, data, batch_size=256)
        assert a[1] == b[1]
        assert a[0] == pytest.approx(b[0], abs=1e-12)

    def test_empty(self):
        with pytest.raises(ConfigError):
            evaluate(self.Constant([0.0]), Dataset(np.zeros((0, 1, 1)), np.zeros(0, int), "classify"))
