"""Translator network, Adam, training loops and model serialization."""

import numpy as np
import pytest

from cesmkit.errors import ModelFormatError, NumericError, ToolkitError
from cesmkit.grid import ImageGrid
from cesmkit.translator import (
    TrainConfig,
    UNetConfig,
    adam_step,
    infer_translator,
    init_adam,
    init_params,
    load_model,
    loss_and_grads,
    save_model,
    train_translator,
    unet_forward,
)
from cesmkit.translator.gradcheck import finite_diff, rel_error
from cesmkit.translator.train import eval_loss, pairs_to_batches, train_end2end
from synthdata import make_inversion_pairs


class TestForward:
    def test_zero_weights_give_half(self):
        cfg = UNetConfig(base_channels=4, depth=2, dropout_p=0.0)
        params = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
        x = np.random.default_rng(0).random((1, 1, 8, 8), dtype=np.float32)
        out = unet_forward(params, cfg, x)
        assert np.all(out == 0.5)

    def test_eval_mode_deterministic(self):
        cfg = UNetConfig()
        params = init_params(cfg, seed=1)
        x = np.random.default_rng(1).random((2, 1, 16, 16), dtype=np.float32)
        a = unet_forward(params, cfg, x, mode="eval")
        b = unet_forward(params, cfg, x, mode="eval")
        assert np.array_equal(a, b)

    def test_shape_trace_depth3(self):
        cfg = UNetConfig(base_channels=8, depth=3)
        params = init_params(cfg, seed=0)
        x = np.random.default_rng(2).random((2, 1, 32, 32), dtype=np.float32)
        capture = {}
        out = unet_forward(params, cfg, x, capture=capture)
        assert out.shape == (2, 1, 32, 32)
        assert capture["bottleneck"].shape == (2, 32, 8, 8)

    def test_output_in_unit_interval(self):
        for depth, base in ((2, 4), (3, 8), (4, 4)):
            cfg = UNetConfig(base_channels=base, depth=depth, dropout_p=0.0)
            params = init_params(cfg, seed=depth)
            x = np.random.default_rng(3).random((1, 1, 32, 32), dtype=np.float32)
            out = unet_forward(params, cfg, x)
            assert out.shape == x.shape
            assert (out > 0).all() and (out < 1).all()

    def test_indivisible_dims_rejected(self):
        cfg = UNetConfig(base_channels=4, depth=3)
        params = init_params(cfg)
        with pytest.raises(ToolkitError):
            unet_forward(params, cfg, np.zeros((1, 1, 30, 32), np.float32))

    def test_non_finite_parameter_rejected(self):
        cfg = UNetConfig(base_channels=4, depth=2)
        params = init_params(cfg)
        params["enc0.conv1.w"] = params["enc0.conv1.w"].copy()
        params["enc0.conv1.w"][0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            unet_forward(params, cfg, np.zeros((1, 1, 8, 8), np.float32))

    def test_dropout_expectation_matches_eval(self):
        cfg = UNetConfig(base_channels=4, depth=2, dropout_p=0.2)
        params = init_params(cfg, seed=5)
        x = np.random.default_rng(5).random((1, 1, 8, 8), dtype=np.float32)
        ref = unet_forward(params, cfg, x, mode="eval")
        acc = np.zeros_like(ref, dtype=np.float64)
        n = 10000
        for seed in range(n):
            acc += unet_forward(params, cfg, x, mode="train", seed=seed)
        mean = acc / n
        assert np.abs(mean - ref).max() / np.abs(ref).mean() < 0.02


class TestLossAndGrads:
    def test_self_target_zero_l2(self):
        cfg = UNetConfig(base_channels=4, depth=2, dropout_p=0.0)
        params = init_params(cfg, seed=7)
        x = np.random.default_rng(7).random((1, 1, 8, 8), dtype=np.float32)
        target = unet_forward(params, cfg, x)
        loss, grads = loss_and_grads(params, cfg, x, target, loss="L2")
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grads.values())

    def test_network_finite_differences(self):
        cfg = UNetConfig(base_channels=4, depth=2, dropout_p=0.0)
        rng = np.random.default_rng([90, 2])
        params = init_params(cfg, seed=2, dtype=np.float64)
        for k in params:
            if k.endswith(".b"):
                params[k] = rng.uniform(-0.2, 0.2, size=params[k].shape)
        x = rng.random((1, 1, 8, 8))
        target = rng.random((1, 1, 8, 8))
        _, grads = loss_and_grads(params, cfg, x, target, loss="L2", mode="eval")

        def value():
            v, _ = loss_and_grads(params, cfg, x, target, loss="L2", mode="eval")
            return v

        for k in params:
            fd = finite_diff(value, [params[k]])[0]
            err = rel_error(grads[k], fd)
            assert err <= 1e-4, f"{k}: rel err {err:.3e}"

    def test_batch_duplication_keeps_mean_gradients(self):
        cfg = UNetConfig(base_channels=4, depth=2, dropout_p=0.0)
        params = init_params(cfg, seed=9, dtype=np.float64)
        rng = np.random.default_rng(9)
        x = rng.random((2, 1, 8, 8))
        t = rng.random((2, 1, 8, 8))
        _, g1 = loss_and_grads(params, cfg, x, t, loss="L2", mode="eval")
        _, g2 = loss_and_grads(
            params, cfg, np.concatenate([x, x]), np.concatenate([t, t]), loss="L2", mode="eval"
        )
        for k in g1:
            assert np.abs(g1[k] - g2[k]).max() <= 1e-10

    def test_target_shape_mismatch(self):
        cfg = UNetConfig(base_channels=4, depth=2)
        params = init_params(cfg)
        with pytest.raises(ToolkitError):
            loss_and_grads(params, cfg, np.zeros((1, 1, 8, 8), np.float32), np.zeros((1, 1, 4, 4)))


class TestAdam:
    def test_zero_gradients_keep_parameters(self):
        params = {"w": np.array([1.0, 2.0], dtype=np.float32)}
        state = init_adam(params)
        new_params, new_state = adam_step(params, {"w": np.zeros(2, np.float32)}, state, lr=1e-3)
        assert np.array_equal(new_params["w"], params["w"])
        assert new_state.step == 1

    def test_scalar_first_step_is_minus_lr(self):
        params = {"w": np.array([0.0])}
        state = init_adam(params)
        new_params, _ = adam_step(params, {"w": np.array([1.0])}, state, lr=0.01)
        # bias-corrected m_hat = v_hat = 1 on the first unit-gradient step
        assert abs(new_params["w"][0] + 0.01 / (1 + 1e-8)) < 1e-12

    def test_repeated_unit_gradient_trace(self):
        params = {"w": np.array([0.0])}
        state = init_adam(params)
        m = v = 0.0
        w = 0.0
        for t in range(1, 6):
            params, state = adam_step(params, {"w": np.array([1.0])}, state, lr=0.1)
            m = 0.9 * m + 0.1
            v = 0.999 * v + 0.001
            w -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert abs(params["w"][0] - w) < 1e-12

    def test_lr_must_be_positive(self):
        params = {"w": np.zeros(1)}
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.zeros(1)}, init_adam(params), lr=0.0)


class TestTraining:
    def test_deterministic_history(self):
        pairs = make_inversion_pairs(n=8, size=16)
        cfg = UNetConfig(base_channels=4, depth=2, dropout_p=0.2)
        tc = TrainConfig(lr=5e-4, epochs=4, batch_size=4, seed=11)
        _, h1 = train_translator(pairs, cfg, tc)
        _, h2 = train_translator(pairs, cfg, tc)
        assert h1 == h2

    def test_best_validation_is_monotone_floor(self):
        pairs = make_inversion_pairs(n=8, size=16)
        cfg = UNetConfig(base_channels=4, depth=2, dropout_p=0.0)
        tc = TrainConfig(lr=5e-4, epochs=10, batch_size=8, seed=1)
        params, history = train_translator(pairs, cfg, tc)
        vals = [v for _, v in history]
        best_so_far = np.minimum.accumulate(vals)
        assert (np.diff(best_so_far) <= 1e-12).all()
        # returned parameters achieve the best recorded validation loss
        xs, ys = pairs_to_batches(pairs)
        assert abs(eval_loss(params, cfg, xs, ys, "L1") - min(vals)) < 1e-7

    def test_epochs_zero_rejected(self):
        with pytest.raises(ToolkitError):
            TrainConfig(epochs=0)

    def test_end2end_learns_separable_toy(self):
        rng = np.random.default_rng(3)
        samples = []
        for i in range(12):
            dark = rng.integers(0, 60, size=(16, 16)).astype(np.uint8)
            bright = rng.integers(180, 250, size=(16, 16)).astype(np.uint8)
            samples.append((dark, 0) if i % 2 else (bright, 1))
        cfg = UNetConfig(base_channels=4, depth=2, dropout_p=0.0)
        tc = TrainConfig(lr=1e-3, epochs=20, batch_size=6, seed=2)
        _, _, history = train_end2end(samples, cfg, tc)
        assert history[-1] < history[0]


class TestInference:
    def test_zero_weight_model_gives_uniform_128(self):
        cfg = UNetConfig(base_channels=4, depth=2, dropout_p=0.0)
        params = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
        le = ImageGrid(np.random.default_rng(1).integers(0, 256, size=(16, 16)).astype(np.uint8))
        out = infer_translator(params, cfg, le)
        assert np.all(out.pixels == 128)

    def test_same_input_same_output(self):
        cfg = UNetConfig(base_channels=4, depth=2)
        params = init_params(cfg, seed=3)
        le = ImageGrid(np.random.default_rng(2).integers(0, 256, size=(16, 16)).astype(np.uint8))
        assert np.array_equal(infer_translator(params, cfg, le).pixels,
                              infer_translator(params, cfg, le).pixels)

    def test_odd_dims_padded_and_cropped(self):
        cfg = UNetConfig(base_channels=4, depth=3)
        params = init_params(cfg, seed=4)
        le = ImageGrid(np.random.default_rng(3).integers(0, 256, size=(30, 50)).astype(np.uint8))
        out = infer_translator(params, cfg, le)
        assert (out.height, out.width) == (30, 50)

    def test_trained_inversion_beats_untrained(self):
        pairs = make_inversion_pairs(n=8, size=16)
        cfg = UNetConfig(base_channels=4, depth=2, dropout_p=0.0)
        tc = TrainConfig(lr=1e-3, epochs=60, batch_size=8, seed=5)
        trained, _ = train_translator(pairs, cfg, tc)
        untrained = init_params(cfg, seed=5)
        test_le = ImageGrid(pairs[0][0])
        want = 255 - pairs[0][0].astype(int)
        mae_trained = np.abs(infer_translator(trained, cfg, test_le).pixels.astype(int) - want).mean()
        mae_untrained = np.abs(infer_translator(untrained, cfg, test_le).pixels.astype(int) - want).mean()
        assert mae_trained < mae_untrained


class TestSerialization:
    def _model(self):
        cfg = UNetConfig(base_channels=4, depth=2, dropout_p=0.2)
        return init_params(cfg, seed=8), cfg

    def test_roundtrip_bit_exact(self, tmp_path):
        params, cfg = self._model()
        path = tmp_path / "m.bin"
        save_model(params, cfg, path)
        loaded, loaded_cfg = load_model(path)
        assert loaded_cfg == cfg
        assert list(loaded) == list(params)
        for k in params:
            assert loaded[k].dtype == np.float32
            assert np.array_equal(loaded[k], params[k])

    def test_truncated_file_fails_checksum(self, tmp_path):
        params, cfg = self._model()
        path = tmp_path / "m.bin"
        save_model(params, cfg, path)
        data = path.read_bytes()
        path.write_bytes(data[:-9])
        with pytest.raises(ModelFormatError, match="checksum"):
            load_model(path)

    def test_altered_magic_rejected(self, tmp_path):
        params, cfg = self._model()
        path = tmp_path / "m.bin"
        save_model(params, cfg, path)
        data = bytearray(path.read_bytes())
        data[0] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(path)

    def test_version_bump_rejected(self, tmp_path):
        params, cfg = self._model()
        path = tmp_path / "m.bin"
        save_model(params, cfg, path)
        data = bytearray(path.read_bytes())
        data[8] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_payload_corruption_fails_checksum(self, tmp_path):
        params, cfg = self._model()
        path = tmp_path / "m.bin"
        save_model(params, cfg, path)
        data = bytearray(path.read_bytes())
        data[60] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(ModelFormatError, match="checksum"):
            load_model(path)
