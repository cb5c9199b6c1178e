import struct

import numpy as np
import pytest

from curatedcl import autodiff as ad
from curatedcl.errors import ConfigError, DimensionError, FormatError
from curatedcl.losses import LossConfig, regularized_loss
from curatedcl.model import (
    EncoderConfig,
    Forward,
    checkpoint_bytes,
    encoder_forward,
    init_params,
    load_checkpoint,
    projection_forward,
    save_checkpoint,
)

TINY = EncoderConfig(conv_channels=(2, 3), hidden_dim=4, projection_dim=3, image_size=8, init_seed=1)


def images(n, size=8, channels=1, seed=0):
    return np.random.default_rng(seed).normal(size=(n, channels, size, size))


class TestShapes:
    @pytest.mark.parametrize("kind", ["small_cnn", "mlp"])
    def test_output_widths(self, kind):
        cfg = EncoderConfig(kind=kind, conv_channels=(4, 8), hidden_dim=16, projection_dim=8, image_size=12)
        params = init_params(cfg)
        fwd = Forward(params, training=True, track_grad=False)
        h = fwd.encoder(images(6, 12))
        z = fwd.projection(h)
        assert h.shape == (6, 16) and z.shape == (6, 8)

    def test_rgb_input(self):
        cfg = EncoderConfig(conv_channels=(4,), hidden_dim=8, projection_dim=4, in_channels=3, image_size=8)
        h = encoder_forward(init_params(cfg), images(2, 8, 3))
        assert h.shape == (2, 8)

    def test_wrong_channels(self):
        with pytest.raises(DimensionError):
            encoder_forward(init_params(TINY), images(2, 8, 3))

    def test_wrong_hidden_width(self):
        with pytest.raises(DimensionError):
            projection_forward(init_params(TINY), np.zeros((2, 5)))

    def test_config_checks(self):
        with pytest.raises(ConfigError, match="projection_dim"):
            EncoderConfig(hidden_dim=8, projection_dim=16).validate()
        with pytest.raises(ConfigError, match="projection_dim"):
            EncoderConfig(projection_dim=32).validate(batch_size=32)
        with pytest.raises(ConfigError):
            EncoderConfig(conv_channels=(1, 1, 1, 1, 1), image_size=8).validate()
        with pytest.raises(ConfigError):
            EncoderConfig(kind="resnet").validate()


class TestInitAndInference:
    def test_init_is_seeded(self):
        a, b = init_params(TINY), init_params(TINY)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)
        c = init_params(EncoderConfig(**{**TINY.__dict__, "init_seed": 2}))
        assert checkpoint_bytes(a) != checkpoint_bytes(c)

    def test_kaiming_scale(self):
        cfg = EncoderConfig(conv_channels=(64,), hidden_dim=128, projection_dim=32, image_size=8)
        w = init_params(cfg).weights["head.fc0.weight"]
        assert w.std() == pytest.approx(np.sqrt(2 / 128), rel=0.05)

    def test_inference_is_row_independent(self):
        params = init_params(TINY)
        x = images(5)
        full = encoder_forward(params, x).data
        single = encoder_forward(params, x[2:3]).data
        np.testing.assert_allclose(single[0], full[2], atol=1e-12)

    def test_training_forward_leaves_params_alone(self):
        params = init_params(TINY)
        before = checkpoint_bytes(params)
        Forward(params, training=True).encoder(images(4))
        assert checkpoint_bytes(params) == before

    def test_commit_bn_stats(self):
        params = init_params(TINY)
        fwd = Forward(params, training=True)
        fwd.projection(fwd.encoder(images(4)))
        stats = fwd.bn_stats["enc.bn0"]
        params.commit_bn_stats(fwd.bn_stats)
        np.testing.assert_allclose(params.buffers["enc.bn0.running_mean"], 0.1 * stats["mean"])
        np.testing.assert_allclose(params.buffers["enc.bn0.running_var"], 0.9 + 0.1 * stats["var"])


class TestGradients:
    @pytest.mark.parametrize("kind", ["small_cnn", "mlp"])
    def test_end_to_end_loss_gradient(self, kind):
        cfg = EncoderConfig(**{**TINY.__dict__, "kind": kind})
        params = init_params(cfg)
        # zero biases let a fully-rectified row give z = 0 exactly, where
        # row normalization has no derivative
        rng = np.random.default_rng(4)
        for w in params.weights.values():
            w += rng.normal(0, 0.1, size=w.shape)
        fwd = Forward(params, training=True)
        x = images(8, seed=3)

        def loss():
            z = fwd.projection(fwd.encoder(x))
            return regularized_loss(ad.slice_rows(z, 0, 4), ad.slice_rows(z, 4, 8), LossConfig(huber_delta=0.3))[0]

        assert ad.grad_check(loss, list(fwd.leaves.values())) <= 1e-4


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        params = init_params(TINY)
        params.buffers["enc.bn0.running_mean"] += 0.25
        params.metadata["epoch"] = 3
        save_checkpoint(params, tmp_path / "c.cur")
        back = load_checkpoint(tmp_path / "c.cur")
        assert back.config == params.config and back.metadata == {"epoch": 3}
        assert checkpoint_bytes(back) == checkpoint_bytes(params)
        x = images(3)
        assert encoder_forward(back, x).data.tobytes() == encoder_forward(params, x).data.tobytes()

    def test_layout_prefix(self):
        raw = checkpoint_bytes(init_params(TINY))
        assert raw[:4] == b"CUR1" and struct.unpack("<I", raw[4:8]) == (1,)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.cur").write_bytes(b"NOPE" + checkpoint_bytes(init_params(TINY))[4:])
        with pytest.raises(FormatError, match="offset 0"):
            load_checkpoint(tmp_path / "c.cur")

    @pytest.mark.parametrize("cut", [2, 10, 100, 1])
    def test_truncated(self, tmp_path, cut):
        raw = checkpoint_bytes(init_params(TINY))
        (tmp_path / "c.cur").write_bytes(raw[:len(raw) - cut] if cut != 1 else raw[:6])
        with pytest.raises(FormatError, match="byte offset"):
            load_checkpoint(tmp_path / "c.cur")

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "c.cur").write_bytes(checkpoint_bytes(init_params(TINY)) + b"\0")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(tmp_path / "c.cur")
