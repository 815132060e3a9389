import io
import math

import numpy as np
import pytest
import torch

from multipitch.losses import bce_grid
from multipitch.model import (
    ModelConfig,
    backward,
    build,
    load_checkpoint,
    save_checkpoint,
)
from multipitch.spectral import HcqtTensor, SpectralConfig, amplitude_to_unit_db

TOY = ModelConfig(n_blocks=2, base_filters=4, bins_total=40, in_channels=6, seed=7)


def toy_input(n_frames=16, seed=0, bins=40, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(6, bins, n_frames, generator=gen, dtype=dtype)


class TestConfig:
    def test_auto_stride_schedule_divides_440(self):
        cfg = ModelConfig(n_blocks=4, bins_total=440)
        assert cfg.freq_stride == (2, 2, 2, 1)
        assert 440 % int(np.prod(cfg.freq_stride)) == 0

    def test_uniform_stride_kept_when_divisible(self):
        cfg = ModelConfig(n_blocks=2, bins_total=440)
        assert cfg.freq_stride == (2, 2)

    def test_indivisible_stride_rejected(self):
        with pytest.raises(ValueError, match="not divisible"):
            ModelConfig(n_blocks=4, freq_stride=2, bins_total=440)

    def test_paper_preset(self):
        cfg = ModelConfig.paper()
        assert cfg.n_blocks == 4
        assert cfg.base_filters == 16
        assert 440 % int(np.prod(cfg.freq_stride)) == 0


class TestBuildAndForward:
    def test_toy_shape_contract(self):
        model = build(TOY)
        out = model(toy_input())
        assert tuple(out.shape) == (40, 16)

    def test_paper_shape_contract(self):
        model = build(ModelConfig.paper(base_filters=4))
        x = torch.rand(1, 6, 440, 23)
        assert tuple(model(x).shape) == (1, 440, 23)

    def test_same_seed_rebuild_is_bitwise(self):
        a, b = build(TOY), build(TOY)
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a = build(TOY)
        b = build(ModelConfig(**{**TOY.__dict__, "seed": 8}))
        assert any(
            not torch.equal(pa, pb)
            for pa, pb in zip(a.state_dict().values(), b.state_dict().values())
        )

    def test_constant_network_outputs_sigmoid_bias(self):
        model = build(TOY)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            model.head.bias.fill_(0.25)
        out = model(toy_input())
        expected = torch.sigmoid(torch.tensor(0.25))
        assert torch.allclose(out, expected.expand_as(out))

    def test_output_strictly_inside_unit_interval(self):
        model = build(TOY)
        out = model(toy_input(seed=3))
        assert out.min() > 0.0 and out.max() < 1.0

    def test_wrong_bins_rejected(self):
        model = build(TOY)
        with pytest.raises(ValueError, match="bins"):
            model(torch.rand(6, 41, 16))

    def test_wrong_channels_rejected(self):
        model = build(TOY)
        with pytest.raises(ValueError, match="channels"):
            model(torch.rand(5, 40, 16))

    def test_prefix_agreement_across_lengths(self):
        model = build(TOY)
        radius = model.receptive_radius_frames
        long = toy_input(n_frames=64, seed=5)
        short = long[..., :48]
        out_long = model(long)
        out_short = model(short)
        keep = 48 - radius
        assert keep > 4
        assert torch.allclose(out_long[:, :keep], out_short[:, :keep], atol=1e-6)

    def test_time_translation_covariance(self):
        model = build(TOY)
        radius = model.receptive_radius_frames
        n, shift = 64, 5
        x = toy_input(n_frames=n, seed=6)
        shifted = torch.zeros_like(x)
        shifted[..., shift:] = x[..., : n - shift]
        out = model(x)
        out_shifted = model(shifted)
        lo, hi = shift + radius, n - radius
        assert hi - lo > 4
        assert torch.allclose(
            out_shifted[:, lo:hi], out[:, lo - shift : hi - shift], atol=1e-6
        )

    def test_predict_wraps_hcqt(self):
        model = build(TOY)
        cfg = SpectralConfig(bins_total=40)
        linear = np.random.default_rng(0).random((6, 40, 12)).astype(np.float32)
        hcqt = HcqtTensor(
            linear=linear,
            unit_db=amplitude_to_unit_db(linear),
            frame_times=np.arange(12) * (256 / 22050),
            config=cfg,
        )
        grid = model.predict(hcqt)
        assert grid.values.shape == (40, 12)
        assert np.array_equal(grid.frame_times, hcqt.frame_times)


class TestBackward:
    def test_detached_loss_gives_zero_gradients(self):
        model = build(TOY)
        loss = model(toy_input()).sum().detach()
        grads = backward(model, loss)
        assert all(torch.all(g == 0) for g in grads.values())

    def test_non_tensor_loss_rejected(self):
        model = build(TOY)
        with pytest.raises(ValueError, match="forward"):
            backward(model, 1.0)

    def test_one_parameter_linear_toy(self):
        # d/dw BCE(sigmoid(w * x), t) = (sigmoid(w x) - t) * x = -0.5 at w=0
        w = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        pred = torch.sigmoid(w * 1.0).reshape(1, 1)
        target = torch.ones(1, 1, dtype=torch.float64)
        loss = bce_grid(pred, target)
        (grad,) = torch.autograd.grad(loss, w)
        assert grad.item() == pytest.approx(-0.5, rel=1e-9)

    def test_gradients_match_finite_differences_spot_check(self):
        model = build(ModelConfig(n_blocks=2, base_filters=2, bins_total=16,
                                  in_channels=6, seed=11)).double()
        x = toy_input(n_frames=8, seed=11, bins=16, dtype=torch.float64)
        target = torch.rand(16, 8, generator=torch.Generator().manual_seed(1),
                            dtype=torch.float64)

        def loss_value():
            return bce_grid(model(x), target)

        grads = backward(model, loss_value())
        params = dict(model.named_parameters())
        rng = np.random.default_rng(2)
        h = 1e-4
        checked = 0
        for name, p in params.items():
            flat = p.detach().reshape(-1)
            for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                with torch.no_grad():
                    orig = flat[idx].item()
                    flat[idx] = orig + h
                    up = loss_value().item()
                    flat[idx] = orig - h
                    down = loss_value().item()
                    flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = grads[name].reshape(-1)[idx].item()
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom < 1e-3, f"{name}[{idx}]: fd={fd} an={an}"
                checked += 1
        assert checked > 50


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        model = build(TOY)
        x = toy_input(seed=9)
        before = model(x)
        path = tmp_path / "model.mpck"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        assert torch.equal(loaded(x), before)

    def test_round_trip_through_memory(self):
        model = build(TOY)
        buf = io.BytesIO()
        save_checkpoint(model, buf)
        buf.seek(0)
        loaded = load_checkpoint(buf)
        for a, b in zip(model.state_dict().values(), loaded.state_dict().values()):
            assert torch.equal(a, b)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.mpck"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)


class TestParameterPartition:
    def test_groups_cover_all_parameters_once(self):
        model = build(TOY)
        enc = [id(p) for p in model.encoder_parameters()]
        dec = [id(p) for p in model.decoder_parameters()]
        assert len(enc) + len(dec) == sum(1 for _ in model.parameters())
        assert set(enc).isdisjoint(dec)

    def test_latent_stage_belongs_to_encoder(self):
        model = build(TOY)
        enc = {id(p) for p in model.encoder_parameters()}
        assert id(model.latent.weight) in enc
