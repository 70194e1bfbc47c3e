import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffvoc.errors import ConfigurationError, ContractError
from diffvoc.losses import (
    LOG_FLOOR,
    LossBreakdown,
    MultiResConfig,
    StftConfig,
    build_filterbanks,
    diffusion_loss,
    hz_to_mel,
    infer_loss,
    log_mel,
    loss_mag,
    loss_pha,
    mel_filterbank,
    mel_to_hz,
    stft,
    total_loss,
)
from oracles import np_stft

CFG = StftConfig(64, 40)
FB = mel_filterbank(8000, 64, 16, 80.0, 4000.0)


def signal(seed, *shape):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape))


class TestStft:
    def test_matches_numpy(self):
        x = signal(0, 300)
        np.testing.assert_allclose(stft(x, CFG).complex.numpy(), np_stft(x.numpy(), CFG), atol=1e-10)

    def test_dc(self):
        # full-length periodic Hann: DFT is N/2 at bin 0, N/4 at bin 1, zero elsewhere
        mag = stft(torch.ones(256, dtype=torch.float64), StftConfig(64, 64)).magnitude.numpy()
        np.testing.assert_allclose(mag[:, 0], 32.0, rtol=1e-12)
        np.testing.assert_allclose(mag[:, 1], 16.0, rtol=1e-12)
        assert mag[:, 2:].max() < 1e-10

    def test_parseval(self):
        x = signal(1, 256)
        spec = stft(x, CFG).complex[5].numpy()
        full = np.concatenate([spec, np.conj(spec[-2:0:-1])])
        frame = np.pad(x.numpy(), 32, mode="reflect")[5 * 10 : 5 * 10 + 64]
        win = np.zeros(64)
        win[12:52] = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(40) / 40)
        np.testing.assert_allclose(np.sum(np.abs(full) ** 2), 64 * np.sum((frame * win) ** 2), rtol=1e-10)

    def test_default_hop(self):
        assert StftConfig(512, 240).hop == 60

    def test_short_signal(self):
        with pytest.raises(ContractError):
            stft(torch.zeros(30, dtype=torch.float64), CFG)

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            StftConfig(16, 32)


class TestFilterbank:
    def test_htk_round_trip(self):
        f = np.array([0.0, 700.0, 1000.0, 8000.0])
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, rtol=1e-12, atol=1e-9)
        assert hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2))

    def test_rows_have_mass(self):
        for n_fft in (16, 32, 64, 128, 1024):
            fb = mel_filterbank(8000, n_fft, 16, 80.0, 4000.0).matrix
            assert fb.shape == (16, n_fft // 2 + 1)
            assert (fb.sum(axis=1) > 0).all()
            assert fb.min() >= 0 and fb.max() <= 1

    def test_band_centres_ordered(self):
        fb = mel_filterbank(22050, 1024, 80, 80.0, 8000.0).matrix
        peaks = fb.argmax(axis=1)
        assert (np.diff(peaks) >= 0).all()
        assert fb[:, : int(80 / 22050 * 1024)].sum() == 0

    def test_bad_range(self):
        with pytest.raises(ConfigurationError):
            mel_filterbank(8000, 64, 16, 80.0, 5000.0)


class TestMagnitudeLoss:
    def test_identical_is_zero(self):
        x = signal(2, 2, 256)
        assert float(loss_mag(x, x, CFG, FB)) == 0.0

    def test_numpy_oracle(self):
        x, y = signal(3, 256), signal(4, 256)

        def lm(v):
            return np.log(np.maximum(np.abs(np_stft(v, CFG)) @ FB.matrix.T, LOG_FLOOR))

        expected = np.mean(np.abs(lm(x.numpy()) - lm(y.numpy())))
        assert float(loss_mag(x, y, CFG, FB)) == pytest.approx(expected, rel=1e-10)

    def test_gain_gives_log_ratio(self):
        x = signal(5, 256)
        assert float(loss_mag(x, 10 * x, CFG, FB)) == pytest.approx(math.log(10), rel=1e-10)

    def test_symmetric(self):
        x, y = signal(6, 256), signal(7, 256)
        assert float(loss_mag(x, y, CFG, FB)) == pytest.approx(float(loss_mag(y, x, CFG, FB)), rel=1e-14)

    def test_floor_on_silence(self):
        m = log_mel(torch.zeros(3, 33, dtype=torch.float64), FB)
        np.testing.assert_allclose(m.numpy(), math.log(LOG_FLOOR))

    def test_gradcheck(self):
        x = signal(8, 64)
        y = signal(9, 64).requires_grad_()
        assert torch.autograd.gradcheck(lambda v: loss_mag(x, v, StftConfig(32, 20), mel_filterbank(8000, 32, 16, 80.0, 4000.0)), (y,))


class TestPhaseLoss:
    def test_identical_is_zero(self):
        x = signal(10, 2, 256)
        assert float(loss_pha(x, x, CFG)) == 0.0

    def test_sign_flip_is_pi_squared(self):
        x = signal(11, 256)
        assert float(loss_pha(x, -x, CFG)) == pytest.approx(math.pi**2, rel=1e-9)

    def test_gain_invariant(self):
        x, y = signal(12, 256), signal(13, 256)
        assert float(loss_pha(x, 3 * y, CFG)) == pytest.approx(float(loss_pha(x, y, CFG)), rel=1e-9)

    def test_mask_excludes_silent_bins(self):
        x = torch.zeros(256, dtype=torch.float64)
        x[100:140] = signal(14, 40)
        masked = float(loss_pha(x, -x, CFG, mask=True))
        unmasked = float(loss_pha(x, -x, CFG, mask=False))
        assert masked == pytest.approx(math.pi**2, rel=1e-9)
        assert unmasked < masked

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
    def test_bounded(self, seed, shift):
        rng = np.random.default_rng(seed)
        x = torch.from_numpy(rng.standard_normal(128))
        y = torch.from_numpy(rng.standard_normal(128)) * 10**shift
        v = float(loss_pha(x, y, StftConfig(32, 20)))
        assert 0 <= v <= math.pi**2 + 1e-12

    def test_gradcheck(self):
        x = signal(15, 64)
        y = signal(16, 64).requires_grad_()
        assert torch.autograd.gradcheck(lambda v: loss_pha(x, v, StftConfig(32, 20)), (y,))


class TestInferLoss:
    cfg = MultiResConfig.desk()
    fbs = build_filterbanks(cfg, 8000, 16, 80.0, 4000.0)

    def test_identical_is_zero(self):
        x = signal(17, 2, 256)
        r = infer_loss(x, x, self.cfg, self.fbs)
        assert float(r.value) == 0.0
        assert r.mag == [0.0] * 3 and r.pha == [0.0] * 3

    def test_average_of_terms(self):
        x, y = signal(18, 256), signal(19, 256)
        r = infer_loss(x, y, self.cfg, self.fbs)
        parts = [
            float(loss_mag(x, y, res, fb)) + float(loss_pha(x, y, res)) for res, fb in zip(self.cfg.resolutions, self.fbs)
        ]
        assert float(r.value) == pytest.approx(np.mean(parts), rel=1e-12)
        lo = min(min(r.mag), min(r.pha))
        assert float(r.value) <= 2 * max(max(r.mag), max(r.pha)) and float(r.value) >= lo

    def test_ablations(self):
        x, y = signal(20, 256), signal(21, 256)
        mag_only = infer_loss(x, y, MultiResConfig.desk(include_pha=False), self.fbs)
        assert mag_only.pha == []
        assert float(mag_only.value) == pytest.approx(np.mean(mag_only.mag), rel=1e-12)
        with pytest.raises(ConfigurationError):
            MultiResConfig.desk(include_mag=False, include_pha=False)

    def test_round_trip(self):
        assert MultiResConfig.from_dict(self.cfg.to_dict()) == self.cfg

    def test_filterbank_count(self):
        with pytest.raises(ContractError):
            infer_loss(signal(0, 256), signal(1, 256), self.cfg, self.fbs[:2])


class TestDiffusionLoss:
    def test_values(self):
        eps = signal(22, 4, 16)
        assert float(diffusion_loss(eps, eps)) == 0.0
        assert float(diffusion_loss(eps, eps + 0.5)) == pytest.approx(0.25)

    def test_total(self):
        assert float(total_loss(torch.tensor(1.0), torch.tensor(2.0), 0.25)) == 1.5
        with pytest.raises(ContractError):
            total_loss(1.0, 2.0, -1.0)
        b = LossBreakdown(1.0, 2.0, 0.25)
        assert b.total == 1.5 and b.to_dict()["total"] == 1.5
        assert LossBreakdown(1.0).total == 1.0
