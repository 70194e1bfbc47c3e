import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffvoc.diffusion import (
    SigmaMode,
    draw_reverse_noise,
    forward_sample,
    generate,
    reverse_step,
    sample_continuous_level,
)
from diffvoc.errors import ContractError, NumericalError
from diffvoc.noise_model import DTYPE
from diffvoc.schedules import InferenceSchedule, alpha_bar, alpha_bar_infer, linear_schedule, paper_training_schedule
from diffvoc.trainer import gradcheck


class OraclePredictor(torch.nn.Module):
    """Returns the exact noise that maps x back to a known clean signal."""

    hop_length = 8

    def __init__(self, x0):
        super().__init__()
        self.x0 = x0

    def forward(self, x, mel, level):
        return (x - level * self.x0) / math.sqrt(1 - level**2)


class TestForward:
    def test_moments(self):
        rng = np.random.default_rng(0)
        x0 = torch.full((200000,), 0.5, dtype=DTYPE)
        eps = torch.from_numpy(rng.standard_normal(200000))
        x = forward_sample(x0, 0.36, eps)
        assert float(x.mean()) == pytest.approx(0.3, abs=5e-3)
        assert float(x.var()) == pytest.approx(0.64, rel=1e-2)

    def test_unit_level_is_identity(self):
        x0 = torch.randn(16, dtype=DTYPE)
        torch.testing.assert_close(forward_sample(x0, 1.0, torch.randn(16, dtype=DTYPE)), x0)

    def test_batched_levels(self):
        x0 = torch.ones(2, 4, dtype=DTYPE)
        eps = torch.zeros(2, 4, dtype=DTYPE)
        out = forward_sample(x0, torch.tensor([[0.25], [1.0]], dtype=DTYPE), eps)
        np.testing.assert_allclose(out.numpy(), [[0.5] * 4, [1.0] * 4])

    @pytest.mark.parametrize("a", [0.0, -0.1, 1.5])
    def test_level_domain(self, a):
        with pytest.raises(ContractError):
            forward_sample(torch.zeros(3), a, torch.zeros(3))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            forward_sample(torch.zeros(3), 0.5, torch.zeros(4))


class TestContinuousLevel:
    def test_segment_frequencies_and_bounds(self):
        curve = alpha_bar(linear_schedule(0.05, 0.4, 4))
        rng = np.random.default_rng(5)
        level, comp = sample_continuous_level(curve, rng, size=40000)
        roots = np.sqrt(curve.values)
        np.testing.assert_allclose(level**2 + comp**2, 1.0, rtol=1e-12)
        assert level.min() >= roots[-1] and level.max() <= 1.0
        seg = np.searchsorted(-roots, -level, side="left")
        counts = np.bincount(seg, minlength=5)[1:]
        np.testing.assert_allclose(counts / 40000, 0.25, atol=0.01)

    def test_scalar(self):
        level, comp = sample_continuous_level(alpha_bar(paper_training_schedule()), np.random.default_rng(0))
        assert isinstance(level, float) and 0 < level <= 1
        assert comp == pytest.approx(math.sqrt(1 - level**2))


class TestReverseStep:
    def test_single_step_recovers_x0(self):
        beta = 0.3
        x0 = torch.randn(32, dtype=DTYPE)
        eps = torch.randn(32, dtype=DTYPE)
        x1 = forward_sample(x0, 1 - beta, eps)
        out = reverse_step(x1, eps, beta, 1 - beta, 1.0, None, add_noise=False)
        torch.testing.assert_close(out, x0, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("mode,var", [(SigmaMode.POSTERIOR, (1 - 0.9) / (1 - 0.72) * 0.2), (SigmaMode.BETA, 0.2)])
    def test_sigma(self, mode, var):
        z = torch.ones(4, dtype=DTYPE)
        out = reverse_step(torch.zeros(4, dtype=DTYPE), torch.zeros(4, dtype=DTYPE), 0.2, 0.72, 0.9, z, mode)
        np.testing.assert_allclose(out.numpy(), math.sqrt(var))

    def test_inconsistent_constants(self):
        x = torch.zeros(4, dtype=DTYPE)
        with pytest.raises(ContractError):
            reverse_step(x, x, 0.2, 0.5, 0.9, None, add_noise=False)

    def test_non_finite(self):
        x = torch.zeros(4, dtype=DTYPE)
        bad = torch.tensor([0.0, float("nan"), 0.0, 0.0], dtype=DTYPE)
        with pytest.raises(NumericalError):
            reverse_step(x, bad, 0.2, 0.72, 0.9, None, add_noise=False, step=2)


class TestGenerate:
    schedule = InferenceSchedule((1e-4, 1e-2, 0.5))

    def test_oracle_chain_returns_x0(self):
        x0 = torch.randn(2, 32, dtype=DTYPE)
        out = generate(OraclePredictor(x0), torch.zeros(2, 4, 16, dtype=DTYPE), self.schedule, np.random.default_rng(0))
        torch.testing.assert_close(out, x0, rtol=1e-9, atol=1e-9)

    def test_deterministic_and_differentiable_match(self, predictor):
        mel = torch.from_numpy(np.random.default_rng(1).standard_normal((2, 4, 16)))
        a = generate(predictor, mel, self.schedule, np.random.default_rng(9))
        b = generate(predictor, mel, self.schedule, np.random.default_rng(9))
        c = generate(predictor, mel, self.schedule, np.random.default_rng(9), differentiable=True)
        assert torch.equal(a, b)
        assert torch.equal(a, c.detach())
        assert c.requires_grad and not a.requires_grad

    def test_supplied_noise_layout(self, predictor):
        mel = torch.zeros(2, 4, 16, dtype=DTYPE)
        noise = draw_reverse_noise(np.random.default_rng(3), 3, (2, 32)).swapaxes(0, 1)
        a = generate(predictor, mel, self.schedule, noise=noise)
        b = generate(predictor, mel, self.schedule, np.random.default_rng(3))
        assert torch.equal(a, b)
        unbatched = generate(predictor, mel[0], self.schedule, noise=noise[0])
        torch.testing.assert_close(unbatched, a[0], rtol=1e-12, atol=1e-12)

    def test_last_step_is_noise_free(self, predictor):
        mel = torch.zeros(1, 4, 16, dtype=DTYPE)
        noise = np.random.default_rng(4).standard_normal((1, 1, 32))
        out = generate(predictor, mel, InferenceSchedule((0.3,)), noise=noise)
        x = torch.from_numpy(noise[:, 0])
        expected = reverse_step(x, predictor(x, mel, math.sqrt(0.7)), 0.3, 0.7, 1.0, None, add_noise=False)
        torch.testing.assert_close(out, expected, rtol=0, atol=0)

    def test_noise_shape_checked(self, predictor):
        with pytest.raises(ContractError):
            generate(predictor, torch.zeros(1, 4, 16, dtype=DTYPE), self.schedule, noise=np.zeros((1, 2, 32)))

    def test_needs_rng_or_noise(self, predictor):
        with pytest.raises(ContractError):
            generate(predictor, torch.zeros(1, 4, 16, dtype=DTYPE), self.schedule)

    @pytest.mark.parametrize("betas", [(0.4,), (0.01, 0.5), (1e-4, 1e-2, 0.5)])
    def test_unrolled_gradient_matches_finite_difference(self, predictor, betas):
        sched = InferenceSchedule(betas)
        mel = torch.from_numpy(np.random.default_rng(2).standard_normal((1, 4, 16)))
        target = torch.from_numpy(np.random.default_rng(3).standard_normal((1, 32)))
        noise = np.random.default_rng(4).standard_normal((1, len(betas), 32))

        def loss(p):
            return ((generate(p, mel, sched, noise=noise, differentiable=True) - target) ** 2).mean()

        assert gradcheck(loss, predictor, sample_count=30, seed=1) < 1e-5

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(1e-4, 0.9), min_size=1, max_size=4, unique=True))
    def test_oracle_recovery_any_schedule(self, betas):
        sched = InferenceSchedule(tuple(sorted(betas)))
        x0 = torch.from_numpy(np.random.default_rng(0).standard_normal((1, 16)))
        out = generate(OraclePredictor(x0), torch.zeros(1, 2, 16, dtype=DTYPE), sched, np.random.default_rng(1))
        assert alpha_bar_infer(sched)[-1] < 1
        torch.testing.assert_close(out, x0, rtol=1e-8, atol=1e-8)
