import json

import numpy as np
import pytest
import torch

from diffvoc import trainer
from diffvoc.audio_data import synth_corpus
from diffvoc.config import FINETUNE, PRETRAIN, RunConfig
from diffvoc.errors import CheckpointConfigMismatch, ConfigurationError, ContractError, NumericalError
from diffvoc.losses import InferLossResult
from diffvoc.noise_model import DTYPE, NetworkConfig, read_checkpoint
from diffvoc.schedules import alpha_bar, paper_range
from diffvoc.trainer import (
    SegmentDataset,
    checkpoint_name,
    finetune_loss,
    gradcheck,
    make_optimizer,
    pretrain_loss,
    pretrain_step,
    run_training,
)


class OraclePredictor(torch.nn.Module):
    """Knows the clean batch, so it returns the exact noise for any input."""

    hop_length = 8

    def __init__(self, x0):
        super().__init__()
        self.x0 = x0
        self.w = torch.nn.Parameter(torch.zeros((), dtype=DTYPE))

    def forward(self, x, mel, level):
        level = torch.as_tensor(level, dtype=DTYPE)
        if level.dim() == 1:
            level = level[:, None]
        return (x - level * self.x0) / torch.sqrt(1 - level**2) + 0 * self.w


@pytest.fixture(scope="module")
def dataset():
    return SegmentDataset(synth_corpus(6, 0.1, seed=2), RunConfig().features)


@pytest.fixture
def config():
    return RunConfig.desk(batch_size=2, max_steps=4, checkpoint_every=2, seed=3)


CURVE = alpha_bar(RunConfig().schedule)


class TestLosses:
    def test_oracle_pretrain_loss_is_zero(self, dataset):
        batch = dataset.sample_batch(np.random.default_rng(0), 4)
        loss = pretrain_loss(OraclePredictor(batch[0]), batch, CURVE, np.random.default_rng(1))
        assert float(loss.detach()) < 1e-20

    def test_oracle_finetune_loss_is_zero(self, dataset, config):
        batch = dataset.sample_batch(np.random.default_rng(0), 2)
        cfg = config.with_training(phase=FINETUNE, n_modes=(2, 3, 6))
        for seed in range(5):
            total, br, n, sched = finetune_loss(OraclePredictor(batch[0]), batch, CURVE, cfg, np.random.default_rng(seed))
            assert float(total.detach()) < 1e-10
            assert br.l_i < 1e-10

    def test_zero_lambda_gives_pretrain_gradient(self, dataset, config, predictor):
        batch = dataset.sample_batch(np.random.default_rng(0), 2)
        cfg = config.with_training(phase=FINETUNE, lambda_by_N={2: 0.0, 3: 0.0, 6: 0.0})
        pretrain_loss(predictor, batch, CURVE, np.random.default_rng(5)).backward()
        g_pre = [p.grad.clone() for p in predictor.parameters()]
        predictor.zero_grad()
        total, *_ = finetune_loss(predictor, batch, CURVE, cfg, np.random.default_rng(5))
        total.backward()
        for a, p in zip(g_pre, predictor.parameters()):
            torch.testing.assert_close(p.grad, a, rtol=1e-14, atol=0)

    def test_lambda_weights_infer_term(self, dataset, config, predictor):
        batch = dataset.sample_batch(np.random.default_rng(0), 2)
        cfg = config.with_training(phase=FINETUNE, lambda_by_N={2: 0.5, 3: 0.5, 6: 0.5})
        total, br, *_ = finetune_loss(predictor, batch, CURVE, cfg, np.random.default_rng(5))
        assert float(total.detach()) == pytest.approx(br.l_d + 0.5 * br.l_i, rel=1e-12)
        assert br.total == pytest.approx(float(total.detach()), rel=1e-12)


class TestModeSampling:
    @pytest.fixture
    def cheap(self, monkeypatch):
        # skip generation and the STFT loss; only the draws matter here
        monkeypatch.setattr(trainer, "generate", lambda p, mel, sched, rng, **kw: torch.zeros(mel.shape[0], 256, dtype=DTYPE))
        monkeypatch.setattr(trainer, "infer_loss", lambda *a: InferLossResult(torch.zeros((), dtype=DTYPE), [], []))

    def test_general_mode_frequencies(self, cheap, dataset, config, predictor):
        cfg = config.with_training(phase=FINETUNE, n_modes=(2, 3, 6))
        rng = np.random.default_rng(0)
        batch = dataset.sample_batch(rng, 1)
        counts = {2: 0, 3: 0, 6: 0}
        draws = 12000  # 2% is about 4.6 standard errors at this count
        for _ in range(draws):
            _, _, n, sched = finetune_loss(predictor, batch, CURVE, cfg, rng)
            counts[n] += 1
            assert sched.N == n
        for n in counts:
            assert counts[n] / draws == pytest.approx(1 / 3, abs=0.02)

    def test_specified_mode_schedule_in_range(self, cheap, dataset, config, predictor):
        cfg = config.with_training(phase=FINETUNE)
        rng = np.random.default_rng(1)
        batch = dataset.sample_batch(rng, 1)
        for _ in range(500):
            _, _, n, sched = finetune_loss(predictor, batch, CURVE, cfg, rng)
            assert n == 3
            for b, (lo, hi) in zip(sched.betas_hat, paper_range(3).per_step_ranges):
                assert lo <= b < hi


class TestSteps:
    def test_pretrain_step_updates(self, dataset, predictor):
        opt = make_optimizer(predictor, 1e-3)
        before = [p.detach().clone() for p in predictor.parameters()]
        rec = pretrain_step(predictor, opt, dataset.sample_batch(np.random.default_rng(0), 2), CURVE, np.random.default_rng(1), 1)
        assert rec.phase == PRETRAIN and rec.grad_norm > 0
        assert predictor.step_count == 1
        assert any(not torch.equal(a, p) for a, p in zip(before, predictor.parameters()))

    def test_non_finite_loss_raises(self, dataset, predictor):
        with torch.no_grad():
            predictor.out.bias.fill_(float("nan"))
        opt = make_optimizer(predictor, 1e-3)
        with pytest.raises(NumericalError) as info:
            pretrain_step(predictor, opt, dataset.sample_batch(np.random.default_rng(0), 2), CURVE, np.random.default_rng(1), 7)
        assert info.value.step == 7


class TestRunTraining:
    def test_checkpoints_and_log(self, dataset, config, tmp_path):
        res = run_training(config, dataset, tmp_path)
        assert [p.name for p in res.checkpoints] == [checkpoint_name(PRETRAIN, 2), checkpoint_name(PRETRAIN, 4)]
        assert res.final_checkpoint.name == "pretrain-0000004.ckpt"
        lines = (tmp_path / "pretrain-steps.jsonl").read_text().splitlines()
        assert [json.loads(ln)["step"] for ln in lines] == [1, 2, 3, 4]
        ck = read_checkpoint(res.final_checkpoint, config.network)
        assert ck.meta["phase_step"] == 4 and ck.predictor.step_count == 4
        assert ck.meta["run_config"] == config.to_dict()

    def test_zero_steps(self, dataset, config, tmp_path):
        res = run_training(config.with_training(max_steps=0), dataset, tmp_path)
        assert res.records == []
        assert [p.name for p in res.checkpoints] == ["pretrain-0000000.ckpt"]

    def test_deterministic(self, dataset, config, tmp_path):
        a = run_training(config, dataset, tmp_path / "a")
        b = run_training(config, dataset, tmp_path / "b")
        assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()

    @pytest.mark.parametrize("phase", [PRETRAIN, FINETUNE])
    def test_resume_is_exact(self, dataset, config, tmp_path, phase):
        init = None
        if phase == FINETUNE:
            init = run_training(config, dataset, tmp_path / "pre").final_checkpoint
        cfg = config.with_training(phase=phase, max_steps=4, checkpoint_every=2)
        full = run_training(cfg, dataset, tmp_path / "full", init_checkpoint=init)
        run_training(cfg.with_training(max_steps=2), dataset, tmp_path / "part", init_checkpoint=init)
        resumed = run_training(cfg, dataset, tmp_path / "part", resume=tmp_path / "part" / checkpoint_name(phase, 2))
        assert resumed.final_checkpoint.read_bytes() == full.final_checkpoint.read_bytes()
        log = f"{phase.lower()}-steps.jsonl"
        strip = lambda p: [{k: v for k, v in json.loads(ln).items() if k != "wall_time"} for ln in p.read_text().splitlines()]
        assert strip(tmp_path / "part" / log) == strip(tmp_path / "full" / log)

    def test_finetune_needs_init(self, dataset, config, tmp_path):
        with pytest.raises(ConfigurationError):
            run_training(config.with_training(phase=FINETUNE), dataset, tmp_path)

    def test_resume_dataset_mismatch(self, dataset, config, tmp_path):
        res = run_training(config, dataset, tmp_path)
        other = SegmentDataset(synth_corpus(6, 0.1, seed=99), config.features)
        with pytest.raises(ConfigurationError, match="digest"):
            run_training(config.with_training(max_steps=6), other, tmp_path, resume=res.final_checkpoint)

    def test_init_config_mismatch(self, dataset, config, tmp_path):
        res = run_training(config.with_training(max_steps=0), dataset, tmp_path)
        other = RunConfig(network=NetworkConfig(level_embedding_dim=16)).with_training(phase=FINETUNE, max_steps=1)
        with pytest.raises(CheckpointConfigMismatch):
            run_training(other, dataset, tmp_path / "ft", init_checkpoint=res.final_checkpoint)


class TestGradcheck:
    def test_quadratic(self):
        model = torch.nn.Linear(3, 2).to(DTYPE)
        x = torch.tensor([[1.0, -2.0, 0.5]], dtype=DTYPE)
        assert gradcheck(lambda m: (m(x) ** 2).sum(), model, sample_count=8) < 1e-8

    def test_detects_wrong_gradient(self):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, v):
                return v**2

            @staticmethod
            def backward(ctx, g):
                return 3 * g  # true derivative is 2v

        model = torch.nn.Linear(2, 1).to(DTYPE)
        with torch.no_grad():
            model.weight.fill_(1.0)
            model.bias.fill_(1.0)
        x = torch.ones(1, 2, dtype=DTYPE)
        assert gradcheck(lambda m: Wrong.apply(m(x)).sum(), model) > 0.1

    def test_validation(self):
        model = torch.nn.Linear(2, 1).to(DTYPE)
        with pytest.raises(ContractError):
            gradcheck(lambda m: m.weight.sum(), model, epsilon=0.0)
        with pytest.raises(ContractError):
            gradcheck(lambda m: m.weight.sum(), torch.nn.Linear(2, 1))

    def test_restores_parameters(self, predictor):
        before = [p.detach().clone() for p in predictor.parameters()]
        x = torch.zeros(1, 32, dtype=DTYPE)
        mel = torch.ones(1, 4, 16, dtype=DTYPE)
        gradcheck(lambda m: (m(x, mel, 0.5) ** 2).mean(), predictor, sample_count=5)
        for a, p in zip(before, predictor.parameters()):
            assert torch.equal(a, p)
        assert all(p.grad is None for p in predictor.parameters())
