"""Two-phase optimization: noise-prediction pretraining, then unrolled fine-tuning.

Fine-tuning adds lambda times the multi-resolution STFT distance between
ground-truth segments and samples generated through a few-step reverse
chain, with the schedule drawn from a configured range every step.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio_data import AudioClip, corpus_digest, mel_features, sample_segment
from .config import FINETUNE, PRETRAIN, RunConfig
from .diffusion import SigmaMode, forward_sample, generate, sample_continuous_level
from .errors import ConfigurationError, ContractError, NumericalError
from .losses import LossBreakdown, build_filterbanks, diffusion_loss, infer_loss, total_loss
from .noise_model import DTYPE, NoisePredictor, init_params, read_checkpoint, save_checkpoint
from .schedules import AlphaBarCurve, InferenceSchedule, alpha_bar, sample_schedule_from_range

log = logging.getLogger(__name__)


@dataclass
class StepRecord:
    step: int
    phase: str
    losses: LossBreakdown
    n_steps: int | None = None
    schedule: tuple[float, ...] | None = None
    grad_norm: float | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "phase": self.phase,
            "losses": self.losses.to_dict(),
            "N": self.n_steps,
            "schedule": list(self.schedule) if self.schedule is not None else None,
            "grad_norm": self.grad_norm,
            "wall_time": self.wall_time,
        }


class SegmentDataset:
    """Training clips with precomputed conditioner frames."""

    def __init__(self, clips: list[AudioClip], features):
        if not clips:
            raise ConfigurationError("dataset has no clips")
        self.clips = list(clips)
        self.features = features
        self.mels = [mel_features(c, features) for c in self.clips]
        self.digest = corpus_digest(self.clips)

    def __len__(self):
        return len(self.clips)

    def sample_batch(self, rng, batch_size: int):
        idx = rng.integers(0, len(self.clips), size=batch_size)
        xs, mels = [], []
        for i in idx:
            x, m = sample_segment(self.clips[i], self.features, rng, self.mels[i])
            xs.append(x)
            mels.append(m)
        return torch.from_numpy(np.stack(xs)).to(DTYPE), torch.from_numpy(np.stack(mels)).to(DTYPE)


def make_optimizer(predictor: NoisePredictor, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(predictor.parameters(), lr=lr, foreach=False)


def pretrain_loss(predictor, batch, curve: AlphaBarCurve, rng):
    """Noise-prediction MSE at a fresh continuous level per batch item."""
    x0, mel = batch
    B, L = x0.shape
    level, _ = sample_continuous_level(curve, rng, size=B)
    eps = torch.from_numpy(rng.standard_normal((B, L))).to(x0.dtype)
    level_t = torch.from_numpy(level).to(x0.dtype)
    x_t = forward_sample(x0, (level_t**2)[:, None], eps)
    eps_hat = predictor(x_t, mel, level_t)
    return diffusion_loss(eps, eps_hat)


def finetune_loss(predictor, batch, curve: AlphaBarCurve, config: RunConfig, rng, filterbanks=None):
    """Total fine-tuning objective; returns (total tensor, breakdown, N, schedule).

    Random-stream order: the pretraining term's draws, then N, then the
    schedule, then the reverse-chain noise.
    """
    tc = config.training
    l_d = pretrain_loss(predictor, batch, curve, rng)
    n = tc.n_modes[int(rng.integers(0, len(tc.n_modes)))]
    schedule = sample_schedule_from_range(rng, tc.ranges_by_N[n])
    x0, mel = batch
    if filterbanks is None:
        filterbanks = _filterbanks(config)
    try:
        x_hat = generate(
            predictor,
            mel,
            schedule,
            rng,
            differentiable=True,
            sigma_mode=SigmaMode(tc.sigma_mode),
            inject_noise=tc.inject_noise,
        )
    except NumericalError as exc:
        exc.context["schedule"] = schedule.betas_hat
        raise
    li = infer_loss(x0, x_hat, config.multires, filterbanks)
    lam = tc.lambda_by_N[n]
    total = total_loss(l_d, li.value, lam)
    breakdown = LossBreakdown(float(l_d.detach()), float(li.value.detach()), lam, li.mag, li.pha)
    return total, breakdown, n, schedule


def _filterbanks(config: RunConfig):
    f = config.features
    return build_filterbanks(config.multires, f.sample_rate, f.n_mels, f.f_min, f.f_max)


def _apply(predictor, optimizer, loss, clip: float | None, step: int, context: dict):
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {step}", step=step, context=context)
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    if clip is not None:
        norm = float(torch.nn.utils.clip_grad_norm_(predictor.parameters(), clip))
    else:
        norm = float(torch.sqrt(sum((p.grad**2).sum() for p in predictor.parameters())))
    if not math.isfinite(norm):
        raise NumericalError(f"non-finite gradient at step {step}", step=step, context=context)
    optimizer.step()
    predictor.step_count += 1
    return norm


def pretrain_step(predictor, optimizer, batch, curve, rng, step: int = 0) -> StepRecord:
    t0 = time.perf_counter()
    loss = pretrain_loss(predictor, batch, curve, rng)
    norm = _apply(predictor, optimizer, loss, None, step, {})
    return StepRecord(step, PRETRAIN, LossBreakdown(float(loss.detach())), grad_norm=norm, wall_time=time.perf_counter() - t0)


def finetune_step(predictor, optimizer, batch, curve, config: RunConfig, rng, step: int = 0, filterbanks=None) -> StepRecord:
    t0 = time.perf_counter()
    loss, breakdown, n, schedule = finetune_loss(predictor, batch, curve, config, rng, filterbanks)
    norm = _apply(predictor, optimizer, loss, config.training.grad_clip, step, {"schedule": schedule.betas_hat})
    return StepRecord(step, FINETUNE, breakdown, n, schedule.betas_hat, norm, time.perf_counter() - t0)


def _optimizer_tensors(optimizer) -> dict:
    out = {}
    for i, st in optimizer.state_dict()["state"].items():
        for key, value in st.items():
            out[f"optim/{i}/{key}"] = torch.as_tensor(value)
    return out


def _restore_optimizer(optimizer, tensors: dict) -> None:
    state = {}
    for name, value in tensors.items():
        if not name.startswith("optim/"):
            continue
        _, i, key = name.split("/")
        state.setdefault(int(i), {})[key] = value
    sd = optimizer.state_dict()
    sd["state"] = state
    optimizer.load_state_dict(sd)


@dataclass
class TrainingResult:
    predictor: NoisePredictor
    records: list[StepRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def final_checkpoint(self) -> Path | None:
        return self.checkpoints[-1] if self.checkpoints else None


def checkpoint_name(phase: str, step: int) -> str:
    return f"{phase.lower()}-{step:07d}.ckpt"


def run_training(
    config: RunConfig,
    dataset: SegmentDataset,
    out_dir,
    init_checkpoint=None,
    resume=None,
    keep_records: bool = True,
) -> TrainingResult:
    """Train for ``config.training.max_steps`` steps of the configured phase.

    Checkpoints (parameters, optimizer moments, random-stream state) are
    written every ``checkpoint_every`` steps and at the end, so resuming from
    any of them reproduces an uninterrupted run exactly.
    """
    tc = config.training
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve = alpha_bar(config.schedule)
    filterbanks = _filterbanks(config) if tc.phase == FINETUNE else None

    if resume is not None:
        ck = read_checkpoint(resume, config.network)
        meta = ck.meta
        if meta.get("dataset_digest") != dataset.digest:
            raise ConfigurationError(f"{resume}: dataset digest mismatch on resume")
        if meta.get("phase") != tc.phase:
            raise ConfigurationError(f"{resume}: checkpoint phase {meta.get('phase')} != {tc.phase}")
        predictor = ck.predictor
        optimizer = make_optimizer(predictor, tc.lr)
        _restore_optimizer(optimizer, ck.extra_tensors)
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        start = meta["phase_step"]
    else:
        if init_checkpoint is not None:
            predictor = read_checkpoint(init_checkpoint, config.network).predictor
        elif tc.phase == FINETUNE:
            raise ConfigurationError("fine-tuning requires a pretrained checkpoint")
        else:
            predictor = init_params(config.network, tc.seed)
        optimizer = make_optimizer(predictor, tc.lr)
        rng = np.random.default_rng(tc.seed)
        start = 0

    log_path = out_dir / f"{tc.phase.lower()}-steps.jsonl"
    lines = []
    if resume is not None and log_path.exists():
        lines = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["step"] <= start]
    log_path.write_text("".join(ln + "\n" for ln in lines))

    result = TrainingResult(predictor)

    def save(step):
        path = out_dir / checkpoint_name(tc.phase, step)
        meta = {
            "run_config": config.to_dict(),
            "phase": tc.phase,
            "phase_step": step,
            "rng_state": rng.bit_generator.state,
            "dataset_digest": dataset.digest,
        }
        save_checkpoint(predictor, path, _optimizer_tensors(optimizer), meta)
        result.checkpoints.append(path)

    predictor.train()
    with open(log_path, "a") as fh:
        for step in range(start + 1, tc.max_steps + 1):
            batch = dataset.sample_batch(rng, tc.batch_size)
            if tc.phase == PRETRAIN:
                rec = pretrain_step(predictor, optimizer, batch, curve, rng, step)
            else:
                rec = finetune_step(predictor, optimizer, batch, curve, config, rng, step, filterbanks)
            if keep_records:
                result.records.append(rec)
            if step % tc.log_every == 0:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            if step % tc.checkpoint_every == 0 and step != tc.max_steps:
                save(step)
    save(tc.max_steps)
    return result


def gradcheck(loss_evaluator, predictor: NoisePredictor, epsilon: float = 1e-6, sample_count: int = 50, seed: int = 0, floor: float = 1e-10) -> float:
    """Largest relative error between autograd and central-difference gradients.

    ``loss_evaluator(predictor)`` must be deterministic and return a scalar
    tensor. Only ``sample_count`` randomly chosen scalar parameters are
    perturbed. The relative error denominator is ``max(|analytic|, |numeric|, floor)``.
    """
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    params = list(predictor.parameters())
    if any(p.dtype != torch.float64 for p in params):
        raise ContractError("gradcheck requires double-precision parameters")
    predictor.zero_grad(set_to_none=True)
    loss_evaluator(predictor).backward()
    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(sample_count, offsets[-1]), replace=False)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, i = params[k], int(flat - offsets[k])
        analytic = float(p.grad.reshape(-1)[i]) if p.grad is not None else 0.0
        view = p.data.reshape(-1)
        orig = float(view[i])
        with torch.no_grad():
            view[i] = orig + epsilon
            f_plus = float(loss_evaluator(predictor))
            view[i] = orig - epsilon
            f_minus = float(loss_evaluator(predictor))
            view[i] = orig
        numeric = (f_plus - f_minus) / (2 * epsilon)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, rel)
    predictor.zero_grad(set_to_none=True)
    return worst
