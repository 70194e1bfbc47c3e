"""Objective metrics, schedule grid search, sensitivity sweeps and report files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio_data import AudioClip, FeatureConfig, center_segment, log_mel_spectrogram, mel_features
from .diffusion import SigmaMode, draw_reverse_noise, generate
from .errors import ContractError, DiffvocError, MetricError
from .losses import MultiResConfig, stft
from .noise_model import DTYPE
from .schedules import InferenceSchedule, NoiseSchedule, ValidationPolicy, validate_inference_schedule

MRSTFT_MAG_FLOOR = 1e-7
STD_DEFINITION = "population (divide by count)"


def _pair(x, x_hat):
    x = torch.as_tensor(x, dtype=DTYPE)
    x_hat = torch.as_tensor(x_hat, dtype=DTYPE)
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return x, x_hat


@torch.no_grad()
def ls_mse(x, x_hat, cfg: FeatureConfig) -> float:
    """Mean squared difference of conditioner-pipeline log-mel spectrograms."""
    x, x_hat = _pair(x, x_hat)
    return float(((log_mel_spectrogram(x, cfg) - log_mel_spectrogram(x_hat, cfg)) ** 2).mean())


@torch.no_grad()
def l1_mel(x, x_hat, cfg: FeatureConfig) -> float:
    """Mean absolute difference of conditioner-pipeline log-mel spectrograms."""
    x, x_hat = _pair(x, x_hat)
    return float((log_mel_spectrogram(x, cfg) - log_mel_spectrogram(x_hat, cfg)).abs().mean())


@torch.no_grad()
def mrstft_terms(x, x_hat, cfg: MultiResConfig) -> list[tuple[float, float]]:
    """Per-resolution (spectral convergence, L1 log-magnitude) pairs."""
    x, x_hat = _pair(x, x_hat)
    out = []
    for res in cfg.resolutions:
        mag, mag_hat = stft(x, res).magnitude, stft(x_hat, res).magnitude
        ref = torch.linalg.vector_norm(mag)
        if ref == 0:
            raise MetricError("spectral convergence undefined for a zero-energy reference")
        sc = torch.linalg.vector_norm(mag - mag_hat) / ref
        logmag = (
            torch.log(torch.clamp(mag, min=MRSTFT_MAG_FLOOR)) - torch.log(torch.clamp(mag_hat, min=MRSTFT_MAG_FLOOR))
        ).abs().mean()
        out.append((float(sc), float(logmag)))
    return out


def mrstft_metric(x, x_hat, cfg: MultiResConfig) -> float:
    """Multi-resolution STFT distance: spectral convergence plus log-magnitude L1, averaged."""
    terms = mrstft_terms(x, x_hat, cfg)
    return sum(sc + lm for sc, lm in terms) / len(terms)


@dataclass(frozen=True, eq=False)
class EvalClip:
    id: str
    segment: np.ndarray
    mel: np.ndarray  # (frames, n_mels)


def prepare_eval_clips(clips: list[AudioClip], cfg: FeatureConfig) -> list[EvalClip]:
    """Fixed central segment of every clip with its conditioner frames."""
    out = []
    for clip in clips:
        seg, mel = center_segment(clip, cfg, mel_features(clip, cfg))
        out.append(EvalClip(clip.id, seg, mel))
    return out


def noise_seed(schedule: InferenceSchedule, clip_id: str) -> int:
    """Seed derived from (schedule, clip) so different models see identical noise draws."""
    key = json.dumps([list(schedule.betas_hat), clip_id]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def _clip_noise(schedule: InferenceSchedule, clip: EvalClip) -> np.ndarray:
    rng = np.random.default_rng(noise_seed(schedule, clip.id))
    return draw_reverse_noise(rng, schedule.N, (clip.segment.size,))


def generate_for_clips(predictor, clips: list[EvalClip], schedule: InferenceSchedule, sigma_mode=SigmaMode.POSTERIOR) -> torch.Tensor:
    """Batched generation over clips with per-(schedule, clip) noise; returns (B, L)."""
    mel = torch.from_numpy(np.stack([c.mel for c in clips])).to(DTYPE)
    noise = np.stack([_clip_noise(schedule, c) for c in clips])
    return generate(predictor, mel, schedule, noise=noise, sigma_mode=sigma_mode)


@dataclass
class SweepEntry:
    schedule: tuple[float, ...]
    l1: float | None
    error: str | None = None
    validation: dict | None = None

    def to_dict(self) -> dict:
        return {"schedule": list(self.schedule), "l1_mel": self.l1, "error": self.error, "validation": self.validation}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepEntry":
        return cls(tuple(d["schedule"]), d["l1_mel"], d["error"], d["validation"])


@dataclass
class SweepReport:
    kind: str
    model_id: str
    grid_description: str
    clip_ids: list[str]
    entries: list[SweepEntry]
    mean: float | None = None
    std: float | None = None
    best: tuple[float, ...] | None = None
    best_l1: float | None = None
    std_definition: str = STD_DEFINITION

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "model_id": self.model_id,
            "grid_description": self.grid_description,
            "clip_ids": list(self.clip_ids),
            "entries": [e.to_dict() for e in self.entries],
            "mean": self.mean,
            "std": self.std,
            "std_definition": self.std_definition,
            "best": list(self.best) if self.best is not None else None,
            "best_l1": self.best_l1,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepReport":
        return cls(
            d["kind"],
            d["model_id"],
            d["grid_description"],
            list(d["clip_ids"]),
            [SweepEntry.from_dict(e) for e in d["entries"]],
            d["mean"],
            d["std"],
            tuple(d["best"]) if d["best"] is not None else None,
            d["best_l1"],
            d["std_definition"],
        )


def _sweep(kind, predictor, clips, grid, cfg, model_id, grid_description, train_schedule, policy, sigma_mode):
    if not grid:
        raise ContractError("grid must be nonempty")
    if not clips:
        raise ContractError("need at least one clip")
    predictor.eval()
    target = torch.from_numpy(np.stack([c.segment for c in clips])).to(DTYPE)
    entries = []
    for schedule in grid:
        validation = None
        if train_schedule is not None:
            validation = validate_inference_schedule(schedule, train_schedule, policy).to_dict()
        try:
            x_hat = generate_for_clips(predictor, clips, schedule, sigma_mode)
            per_clip = [l1_mel(target[i], x_hat[i], cfg) for i in range(len(clips))]
            entries.append(SweepEntry(schedule.betas_hat, float(np.mean(per_clip)), None, validation))
        except DiffvocError as exc:
            entries.append(SweepEntry(schedule.betas_hat, None, f"{type(exc).__name__}: {exc}", validation))
    ok = [e for e in entries if e.l1 is not None and math.isfinite(e.l1)]
    report = SweepReport(kind, model_id, grid_description, [c.id for c in clips], entries)
    if ok:
        values = np.array([e.l1 for e in ok])
        report.mean = float(values.mean())
        report.std = float(values.std(ddof=0))
        best = min(ok, key=lambda e: (e.l1, e.schedule))
        report.best, report.best_l1 = best.schedule, best.l1
    return report


def grid_search(
    predictor,
    clips: list[EvalClip],
    grid: list[InferenceSchedule],
    cfg: FeatureConfig,
    model_id: str = "",
    grid_description: str = "",
    train_schedule: NoiseSchedule | None = None,
    policy: ValidationPolicy | None = None,
    sigma_mode: SigmaMode = SigmaMode.POSTERIOR,
) -> SweepReport:
    """Mean L1 log-mel distance of every grid schedule; best is the argmin.

    Ties are broken by the lexicographically smaller schedule. Schedules whose
    generation fails are kept in the report with their error but never win.
    When ``train_schedule`` is given, each entry carries its validator verdict.
    """
    return _sweep("grid_search", predictor, clips, grid, cfg, model_id, grid_description, train_schedule, policy, sigma_mode)


def sensitivity_sweep(
    predictor,
    clips: list[EvalClip],
    grid: list[InferenceSchedule],
    cfg: FeatureConfig,
    model_id: str = "",
    grid_description: str = "",
    train_schedule: NoiseSchedule | None = None,
    policy: ValidationPolicy | None = None,
    sigma_mode: SigmaMode = SigmaMode.POSTERIOR,
) -> SweepReport:
    """Same evaluation as :func:`grid_search`; the headline is mean and std over the grid."""
    return _sweep("sensitivity_sweep", predictor, clips, grid, cfg, model_id, grid_description, train_schedule, policy, sigma_mode)


METRIC_COLUMNS = ("ls_mse", "mrstft", "l1_mel", "pesq", "stoi")


@dataclass
class MetricsReport:
    model_id: str
    schedule: tuple[float, ...]
    per_clip: dict[str, dict]
    aggregate: dict[str, float | None] = field(default_factory=dict)
    kind: str = "metrics"

    @property
    def N(self) -> int:
        return len(self.schedule)

    @property
    def clip_count(self) -> int:
        return len(self.per_clip)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "model_id": self.model_id,
            "schedule": list(self.schedule),
            "N": self.N,
            "clip_count": self.clip_count,
            "per_clip": self.per_clip,
            "aggregate": self.aggregate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["model_id"], tuple(d["schedule"]), d["per_clip"], d["aggregate"])


def aggregate_metrics(per_clip: dict[str, dict]) -> dict:
    agg = {}
    for col in METRIC_COLUMNS:
        vals = [row[col] for row in per_clip.values() if row.get(col) is not None]
        agg[col] = float(np.mean(vals)) if vals else None
    return agg


def evaluate_model(
    predictor,
    clips: list[EvalClip],
    schedule: InferenceSchedule,
    cfg: FeatureConfig,
    multires: MultiResConfig,
    model_id: str = "",
) -> MetricsReport:
    """LS-MSE, MRSTFT and L1-mel per clip; PESQ/STOI columns stay empty for external merging."""
    predictor.eval()
    x_hat = generate_for_clips(predictor, clips, schedule)
    per_clip = {}
    for i, clip in enumerate(clips):
        ref = torch.from_numpy(clip.segment)
        per_clip[clip.id] = {
            "ls_mse": ls_mse(ref, x_hat[i], cfg),
            "mrstft": mrstft_metric(ref, x_hat[i], multires),
            "l1_mel": l1_mel(ref, x_hat[i], cfg),
            "pesq": None,
            "stoi": None,
        }
    return MetricsReport(model_id, schedule.betas_hat, per_clip, aggregate_metrics(per_clip))


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _sweep_csv(report: SweepReport) -> str:
    buf = io.StringIO()
    buf.write(f"# kind={report.kind} model={report.model_id} grid={report.grid_description}\n")
    buf.write(f"# clips={len(report.clip_ids)} mean={_fmt(report.mean)} std={_fmt(report.std)} std_definition={report.std_definition}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "N", "schedule", "l1_mel", "valid", "violations", "error"])
    for i, e in enumerate(report.entries):
        v = e.validation
        w.writerow(
            [
                i,
                len(e.schedule),
                " ".join(repr(b) for b in e.schedule),
                _fmt(e.l1),
                "" if v is None else int(v["passed"]),
                "" if v is None else ";".join(x["rule"] for x in v["violations"]),
                e.error or "",
            ]
        )
    return buf.getvalue()


def _metrics_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    buf.write(f"# model={report.model_id} N={report.N} schedule={' '.join(repr(b) for b in report.schedule)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["clip_id", *METRIC_COLUMNS])
    for cid in sorted(report.per_clip):
        w.writerow([cid, *(_fmt(report.per_clip[cid].get(c)) for c in METRIC_COLUMNS)])
    w.writerow(["MEAN", *(_fmt(report.aggregate.get(c)) for c in METRIC_COLUMNS)])
    return buf.getvalue()


def emit_report(report, out_dir, stem: str, formats=("json", "csv"), plot: bool = False) -> list[Path]:
    """Write ``<stem>.json`` and/or ``<stem>.csv`` (plus an optional scatter plot)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out_dir / f"{stem}.json"
        p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(p)
    if "csv" in formats:
        p = out_dir / f"{stem}.csv"
        p.write_text(_sweep_csv(report) if isinstance(report, SweepReport) else _metrics_csv(report))
        written.append(p)
    if plot and isinstance(report, SweepReport):
        p = out_dir / f"{stem}.png"
        plot_sweep(report, p)
        written.append(p)
    return written


def load_report(path):
    d = json.loads(Path(path).read_text())
    if d["kind"] == "metrics":
        return MetricsReport.from_dict(d)
    return SweepReport.from_dict(d)


def plot_sweep(report: SweepReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [i for i, e in enumerate(report.entries) if e.l1 is not None]
    ys = [e.l1 for e in report.entries if e.l1 is not None]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.scatter(xs, ys, s=8)
    ax.set_xlabel("schedule index")
    ax.set_ylabel("L1 log-mel")
    ax.set_title(f"{report.model_id}: mean {report.mean:.3f} std {report.std:.3f}" if ys else report.model_id)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def save_spectrogram_image(log_mel_frames: np.ndarray, path) -> None:
    """One pixel per (band, frame); low bands at the bottom."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(path, np.asarray(log_mel_frames).T, origin="lower", cmap="magma")
