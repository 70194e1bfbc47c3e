"""STFT analysis, mel filterbanks and every training loss.

Signals are torch tensors shaped ``(L,)`` or ``(B, L)``; spectrograms are
``(..., frames, bins)``.  All reductions are means so loss weights carry
over between segment lengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, ContractError

LOG_FLOOR = 1e-5
PHASE_MASK_THRESHOLD = 1e-4


@dataclass(frozen=True)
class StftConfig:
    fft_size: int
    window_length: int
    hop: int | None = None  # None: window_length // 4

    def __post_init__(self):
        if self.hop is None:
            object.__setattr__(self, "hop", max(1, self.window_length // 4))
        if not (0 < self.window_length <= self.fft_size):
            raise ConfigurationError(f"need 0 < window_length <= fft_size, got {self}")
        if self.hop <= 0:
            raise ConfigurationError("hop must be positive")

    def to_dict(self) -> dict:
        return {"fft_size": self.fft_size, "window_length": self.window_length, "hop": self.hop}


@dataclass(frozen=True)
class MultiResConfig:
    resolutions: tuple[StftConfig, ...]
    include_mag: bool = True
    include_pha: bool = True
    mask_phase: bool = True

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(self.resolutions))
        if not self.resolutions:
            raise ConfigurationError("at least one STFT resolution is required")
        if not (self.include_mag or self.include_pha):
            raise ConfigurationError("enable at least one of include_mag / include_pha")

    @property
    def M(self) -> int:
        return len(self.resolutions)

    @classmethod
    def paper(cls, **kw) -> "MultiResConfig":
        res = tuple(StftConfig(n, w) for n, w in zip((512, 1024, 2048), (240, 600, 1200)))
        return cls(res, **kw)

    @classmethod
    def desk(cls, **kw) -> "MultiResConfig":
        res = tuple(StftConfig(n, w) for n, w in zip((16, 32, 64), (8, 20, 40)))
        return cls(res, **kw)

    def to_dict(self) -> dict:
        return {
            "resolutions": [r.to_dict() for r in self.resolutions],
            "include_mag": self.include_mag,
            "include_pha": self.include_pha,
            "mask_phase": self.mask_phase,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MultiResConfig":
        return cls(
            tuple(StftConfig(**r) for r in d["resolutions"]),
            include_mag=d.get("include_mag", True),
            include_pha=d.get("include_pha", True),
            mask_phase=d.get("mask_phase", True),
        )


class Spectrogram(NamedTuple):
    complex: torch.Tensor
    magnitude: torch.Tensor
    phase: torch.Tensor


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    matrix: np.ndarray  # (n_mels, fft_size // 2 + 1)
    sample_rate: int
    f_min: float
    f_max: float
    n_mels: int
    _tensors: dict = field(default_factory=dict, repr=False)

    def tensor(self, dtype=torch.float64) -> torch.Tensor:
        if dtype not in self._tensors:
            self._tensors[dtype] = torch.tensor(self.matrix, dtype=dtype)
        return self._tensors[dtype]


@lru_cache(maxsize=64)
def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int, f_min: float, f_max: float) -> MelFilterbank:
    """Triangular HTK-mel filterbank over the one-sided FFT bins.

    Bands too narrow to contain any bin centre (short FFTs) collapse onto the
    bin nearest their centre frequency so every row keeps positive mass.
    """
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise ConfigurationError(f"need 0 <= f_min < f_max <= Nyquist, got {f_min}, {f_max}")
    n_bins = fft_size // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
        if fb[i].sum() <= 0.0:
            fb[i, int(np.argmin(np.abs(freqs - mid)))] = 1.0
    fb.setflags(write=False)
    return MelFilterbank(fb, sample_rate, float(f_min), float(f_max), n_mels)


def _window(length: int, dtype) -> torch.Tensor:
    return torch.hann_window(length, periodic=True, dtype=dtype)


def stft(signal: torch.Tensor, cfg: StftConfig) -> Spectrogram:
    """Centered, reflection-padded STFT with a Hann window of ``window_length``."""
    L = signal.shape[-1]
    if L < cfg.window_length:
        raise ContractError(f"signal of length {L} is shorter than one window ({cfg.window_length})")
    if L <= cfg.fft_size // 2:
        raise ContractError(f"signal of length {L} too short for reflection padding of {cfg.fft_size // 2}")
    spec = torch.stft(
        signal,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop,
        win_length=cfg.window_length,
        window=_window(cfg.window_length, signal.dtype),
        center=True,
        pad_mode="reflect",
        return_complex=True,
    ).transpose(-1, -2)
    return Spectrogram(spec, spec.abs(), torch.angle(spec))


def log_mel(magnitude: torch.Tensor, fb: MelFilterbank) -> torch.Tensor:
    """log(max(fb @ |X|, floor)); shape (..., frames, n_mels)."""
    mel = magnitude @ fb.tensor(magnitude.dtype).T
    return torch.log(torch.clamp(mel, min=LOG_FLOOR))


def _check_pair(x: torch.Tensor, x_hat: torch.Tensor) -> None:
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")


def loss_mag(x: torch.Tensor, x_hat: torch.Tensor, cfg: StftConfig, fb: MelFilterbank) -> torch.Tensor:
    """Mean absolute difference of log mel-scaled STFT magnitudes."""
    _check_pair(x, x_hat)
    return (log_mel(stft(x, cfg).magnitude, fb) - log_mel(stft(x_hat, cfg).magnitude, fb)).abs().mean()


def _phase_loss_from_spectra(a: torch.Tensor, b: torch.Tensor, mask: bool) -> torch.Tensor:
    # angle(a * conj(b)) is the phase difference wrapped into (-pi, pi];
    # separate real products keep the imaginary part exactly 0 when a == b
    re = a.real * b.real + a.imag * b.imag
    im = a.imag * b.real - a.real * b.imag
    keep = (re != 0) | (im != 0)
    if mask:
        keep = keep & ~((a.abs() < PHASE_MASK_THRESHOLD) & (b.abs() < PHASE_MASK_THRESHOLD))
    diff = torch.atan2(torch.where(keep, im, torch.zeros_like(im)), torch.where(keep, re, torch.ones_like(re)))
    sq = torch.where(keep, diff * diff, torch.zeros_like(diff))
    if mask:
        count = keep.sum()
        return sq.sum() / count if count > 0 else sq.sum()
    return sq.mean()


def loss_pha(x: torch.Tensor, x_hat: torch.Tensor, cfg: StftConfig, mask: bool = True) -> torch.Tensor:
    """Mean squared wrapped phase difference.

    With ``mask`` the mean runs only over bins where at least one of the two
    magnitudes reaches the masking threshold. Bins with an exactly zero
    magnitude contribute zero either way.
    """
    _check_pair(x, x_hat)
    return _phase_loss_from_spectra(stft(x, cfg).complex, stft(x_hat, cfg).complex, mask)


@dataclass
class InferLossResult:
    value: torch.Tensor
    mag: list[float]
    pha: list[float]


def build_filterbanks(cfg: MultiResConfig, sample_rate: int, n_mels: int, f_min: float, f_max: float):
    return [mel_filterbank(sample_rate, r.fft_size, n_mels, f_min, f_max) for r in cfg.resolutions]


def infer_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    cfg: MultiResConfig,
    filterbanks: Sequence[MelFilterbank],
) -> InferLossResult:
    """Average over resolutions of the magnitude and/or phase losses."""
    _check_pair(x, x_hat)
    if len(filterbanks) != cfg.M:
        raise ContractError("need one filterbank per resolution")
    total = x.new_zeros(())
    mags, phas = [], []
    for res, fb in zip(cfg.resolutions, filterbanks):
        spec, spec_hat = stft(x, res), stft(x_hat, res)
        if cfg.include_mag:
            lm = (log_mel(spec.magnitude, fb) - log_mel(spec_hat.magnitude, fb)).abs().mean()
            total = total + lm
            mags.append(float(lm.detach()))
        if cfg.include_pha:
            lp = _phase_loss_from_spectra(spec.complex, spec_hat.complex, cfg.mask_phase)
            total = total + lp
            phas.append(float(lp.detach()))
    return InferLossResult(total / cfg.M, mags, phas)


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    _check_pair(eps, eps_hat)
    return ((eps - eps_hat) ** 2).mean()


def total_loss(l_d, l_i, lam: float):
    if lam < 0:
        raise ContractError("lambda must be nonnegative")
    return l_d + lam * l_i


@dataclass
class LossBreakdown:
    l_d: float
    l_i: float | None = None
    lam: float = 0.0
    l_mag: list[float] = field(default_factory=list)
    l_pha: list[float] = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.l_d if self.l_i is None else self.l_d + self.lam * self.l_i

    def to_dict(self) -> dict:
        return {
            "l_d": self.l_d,
            "l_i": self.l_i,
            "lambda": self.lam,
            "l_mag": self.l_mag,
            "l_pha": self.l_pha,
            "total": self.total,
        }

