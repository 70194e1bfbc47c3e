"""Noise-prediction network conditioned on mel frames and a continuous noise level.

The layout follows the usual upsampling vocoder design: a mel branch is
upsampled to audio rate through ``UBlock``s, while a waveform branch is
downsampled through ``DBlock``s and feeds per-resolution FiLM modulations
that also carry the noise-level embedding.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    CheckpointConfigMismatch,
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
)

DTYPE = torch.float64
LEVEL_SCALE = 5000.0


@dataclass(frozen=True)
class NetworkConfig:
    upsample_factors: tuple[int, ...] = (4, 2)
    channel_widths: tuple[int, ...] = (8, 8)
    level_embedding_dim: int = 32
    n_mels: int = 16
    preset: str = "DESK"

    def __post_init__(self):
        object.__setattr__(self, "upsample_factors", tuple(int(f) for f in self.upsample_factors))
        object.__setattr__(self, "channel_widths", tuple(int(c) for c in self.channel_widths))
        if len(self.upsample_factors) != len(self.channel_widths) or not self.upsample_factors:
            raise ConfigurationError("upsample_factors and channel_widths need equal nonzero length")
        if min(self.upsample_factors) < 1 or min(self.channel_widths) < 1:
            raise ConfigurationError("factors and widths must be positive")
        if self.level_embedding_dim < 2 or self.level_embedding_dim % 2:
            raise ConfigurationError("level_embedding_dim must be an even integer >= 2")
        if self.preset == "PAPER" and (
            self.upsample_factors != (4, 4, 4, 2, 2) or self.channel_widths != (512, 512, 256, 128, 128)
        ):
            raise ConfigurationError("PAPER preset pins factors [4,4,4,2,2] and widths [512,512,256,128,128]")
        if self.preset not in ("DESK", "PAPER", "CUSTOM"):
            raise ConfigurationError(f"unknown preset {self.preset!r}")

    @classmethod
    def desk(cls) -> "NetworkConfig":
        return cls()

    @classmethod
    def paper(cls) -> "NetworkConfig":
        return cls((4, 4, 4, 2, 2), (512, 512, 256, 128, 128), 512, 80, "PAPER")

    @property
    def hop_length(self) -> int:
        return math.prod(self.upsample_factors)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["upsample_factors"] = list(self.upsample_factors)
        d["channel_widths"] = list(self.channel_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(tuple(d["upsample_factors"]), tuple(d["channel_widths"]), d["level_embedding_dim"], d["n_mels"], d["preset"])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def sinusoidal_level_encoding(level: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sin/cos features of ``LEVEL_SCALE * level``; shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=level.dtype) / half)
    arg = LEVEL_SCALE * level[..., None] * freqs
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


def _conv(cin, cout, k):
    return nn.Conv1d(cin, cout, k, padding=k // 2)


class FiLM(nn.Module):
    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        self.feat = _conv(channels, channels, 3)
        self.level = nn.Linear(emb_dim, channels)
        self.out = _conv(channels, 2 * channels, 1)

    def forward(self, feat, emb):
        h = F.silu(self.feat(feat) + self.level(F.silu(emb))[:, :, None])
        scale, shift = self.out(h).chunk(2, dim=1)
        return scale, shift


class UBlock(nn.Module):
    def __init__(self, cin: int, cout: int, factor: int):
        super().__init__()
        self.factor = factor
        self.skip = _conv(cin, cout, 1)
        self.conv1 = _conv(cin, cout, 3)
        self.conv2 = _conv(cout, cout, 3)

    def forward(self, h, scale, shift):
        u = h.repeat_interleave(self.factor, dim=-1)
        y = self.conv1(F.silu(u))
        y = self.conv2(F.silu(scale * y + shift))
        return y + self.skip(u)


class DBlock(nn.Module):
    def __init__(self, cin: int, cout: int, factor: int):
        super().__init__()
        self.factor = factor
        self.skip = _conv(cin, cout, 1)
        self.conv = _conv(cin, cout, 3)

    def forward(self, h):
        d = F.avg_pool1d(h, self.factor) if self.factor > 1 else h
        return self.conv(F.silu(d)) + self.skip(d)


def param_count(config: NetworkConfig) -> int:
    """Closed-form number of scalar parameters for ``config``."""
    f, c, E, m = config.upsample_factors, config.channel_widths, config.level_embedding_dim, config.n_mels
    K = len(f)

    def conv(i, o, k):
        return i * o * k + o

    total = conv(m, c[0], 3)  # mel input
    total += E * E + E  # level affine
    for k in range(K):
        cin = c[k - 1] if k > 0 else c[0]
        total += conv(cin, c[k], 1) + conv(cin, c[k], 3) + conv(c[k], c[k], 3)  # UBlock
        total += conv(c[k], c[k], 3) + (E * c[k] + c[k]) + conv(c[k], 2 * c[k], 1)  # FiLM
    total += conv(1, c[-1], 5)  # waveform input
    for k in range(K - 1, 0, -1):
        total += conv(c[k], c[k - 1], 1) + conv(c[k], c[k - 1], 3)  # DBlock
    total += conv(c[-1], 1, 3)  # output
    return total


class NoisePredictor(nn.Module):
    """eps_theta(x_t, mel, sqrt(alpha_bar)).

    ``forward`` takes waveforms ``(B, L)``, mel frames ``(B, F, n_mels)`` and
    levels as a float or ``(B,)`` tensor, with ``L == F * hop_length``.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.step_count = 0
        f, c, E = config.upsample_factors, config.channel_widths, config.level_embedding_dim
        K = len(f)
        self.mel_in = _conv(config.n_mels, c[0], 3)
        self.level_affine = nn.Linear(E, E)
        self.ublocks = nn.ModuleList(UBlock(c[k - 1] if k > 0 else c[0], c[k], f[k]) for k in range(K))
        self.films = nn.ModuleList(FiLM(c[k], E) for k in range(K))
        self.wave_in = _conv(1, c[-1], 5)
        # dblocks[j] maps resolution K-1-j down to K-2-j
        self.dblocks = nn.ModuleList(DBlock(c[k], c[k - 1], f[k]) for k in range(K - 1, 0, -1))
        self.out = _conv(c[-1], 1, 3)

    @property
    def hop_length(self) -> int:
        return self.config.hop_length

    def embed_level(self, level) -> torch.Tensor:
        level = torch.as_tensor(level, dtype=self.out.weight.dtype)
        if level.numel() and (level.min() <= 0 or level.max() > 1):
            raise ContractError("noise level sqrt(alpha_bar) must lie in (0, 1]")
        return self.level_affine(sinusoidal_level_encoding(level, self.config.level_embedding_dim))

    def forward(self, x_t: torch.Tensor, mel: torch.Tensor, level) -> torch.Tensor:
        squeeze = x_t.dim() == 1
        if squeeze:
            x_t, mel = x_t[None], mel[None]
        B, L = x_t.shape
        if mel.dim() != 3 or mel.shape[0] != B or mel.shape[2] != self.config.n_mels:
            raise ContractError(f"mel must be (B, frames, {self.config.n_mels}), got {tuple(mel.shape)}")
        if L != mel.shape[1] * self.hop_length:
            raise ContractError(f"waveform length {L} != {mel.shape[1]} frames x hop {self.hop_length}")
        level = torch.as_tensor(level, dtype=x_t.dtype)
        if level.dim() == 0:
            level = level.expand(B)
        emb = self.embed_level(level)

        K = len(self.ublocks)
        feats = [None] * K
        h = self.wave_in(x_t[:, None, :])
        feats[K - 1] = h
        for j, block in enumerate(self.dblocks):
            h = block(h)
            feats[K - 2 - j] = h

        y = self.mel_in(mel.transpose(1, 2))
        for k in range(K):
            scale, shift = self.films[k](feats[k], emb)
            y = self.ublocks[k](y, scale, shift)
        out = self.out(y)[:, 0, :]
        return out[0] if squeeze else out


def init_params(config: NetworkConfig, seed: int) -> NoisePredictor:
    """Seeded variance-scaled initialization (normal, std = 1/sqrt(fan_in)), zero biases."""
    model = NoisePredictor(config).to(DTYPE)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
                continue
            fan_in = p.shape[1] * (p.shape[2] if p.dim() == 3 else 1)
            std = 1.0 / math.sqrt(fan_in)
            if name.startswith("out."):
                std *= 0.1
            p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * std)
    return model


# Checkpoint container:
#   MAGIC | u32 format version | u64 header length | header JSON | blobs | sha256(everything before)
MAGIC = b"DVOCCKPT"
FORMAT_VERSION = 1


def save_checkpoint(predictor: NoisePredictor, path, extra_tensors=None, extra_meta=None) -> str:
    """Write a checkpoint and return its sha256 digest.

    ``extra_tensors`` (name -> tensor) are appended after the parameters in
    sorted-name order; ``extra_meta`` must be JSON-serializable.
    """
    blobs = [(f"param/{n}", p.detach()) for n, p in predictor.state_dict().items()]
    blobs += [(f"extra/{n}", t.detach()) for n, t in sorted((extra_tensors or {}).items())]
    index = []
    payload = bytearray()
    for name, t in blobs:
        arr = t.cpu().contiguous().numpy()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        payload += arr.tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "config": predictor.config.to_dict(),
        "config_digest": predictor.config.digest(),
        "step_count": int(predictor.step_count),
        "blobs": index,
        "meta": extra_meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + bytes(payload)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    return hashlib.sha256(body + digest).hexdigest()


@dataclass
class Checkpoint:
    predictor: NoisePredictor
    extra_tensors: dict
    meta: dict


def read_checkpoint(path, expected_config: NetworkConfig | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 + 32 or not data.startswith(MAGIC):
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError(f"{path}: checksum mismatch")
    version, head_len = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    offset = len(MAGIC) + 12
    header = json.loads(body[offset : offset + head_len])
    offset += head_len
    config = NetworkConfig.from_dict(header["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointConfigMismatch(f"{path}: checkpoint config {config} != expected {expected_config}")
    tensors = {}
    for entry in header["blobs"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=n // dt.itemsize, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
        offset += n
    model = NoisePredictor(config).to(DTYPE)
    state = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_dict(state, strict=True)
    model.step_count = header["step_count"]
    extras = {k[len("extra/") :]: v for k, v in tensors.items() if k.startswith("extra/")}
    return Checkpoint(model, extras, header["meta"])


def load_checkpoint(path, expected_config: NetworkConfig | None = None) -> NoisePredictor:
    return read_checkpoint(path, expected_config).predictor


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
