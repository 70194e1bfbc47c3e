"""Audio ingestion, mel conditioning features, segments and the synthetic corpus."""

from __future__ import annotations

import hashlib
import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import AudioFormatError, ConfigurationError, ContractError
from .losses import StftConfig, log_mel, mel_filterbank, stft


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    f_min: float = 80.0
    f_max: float = 8000.0
    segment_length: int = 7168

    def __post_init__(self):
        if self.segment_length % self.hop_length:
            raise ConfigurationError("segment_length must be divisible by hop_length")
        if self.f_max > self.sample_rate / 2:
            raise ConfigurationError("f_max exceeds the Nyquist frequency")

    @classmethod
    def paper(cls) -> "FeatureConfig":
        return cls()

    @classmethod
    def desk(cls) -> "FeatureConfig":
        return cls(sample_rate=8000, n_fft=128, hop_length=8, n_mels=16, f_min=80.0, f_max=4000.0, segment_length=256)

    @property
    def frames_per_segment(self) -> int:
        return self.segment_length // self.hop_length

    @property
    def stft_config(self) -> StftConfig:
        return StftConfig(self.n_fft, self.n_fft, self.hop_length)

    @property
    def filterbank(self):
        return mel_filterbank(self.sample_rate, self.n_fft, self.n_mels, self.f_min, self.f_max)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ContractError("clip samples must be a nonempty 1-D array")
        if not np.all(np.isfinite(s)):
            raise ContractError(f"clip {self.id} contains non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True, eq=False)
class MelConditioner:
    frames: np.ndarray  # (n_frames, n_mels)
    config_digest: str

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def trimmed(self, n_frames: int) -> "MelConditioner":
        return MelConditioner(self.frames[:n_frames], self.config_digest)


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    search_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self):
        a, b, c = set(self.train_ids), set(self.search_ids), set(self.test_ids)
        if a & b or a & c or b & c:
            raise ConfigurationError("dataset splits must be pairwise disjoint")

    def membership(self, clip_id: str) -> str:
        for name in ("train", "search", "test"):
            if clip_id in getattr(self, f"{name}_ids"):
                return name
        raise KeyError(clip_id)


def load_wav(path) -> AudioClip:
    """Read a 16-bit PCM mono WAV file, scaling samples by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: compressed WAV not supported")
            if w.getnchannels() != 1:
                raise AudioFormatError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            n = w.getnframes()
            rate = w.getframerate()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if len(raw) != 2 * n:
        raise AudioFormatError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise AudioFormatError(f"{path}: no samples")
    return AudioClip(samples, rate, path.stem)


def save_wav(path, samples, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def log_mel_spectrogram(x: torch.Tensor, cfg: FeatureConfig) -> torch.Tensor:
    """Conditioner-pipeline log-mel spectrogram of a (batched) waveform tensor."""
    return log_mel(stft(x, cfg.stft_config).magnitude, cfg.filterbank)


def mel_features(clip: AudioClip, cfg: FeatureConfig) -> MelConditioner:
    """Log-mel frames for a whole clip; centered framing gives 1 + L // hop frames."""
    if clip.sample_rate != cfg.sample_rate:
        raise ContractError(f"clip {clip.id} is {clip.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    with torch.no_grad():
        frames = log_mel_spectrogram(torch.from_numpy(clip.samples), cfg).numpy()
    return MelConditioner(frames, cfg.digest())


def sample_segment(clip: AudioClip, cfg: FeatureConfig, rng, mel: MelConditioner | None = None):
    """Hop-aligned random segment and the matching conditioner frames.

    Clips shorter than a segment are zero-padded on the right.
    """
    seg = cfg.segment_length
    samples = clip.samples
    if samples.size < seg:
        samples = np.concatenate([samples, np.zeros(seg - samples.size)])
        mel = mel_features(AudioClip(samples, clip.sample_rate, clip.id), cfg)
    elif mel is None:
        mel = mel_features(clip, cfg)
    n_starts = (samples.size - seg) // cfg.hop_length + 1
    k = int(rng.integers(0, n_starts))
    start = k * cfg.hop_length
    frames = mel.frames[k : k + cfg.frames_per_segment]
    return samples[start : start + seg].copy(), frames.copy()


def synth_corpus(n_clips: int, clip_seconds: float, seed: int, sample_rate: int = 8000) -> list[AudioClip]:
    """Deterministic harmonic clips standing in for recorded speech.

    Each clip has a fixed fundamental in [80, 400] Hz with 2-5 decaying
    harmonics, a slow amplitude envelope and a white noise floor 30 dB below
    the tonal part, peak-normalized to 0.95. The fundamental is the strongest
    partial and is recorded in ``meta["f0"]``.
    """
    if n_clips < 0 or clip_seconds <= 0:
        raise ConfigurationError("n_clips must be >= 0 and clip_seconds > 0")
    rng = np.random.default_rng(seed)
    n = int(round(clip_seconds * sample_rate))
    t = np.arange(n) / sample_rate
    clips = []
    for i in range(n_clips):
        f0 = float(rng.uniform(80.0, 400.0))
        n_harm = int(rng.integers(2, 6))
        tone = np.zeros(n)
        for k in range(1, n_harm + 1):
            if k * f0 >= sample_rate / 2:
                break
            amp = 1.0 if k == 1 else float(rng.uniform(0.2, 0.9)) / k
            tone += amp * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
        rate = rng.uniform(0.5, 3.0)
        env = 0.6 + 0.4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        tone *= env
        noise_rms = np.sqrt(np.mean(tone**2)) * 10 ** (-30 / 20)
        x = tone + noise_rms * rng.standard_normal(n)
        x *= 0.95 / np.max(np.abs(x))
        clips.append(AudioClip(x, sample_rate, f"syn-{i:05d}", {"f0": f0, "n_harmonics": n_harm}))
    return clips


def make_split(ids, n_test: int, n_search: int) -> DatasetSplit:
    """First ``n_test`` ids go to test, the next ``n_search`` to search, the rest to train."""
    ids = list(ids)
    if n_test + n_search > len(ids):
        raise ConfigurationError("split sizes exceed the number of clips")
    return DatasetSplit(
        tuple(ids[n_test + n_search :]),
        tuple(ids[n_test : n_test + n_search]),
        tuple(ids[:n_test]),
    )


def split_by_prefix(ids, test_prefix: str, search_prefix: str) -> DatasetSplit:
    """Split by id prefix, e.g. ``LJ001`` for test and ``LJ002`` for schedule search."""
    ids = list(ids)
    test = tuple(i for i in ids if i.startswith(test_prefix))
    search = tuple(i for i in ids if i.startswith(search_prefix) and i not in test)
    train = tuple(i for i in ids if i not in test and i not in search)
    return DatasetSplit(train, search, test)


MANIFEST_VERSION = 1


def write_corpus(clips, split: DatasetSplit, out_dir) -> Path:
    """Write clips as WAV files plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in clips:
        name = f"{clip.id}.wav"
        save_wav(out_dir / name, clip.samples, clip.sample_rate)
        entries.append(
            {
                "id": clip.id,
                "path": name,
                "duration": clip.duration,
                "split": split.membership(clip.id),
                **{k: clip.meta[k] for k in sorted(clip.meta)},
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "sample_rate": clips[0].sample_rate if clips else None,
        "clips": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_corpus(manifest_path):
    """Load every clip listed in a manifest; returns (clips, split)."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    doc = json.loads(manifest_path.read_text())
    clips, groups = [], {"train": [], "search": [], "test": []}
    for e in doc["clips"]:
        clip = load_wav(manifest_path.parent / e["path"])
        meta = {k: v for k, v in e.items() if k not in ("id", "path", "duration", "split")}
        clips.append(AudioClip(clip.samples, clip.sample_rate, e["id"], meta))
        groups[e["split"]].append(e["id"])
    return clips, DatasetSplit(tuple(groups["train"]), tuple(groups["search"]), tuple(groups["test"]))


def corpus_digest(clips) -> str:
    h = hashlib.sha256()
    for clip in clips:
        h.update(clip.id.encode())
        h.update(str(clip.sample_rate).encode())
        h.update(np.ascontiguousarray(clip.samples).tobytes())
    return h.hexdigest()


def center_segment(clip: AudioClip, cfg: FeatureConfig, mel: MelConditioner | None = None):
    """Deterministic hop-aligned segment from the middle of a clip (for evaluation)."""
    seg = cfg.segment_length
    if clip.samples.size < seg:
        return sample_segment(clip, cfg, np.random.default_rng(0))
    mel = mel if mel is not None else mel_features(clip, cfg)
    k = ((clip.samples.size - seg) // 2) // cfg.hop_length
    start = k * cfg.hop_length
    return clip.samples[start : start + seg].copy(), mel.frames[k : k + cfg.frames_per_segment].copy()
