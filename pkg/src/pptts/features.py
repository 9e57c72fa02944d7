"""Audio frontend: linear/mel spectrograms and frame-feature providers.

The ``builtin-mel`` provider feeds log-mel features (optionally standardized
per corpus) to the unit-discovery pipeline; the ``precomputed`` provider
loads externally dumped feature matrices so representations from large
self-supervised models can be plugged in without bundling them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio import read_wav
from .config import AudioConfig, ConfigError
from .data import ManifestEntry


@dataclass(frozen=True)
class LinearSpectrogram:
    """Magnitude STFT, [frames x bins], all values >= 0."""

    values: np.ndarray
    config_id: str


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-compressed mel spectrogram, [frames x mel bins]."""

    values: np.ndarray
    config_id: str


@dataclass(frozen=True)
class FrameFeatures:
    """Per-frame feature matrix [frames x dim] from a named provider."""

    values: np.ndarray
    provider_id: str
    frame_rate_hz: float


def hann_window(cfg: AudioConfig, dtype=np.float32) -> np.ndarray:
    """Periodic Hann window of win_length, zero-padded centered to n_fft."""
    n = cfg.win_length
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    if n < cfg.n_fft:
        pad_left = (cfg.n_fft - n) // 2
        full = np.zeros(cfg.n_fft)
        full[pad_left : pad_left + n] = win
        win = full
    return win.astype(dtype)


def n_frames(num_samples: int, cfg: AudioConfig) -> int:
    """Frame count: floor((L_eff - n_fft) / hop) + 1, where L_eff includes
    the two n_fft//2 center pads when center=True."""
    eff = num_samples + (2 * (cfg.n_fft // 2) if cfg.center else 0)
    return (eff - cfg.n_fft) // cfg.hop_length + 1


def pad_indices(num_samples: int, cfg: AudioConfig) -> np.ndarray | None:
    """Sample indices realizing the center reflect-pad, or None if uncentered.

    Shared with the differentiable spectral path so that both compute the
    padded signal identically.
    """
    if not cfg.center:
        return None
    half = cfg.n_fft // 2
    if num_samples <= half:
        raise ValueError(
            f"waveform too short for centered STFT: {num_samples} <= {half}"
        )
    idx = np.arange(-half, num_samples + half)
    # np.pad reflect: mirror without repeating the edge sample.
    idx = np.abs(idx)
    over = idx > num_samples - 1
    idx[over] = 2 * (num_samples - 1) - idx[over]
    return idx


def frame_signal(padded: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """Slice an already-padded signal into [frames, n_fft] (copy)."""
    count = (len(padded) - cfg.n_fft) // cfg.hop_length + 1
    if count < 1:
        raise ValueError(f"waveform too short: {len(padded)} < {cfg.n_fft} samples")
    stride = padded.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        padded,
        shape=(count, cfg.n_fft),
        strides=(cfg.hop_length * stride, stride),
    )
    return np.ascontiguousarray(frames)


def compute_linear_spectrogram(
    waveform: np.ndarray, cfg: AudioConfig
) -> LinearSpectrogram:
    """Magnitude STFT of a mono waveform.

    Frame count follows ``n_frames``; raises for waveforms shorter than the
    padding convention supports.
    """
    wave = np.ascontiguousarray(waveform)
    idx = pad_indices(len(wave), cfg)
    padded = wave[idx] if idx is not None else wave
    frames = frame_signal(padded, cfg) * hann_window(cfg, dtype=wave.dtype)
    mag = np.abs(np.fft.rfft(frames, axis=-1))
    return LinearSpectrogram(values=mag.astype(wave.dtype), config_id=cfg.config_id())


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank_cached(
    sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float
) -> np.ndarray:
    bins = n_fft // 2 + 1
    if n_mels > bins:
        raise ConfigError(f"n_mels {n_mels} exceeds spectrogram bins {bins}")
    freqs = np.arange(bins) * sample_rate / n_fft
    points = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, bins))
    for m in range(n_mels):
        lo, mid, hi = points[m], points[m + 1], points[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    sums = fb.sum(axis=1)
    if np.any(sums <= 0):
        raise ConfigError(
            "mel filterbank has empty rows; lower n_mels or raise n_fft"
        )
    return fb


def mel_filterbank(cfg: AudioConfig) -> np.ndarray:
    """Triangular filterbank [n_mels x bins]; every row has positive sum."""
    fmax = cfg.sample_rate / 2 if cfg.fmax is None else cfg.fmax
    return _mel_filterbank_cached(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, fmax)


def mel_basis_t(cfg: AudioConfig, dtype=np.float32) -> np.ndarray:
    """Transposed filterbank [bins x n_mels], the exact matrix both the
    numpy and the differentiable mel paths multiply by."""
    return np.ascontiguousarray(mel_filterbank(cfg).T.astype(dtype))


def compute_mel(spec: LinearSpectrogram, cfg: AudioConfig) -> MelSpectrogram:
    """Log-mel of a magnitude spectrogram, floored at cfg.mel_floor."""
    basis = mel_basis_t(cfg, dtype=spec.values.dtype)
    if spec.values.shape[1] != basis.shape[0]:
        raise ConfigError(
            f"spectrogram bins {spec.values.shape[1]} do not match n_fft {cfg.n_fft}"
        )
    mel = spec.values @ basis
    floor = np.asarray(cfg.mel_floor, dtype=spec.values.dtype)
    return MelSpectrogram(
        values=np.log(np.maximum(mel, floor)), config_id=cfg.config_id()
    )


def mel_of_waveform(waveform: np.ndarray, cfg: AudioConfig) -> MelSpectrogram:
    return compute_mel(compute_linear_spectrogram(waveform, cfg), cfg)


# ---------------------------------------------------------------------------
# Frame-feature providers
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"FTFX"


def write_feature_file(
    path: str | Path, values: np.ndarray, frame_rate_hz: float
) -> None:
    """Binary feature matrix: magic, u32 T, u32 D, f32 rate, f32 rows (LE)."""
    values = np.ascontiguousarray(values, dtype="<f4")
    t, d = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIf", t, d, float(frame_rate_hz)))
        fh.write(values.tobytes())


def read_feature_file(path: str | Path) -> FrameFeatures:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        t, d, rate = struct.unpack("<IIf", fh.read(12))
        body = fh.read(t * d * 4)
    if len(body) != t * d * 4:
        raise ValueError(f"{path}: truncated body")
    values = np.frombuffer(body, dtype="<f4").reshape(t, d)
    return FrameFeatures(
        values=values.copy(), provider_id="precomputed", frame_rate_hz=rate
    )


class BuiltinMelProvider:
    """Log-mel frame features with optional per-corpus standardization."""

    provider_id = "builtin-mel"

    def __init__(self, audio: AudioConfig, normalize: bool = True):
        self.audio = audio
        self.normalize = normalize
        self.mean: np.ndarray | None = None
        self.std: np.ndarray | None = None

    @property
    def frame_rate_hz(self) -> float:
        return self.audio.sample_rate / self.audio.hop_length

    def _raw(self, entry: ManifestEntry) -> np.ndarray:
        wave, sr = read_wav(entry.audio_path)
        if sr != self.audio.sample_rate:
            raise ValueError(
                f"{entry.id}: sample rate {sr} != configured {self.audio.sample_rate}"
            )
        return mel_of_waveform(wave, self.audio).values

    def features_for_wave(self, wave: np.ndarray) -> FrameFeatures:
        """Features of an in-memory waveform (same normalization path)."""
        vals = mel_of_waveform(wave, self.audio).values
        if self.normalize:
            if self.mean is None:
                raise RuntimeError("provider not fitted; call fit() first")
            vals = (vals - self.mean) / self.std
        return FrameFeatures(
            values=vals, provider_id=self.provider_id, frame_rate_hz=self.frame_rate_hz
        )

    def fit(self, entries: list[ManifestEntry]) -> "BuiltinMelProvider":
        """Accumulate corpus mean/std per mel bin (manifest order)."""
        total = np.zeros(self.audio.n_mels, dtype=np.float64)
        total_sq = np.zeros(self.audio.n_mels, dtype=np.float64)
        count = 0
        for entry in entries:
            vals = self._raw(entry).astype(np.float64)
            total += vals.sum(axis=0)
            total_sq += np.square(vals).sum(axis=0)
            count += vals.shape[0]
        if count == 0:
            raise ValueError("no frames in corpus")
        mean = total / count
        var = np.maximum(total_sq / count - mean**2, 0.0)
        self.mean = mean.astype(np.float32)
        self.std = np.sqrt(var).astype(np.float32) + np.float32(1e-8)
        return self

    def features_for(self, entry: ManifestEntry) -> FrameFeatures:
        vals = self._raw(entry)
        if self.normalize:
            if self.mean is None:
                raise RuntimeError("provider not fitted; call fit() first")
            vals = (vals - self.mean) / self.std
        return FrameFeatures(
            values=vals, provider_id=self.provider_id, frame_rate_hz=self.frame_rate_hz
        )


class PrecomputedProvider:
    """Loads one FTFX feature file per utterance id from a directory."""

    provider_id = "precomputed"

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._dim: int | None = None

    def features_for(self, entry: ManifestEntry) -> FrameFeatures:
        path = self.directory / f"{entry.id}.ftfx"
        if not path.exists():
            raise FileNotFoundError(f"no precomputed features for {entry.id}: {path}")
        feats = read_feature_file(path)
        if self._dim is None:
            self._dim = feats.values.shape[1]
        elif feats.values.shape[1] != self._dim:
            raise ValueError(
                f"{entry.id}: feature dim {feats.values.shape[1]} differs from "
                f"corpus dim {self._dim}"
            )
        return feats


FeatureProvider = BuiltinMelProvider | PrecomputedProvider


def build_provider(
    provider: str,
    audio: AudioConfig,
    entries: list[ManifestEntry] | None = None,
    normalize: bool = True,
    feature_dir: str | Path | None = None,
) -> FeatureProvider:
    if provider == "builtin-mel":
        built = BuiltinMelProvider(audio, normalize=normalize)
        if normalize:
            if entries is None:
                raise ValueError("builtin-mel normalization needs corpus entries")
            built.fit(entries)
        return built
    if provider == "precomputed":
        if feature_dir is None:
            raise ValueError("precomputed provider needs feature_dir")
        return PrecomputedProvider(feature_dir)
    raise ValueError(f"unknown feature provider {provider!r}")
