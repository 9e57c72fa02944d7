"""The conditional VAE: posterior encoder, coupling flow, decoder, token
encoders, duration predictor, reference encoder, and the inference path.

Conventions
-----------
Activations are channels-first tensors ``[channels, frames]``. Gaussian
statistics keep that layout; transpose once when handing frame-major
matrices to the alignment routines. Standard deviations come from an
exponential parameterization with the log-std clamped so that
``std >= 1e-5`` always holds.

A model is built in one of two modes: ``pretrain`` carries a pseudo-token
encoder over the unit vocabulary, ``finetune`` carries a text encoder over
the phoneme vocabulary. Everything else is shared between modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import align
from . import tensor as T
from .config import AudioConfig, ModelConfig
from .data import PhonemeSequence
from .nn import Conv1d, Embedding, Linear, Module, ModuleList
from .pseudo import PseudoPhonemeSequence
from .seeding import seeded_rng
from .tensor import Tensor

# exp(+/-11.512925) spans [1.0000005e-05, 0.99999954e+05]: the lower clamp
# sits just above log(1e-5) so the advertised floor holds after rounding.
LOG_STD_MIN = -11.512925
LOG_STD_MAX = 11.512925
LOG_SCALE_CAP = 2.0  # coupling log-scales bounded to [-2, 2] via tanh

MODES = ("pretrain", "finetune")


class ModelError(ValueError):
    """Invalid model usage (wrong mode, bad shapes, out-of-range tokens)."""


@dataclass
class Stats:
    """Diagonal Gaussian statistics, channels-first ``[C, frames]``."""

    mean: Tensor
    std: Tensor

    @property
    def mean_tc(self) -> np.ndarray:
        """Frame-major mean ``[frames, C]`` for the alignment routines."""
        return self.mean.data.T

    @property
    def std_tc(self) -> np.ndarray:
        return self.std.data.T


def _split_stats(projected: Tensor, channels: int) -> Stats:
    mean = projected[:channels, :]
    log_std = projected[channels:, :].clamp(LOG_STD_MIN, LOG_STD_MAX)
    return Stats(mean=mean, std=log_std.exp())


class PosteriorEncoder(Module):
    """Linear spectrogram -> per-frame posterior Gaussian."""

    def __init__(
        self, spec_bins: int, hidden: int, latent: int, rng, dtype
    ) -> None:
        super().__init__()
        self.latent = latent
        self.conv1 = Conv1d(spec_bins, hidden, 5, padding=2, rng=rng, dtype=dtype)
        self.conv2 = Conv1d(hidden, hidden, 5, padding=2, rng=rng, dtype=dtype)
        self.proj = Conv1d(hidden, 2 * latent, 1, rng=rng, dtype=dtype)

    def __call__(self, spec: Tensor) -> Stats:
        h = self.conv1(spec).relu()
        h = self.conv2(h).relu()
        return _split_stats(self.proj(h), self.latent)


class CouplingBlock(Module):
    """Affine coupling on half the channels, conditioned on the other half.

    ``parity`` selects which half passes through unchanged; stacking blocks
    with alternating parity plays the role of a flip permutation between
    blocks while keeping the zero-initialized stack an exact identity map.
    """

    def __init__(
        self, channels: int, hidden: int, parity: int, speaker_dim: int, rng, dtype
    ) -> None:
        super().__init__()
        self.half = channels // 2
        self.parity = parity
        self.conv1 = Conv1d(self.half, hidden, 3, padding=1, rng=rng, dtype=dtype)
        self.conv2 = Conv1d(hidden, hidden, 3, padding=1, rng=rng, dtype=dtype)
        self.proj = Conv1d(hidden, channels, 1, zero_init=True, dtype=dtype)
        if speaker_dim:
            self.speaker_proj = Linear(speaker_dim, hidden, rng=rng, dtype=dtype)

    def _halves(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if self.parity == 0:
            return x[: self.half, :], x[self.half :, :]
        return x[self.half :, :], x[: self.half, :]

    def _join(self, kept: Tensor, changed: Tensor) -> Tensor:
        if self.parity == 0:
            return T.concat([kept, changed], axis=0)
        return T.concat([changed, kept], axis=0)

    def _scale_shift(self, kept: Tensor, speaker: Tensor | None):
        h = self.conv1(kept)
        if speaker is not None:
            if not hasattr(self, "speaker_proj"):
                raise ModelError("speaker conditioning on a single-speaker flow")
            h = h + self.speaker_proj(speaker)
        h = self.conv2(h.relu()).relu()
        out = self.proj(h)
        log_s = out[: self.half, :].tanh() * LOG_SCALE_CAP
        shift = out[self.half :, :]
        return log_s, shift

    def forward(self, x: Tensor, speaker: Tensor | None):
        kept, moved = self._halves(x)
        log_s, shift = self._scale_shift(kept, speaker)
        moved = moved * log_s.exp() + shift
        return self._join(kept, moved), log_s.sum()

    def inverse(self, y: Tensor, speaker: Tensor | None):
        kept, moved = self._halves(y)
        log_s, shift = self._scale_shift(kept, speaker)
        moved = (moved - shift) * (-log_s).exp()
        return self._join(kept, moved), -log_s.sum()


class Flow(Module):
    """Stack of coupling blocks with exact log-determinant accounting."""

    def __init__(
        self, channels: int, hidden: int, blocks: int, speaker_dim: int, rng, dtype
    ) -> None:
        super().__init__()
        self.blocks = ModuleList(
            CouplingBlock(channels, hidden, b % 2, speaker_dim, rng, dtype)
            for b in range(blocks)
        )

    def forward(self, z: Tensor, speaker: Tensor | None = None):
        logdet = None
        for i, block in enumerate(self.blocks):
            z, ld = block.forward(z, speaker)
            if not np.all(np.isfinite(z.data)):
                raise ModelError(f"non-finite flow output at block {i}")
            logdet = ld if logdet is None else logdet + ld
        return z, logdet

    def inverse(self, z_p: Tensor, speaker: Tensor | None = None):
        logdet = None
        for i in range(len(self.blocks) - 1, -1, -1):
            z_p, ld = self.blocks[i].inverse(z_p, speaker)
            if not np.all(np.isfinite(z_p.data)):
                raise ModelError(f"non-finite flow output at block {i}")
            logdet = ld if logdet is None else logdet + ld
        return z_p, logdet


class TokenEncoder(Module):
    """Embedding, two 1-D convolutions with one ReLU between, stat heads."""

    def __init__(
        self, vocab: int, hidden: int, latent: int, rng, dtype
    ) -> None:
        super().__init__()
        self.latent = latent
        self.emb = Embedding(vocab, hidden, rng=rng, dtype=dtype)
        self.conv1 = Conv1d(hidden, hidden, 3, padding=1, rng=rng, dtype=dtype)
        self.conv2 = Conv1d(hidden, hidden, 3, padding=1, rng=rng, dtype=dtype)
        self.proj = Conv1d(hidden, 2 * latent, 1, rng=rng, dtype=dtype)

    def __call__(self, ids: np.ndarray) -> tuple[Tensor, Stats]:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ModelError("token sequence must be 1-D and non-empty")
        hidden = self.conv2(self.conv1(self.emb(ids).t()).relu())
        return hidden, _split_stats(self.proj(hidden), self.latent)


class DurationPredictor(Module):
    """Per-token log-duration regressor over encoder hidden states.

    Deliberately has no speaker input: duration is speaker-independent by
    construction.
    """

    def __init__(self, hidden: int, inner: int, rng, dtype) -> None:
        super().__init__()
        self.conv1 = Conv1d(hidden, inner, 3, padding=1, rng=rng, dtype=dtype)
        self.proj = Conv1d(inner, 1, 1, rng=rng, dtype=dtype)

    def __call__(self, hidden: Tensor) -> Tensor:
        out = self.proj(self.conv1(hidden).relu())
        return out.reshape(out.shape[1])


def upsample_factors(hop: int) -> list[int]:
    """Factor a hop length into upsampling stages of at most 8x each."""
    factors: list[int] = []
    rest = hop
    for f in (8, 7, 6, 5, 4, 3, 2):
        while rest % f == 0 and rest > 1:
            factors.append(f)
            rest //= f
    if rest > 1:
        factors.append(rest)
    return factors


class WaveDecoder(Module):
    """Latent frames -> waveform via zero-stuffing upsampling stages.

    Output length is exactly ``frames * hop``; ``calls`` counts forward
    evaluations so training stages can prove the decoder was never run.
    """

    def __init__(self, latent: int, channels: int, hop: int, rng, dtype) -> None:
        super().__init__()
        self.hop = hop
        self.factors = upsample_factors(hop)
        self.calls = 0
        self.pre = Conv1d(latent, channels, 7, padding=3, rng=rng, dtype=dtype)
        self.stages = ModuleList(
            Conv1d(channels, channels, 2 * f + 1, padding=f, rng=rng, dtype=dtype)
            for f in self.factors
        )
        self.post = Conv1d(channels, 1, 7, padding=3, rng=rng, dtype=dtype)

    def __call__(self, z: Tensor) -> Tensor:
        self.calls += 1
        x = self.pre(z).relu()
        for factor, conv in zip(self.factors, self.stages):
            x = conv(T.upsample_cols(x, factor)).relu()
        wave = self.post(x).tanh()
        return wave.reshape(wave.shape[1])


class ReferenceEncoder(Module):
    """Mel spectrogram -> fixed-size speaker embedding.

    Circular padding plus temporal mean pooling make the embedding exactly
    invariant to tiling the input along time (up to float summation order).
    """

    def __init__(self, n_mels: int, hidden: int, embed_dim: int, rng, dtype) -> None:
        super().__init__()
        self.conv1 = Conv1d(
            n_mels, hidden, 3, padding=1, pad_mode="circular", rng=rng, dtype=dtype
        )
        self.conv2 = Conv1d(
            hidden, hidden, 3, padding=1, pad_mode="circular", rng=rng, dtype=dtype
        )
        self.proj = Linear(hidden, embed_dim, rng=rng, dtype=dtype)

    def __call__(self, mel: Tensor) -> Tensor:
        h = self.conv2(self.conv1(mel).relu()).relu()
        return self.proj(h.mean(axis=1, keepdims=True))


@dataclass
class SynthesisResult:
    wave: np.ndarray
    durations: np.ndarray
    tokens: np.ndarray


class SynthesisModel(Module):
    """The full conditional VAE in either pre-training or fine-tuning mode."""

    def __init__(
        self,
        config: ModelConfig,
        audio: AudioConfig,
        mode: str,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if mode not in MODES:
            raise ModelError(f"unknown mode {mode!r}")
        self.config = config
        self.audio = audio
        self.mode = mode
        self.np_dtype = np.float32 if config.dtype == "float32" else np.float64
        rng = seeded_rng(seed)
        dtype = self.np_dtype
        c = config.latent_channels
        speaker_dim = config.speaker_embed_dim if config.multi_speaker else 0
        self.posterior = PosteriorEncoder(
            audio.spec_bins, config.hidden_channels, c, rng, dtype
        )
        self.flow = Flow(
            c, config.flow_hidden, config.flow_blocks, speaker_dim, rng, dtype
        )
        self.decoder = WaveDecoder(
            c, config.decoder_channels, audio.hop_length, rng, dtype
        )
        self.duration = DurationPredictor(
            config.hidden_channels, config.duration_hidden, rng, dtype
        )
        if mode == "pretrain":
            self.pseudo_encoder = TokenEncoder(
                config.pseudo_vocab_size, config.hidden_channels, c, rng, dtype
            )
        else:
            self.text_encoder = TokenEncoder(
                config.text_vocab_size, config.hidden_channels, c, rng, dtype
            )
        if config.multi_speaker:
            self.reference = ReferenceEncoder(
                audio.n_mels, config.hidden_channels, speaker_dim, rng, dtype
            )

    # -- encoders -----------------------------------------------------------

    def posterior_encode(
        self, spec_values: np.ndarray, eps: np.ndarray | float = 0.0
    ) -> tuple[Tensor, Stats]:
        """Sample z = mean + std * eps from the frame posterior.

        ``spec_values`` is a frame-major magnitude spectrogram [T, bins];
        ``eps`` is broadcast against the channels-first latent [C, T].
        """
        spec = np.asarray(spec_values, dtype=self.np_dtype)
        if spec.ndim != 2 or spec.shape[0] < 1:
            raise ModelError("spectrogram must be [frames, bins] with frames >= 1")
        stats = self.posterior(Tensor(spec.T))
        noise = np.asarray(eps, dtype=self.np_dtype)
        z = stats.mean + stats.std * Tensor(noise)
        return z, stats

    def text_encode(self, phonemes) -> tuple[Tensor, Stats]:
        if self.mode != "finetune":
            raise ModelError("text encoding requires a finetune-mode model")
        ids = phonemes.as_array() if isinstance(phonemes, PhonemeSequence) else phonemes
        return self.text_encoder(ids)

    def pseudo_encode(self, pseudo) -> tuple[Tensor, Stats]:
        if self.mode != "pretrain":
            raise ModelError("pseudo encoding requires a pretrain-mode model")
        tokens = (
            pseudo.tokens if isinstance(pseudo, PseudoPhonemeSequence) else pseudo
        )
        return self.pseudo_encoder(tokens)

    def token_encode(self, tokens) -> tuple[Tensor, Stats]:
        """Mode-appropriate prior encoder."""
        if self.mode == "pretrain":
            return self.pseudo_encode(tokens)
        return self.text_encode(tokens)

    # -- flow / decoder / reference -------------------------------------------

    def flow_forward(self, z: Tensor, speaker: Tensor | None = None):
        return self.flow.forward(z, self._check_speaker(speaker))

    def flow_inverse(self, z_p: Tensor, speaker: Tensor | None = None):
        return self.flow.inverse(z_p, self._check_speaker(speaker))

    def _check_speaker(self, speaker: Tensor | None) -> Tensor | None:
        if not self.config.multi_speaker:
            if speaker is not None:
                raise ModelError("speaker embedding on a single-speaker model")
            return None
        if speaker is None:
            return self.zero_speaker()
        return speaker

    def zero_speaker(self) -> Tensor:
        return Tensor(np.zeros((self.config.speaker_embed_dim, 1), self.np_dtype))

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)

    def predict_durations(self, hidden: Tensor) -> Tensor:
        return self.duration(hidden)

    def reference_encode(self, mel_values: np.ndarray) -> Tensor:
        if not self.config.multi_speaker:
            raise ModelError("reference encoding on a single-speaker model")
        mel = np.asarray(mel_values, dtype=self.np_dtype)
        if mel.ndim != 2 or mel.shape[0] < 1:
            raise ModelError("mel must be [frames, n_mels] with frames >= 1")
        return self.reference(Tensor(mel.T))

    # -- inference -----------------------------------------------------------

    def synthesize(
        self,
        phonemes,
        noise_scale: float = 0.667,
        length_scale: float = 1.0,
        ref_mel: np.ndarray | None = None,
        seed: int = 0,
    ) -> SynthesisResult:
        """Text tokens -> waveform (deterministic given the seed)."""
        if ref_mel is not None and not self.config.multi_speaker:
            raise ModelError("reference mel given to a single-speaker model")
        with T.no_grad():
            hidden, prior = self.text_encode(phonemes)
            log_dur = self.predict_durations(hidden).data
            durations = np.maximum(
                1, np.floor(np.exp(log_dur) * length_scale + 0.5)
            ).astype(np.int64)
            mean_f, std_f = align.expand_prior(prior.mean_tc, prior.std_tc, durations)
            rng = seeded_rng(seed)
            eps = rng.standard_normal(mean_f.shape).astype(self.np_dtype)
            z_p = Tensor(
                (mean_f + std_f * (noise_scale * eps)).T.astype(self.np_dtype)
            )
            speaker = None
            if self.config.multi_speaker:
                speaker = (
                    self.reference_encode(ref_mel) if ref_mel is not None
                    else self.zero_speaker()
                )
            z, _ = self.flow.inverse(z_p, speaker)
            wave = self.decode(z)
        ids = phonemes.as_array() if isinstance(phonemes, PhonemeSequence) else phonemes
        return SynthesisResult(
            wave=np.asarray(wave.data, dtype=np.float32),
            durations=durations,
            tokens=np.asarray(ids, dtype=np.int64),
        )
