"""Synthesis quality metrics and manifest-level evaluation reports."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ._kernels import levenshtein
from .audio import read_wav
from .config import AudioConfig
from .data import Lexicon, ManifestEntry, text_to_phonemes
from .features import mel_of_waveform
from .model import SynthesisModel
from .pseudo import Codebook, merge_runs, quantize


class EvalError(ValueError):
    """Raised for metric inputs that cannot be scored."""


def mel_distance(reference_wave: np.ndarray, generated_wave: np.ndarray, cfg: AudioConfig) -> float:
    """Mean absolute log-mel difference over the overlapping frames.

    The two waveforms may differ in length; frames beyond the shorter mel
    matrix are ignored. Both inputs must yield at least one frame.
    """
    ref = mel_of_waveform(np.asarray(reference_wave), cfg).values
    gen = mel_of_waveform(np.asarray(generated_wave), cfg).values
    frames = min(ref.shape[0], gen.shape[0])
    if frames == 0:
        raise EvalError("no overlapping mel frames to compare")
    diff = np.abs(ref[:frames].astype(np.float64) - gen[:frames].astype(np.float64))
    return float(diff.mean())


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise EvalError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        raise EvalError("cosine similarity undefined for zero-norm embeddings")
    return float(np.dot(a, b) / denom)


def speaker_similarity(
    reference_wave: np.ndarray, generated_wave: np.ndarray, model: SynthesisModel
) -> float:
    """Cosine similarity between reference-encoder embeddings of two waves."""
    if not model.config.multi_speaker:
        raise EvalError("speaker similarity requires a multi-speaker model")
    ref_mel = mel_of_waveform(np.asarray(reference_wave), model.audio).values
    gen_mel = mel_of_waveform(np.asarray(generated_wave), model.audio).values
    emb_ref = model.reference_encode(ref_mel).data.ravel()
    emb_gen = model.reference_encode(gen_mel).data.ravel()
    return cosine_similarity(emb_ref, emb_gen)


def token_roundtrip_accuracy(
    generated_wave: np.ndarray,
    expected_tokens: np.ndarray,
    codebook: Codebook,
    provider,
) -> float:
    """How well a generated wave re-tokenizes to its pseudo token targets.

    Quantizes the wave with the given codebook and feature provider, merges
    runs, and returns 1 - edit_distance / max(len). 1.0 means the merged
    sequence round-trips exactly.
    """
    expected = np.asarray(expected_tokens, dtype=np.int64).ravel()
    if expected.size == 0:
        raise EvalError("expected token sequence is empty")
    feats = provider.features_for_wave(np.asarray(generated_wave))
    got = merge_runs(quantize(feats, codebook)).tokens
    if got.size == 0:
        raise EvalError("generated wave produced no tokens")
    dist = levenshtein(got, expected)
    return 1.0 - dist / max(got.size, expected.size)


@dataclass
class EvalReport:
    """Per-utterance metric records plus corpus-level aggregates."""

    records: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_AGGREGATE_FIELDS = ("mel_l1", "speaker_cos", "token_acc")


def evaluate_manifest(
    model: SynthesisModel,
    entries: list[ManifestEntry],
    codebook: Codebook | None = None,
    provider=None,
    lexicon: Lexicon | None = None,
    noise_scale: float = 0.667,
    length_scale: float = 1.0,
    seed: int = 0,
) -> EvalReport:
    """Synthesize each labeled entry and score it against its recording.

    Entries that cannot be scored (missing text, unreadable audio) are
    recorded under ``errors`` instead of aborting the whole run.
    """
    if model.mode != "finetune":
        raise EvalError("evaluation synthesizes from text; model must be in finetune mode")
    if lexicon is None:
        lexicon = Lexicon.default()
    report = EvalReport()
    for index, entry in enumerate(entries):
        try:
            if not entry.text:
                raise EvalError("entry has no text to synthesize")
            ref_wave, sr = read_wav(entry.audio_path)
            if sr != model.audio.sample_rate:
                raise EvalError(f"sample rate {sr} != configured {model.audio.sample_rate}")
            phonemes = text_to_phonemes(entry.text, lexicon)
            ref_mel = None
            if model.config.multi_speaker:
                ref_mel = mel_of_waveform(ref_wave, model.audio).values
            result = model.synthesize(
                phonemes,
                noise_scale=noise_scale,
                length_scale=length_scale,
                ref_mel=ref_mel,
                seed=seed + index,
            )
            record = {
                "id": entry.id,
                "mel_l1": mel_distance(ref_wave, result.wave, model.audio),
                "gen_seconds": result.wave.size / model.audio.sample_rate,
            }
            if model.config.multi_speaker:
                record["speaker_cos"] = speaker_similarity(ref_wave, result.wave, model)
            if codebook is not None and provider is not None:
                expected = merge_runs(
                    quantize(provider.features_for_wave(ref_wave), codebook)
                ).tokens
                record["token_acc"] = token_roundtrip_accuracy(
                    result.wave, expected, codebook, provider
                )
            report.records.append(record)
        except (EvalError, ValueError, OSError) as exc:
            report.errors.append({"id": entry.id, "error": str(exc)})
    agg: dict = {"count": len(report.records), "error_count": len(report.errors)}
    for key in _AGGREGATE_FIELDS:
        vals = [r[key] for r in report.records if key in r]
        if vals:
            agg[key] = float(np.mean(vals))
    report.aggregate = agg
    return report
