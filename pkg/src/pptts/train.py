"""Two-stage training: full pre-training and partial fine-tuning.

The stages share one loss path. Pre-training optimizes every parameter
against pseudo token targets plus a mel reconstruction term; fine-tuning
swaps in real phoneme targets, freezes the posterior encoder and decoder
(and reference encoder when present), fine-tunes the flow, and trains the
text encoder and duration predictor from scratch.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import align, losses
from . import tensor as tz
from .audio import read_wav
from .config import AudioConfig, ModelConfig, RunConfig, _build_section
from .data import Lexicon, ManifestEntry, text_to_phonemes
from .features import build_provider
from .model import Stats, SynthesisModel
from .nn import AdamW, Conv1d, Module
from .pseudo import Codebook, codebook_hash, merge_runs, quantize
from .seeding import seeded_rng
from .tensor import Tensor

CHECKPOINT_MAGIC = b"TTSCKPT1"
CHECKPOINT_VERSION = 1

# Parameter-name prefixes that stay fixed during fine-tuning, the ones that
# continue from their pre-trained values, and the ones that start over.
_FROZEN_PREFIXES = ("posterior.", "decoder.", "reference.")
_FINETUNED_PREFIXES = ("flow.",)
_SCRATCH_PREFIXES = ("text_encoder.", "duration.")


class TrainError(RuntimeError):
    """Raised for invalid training setups or broken checkpoints."""


# -- parameter partitioning -------------------------------------------------


@dataclass(frozen=True)
class ParameterPartition:
    """Disjoint split of parameter names by training treatment."""

    frozen: frozenset[str]
    finetuned: frozenset[str]
    scratch: frozenset[str]

    @property
    def trainable(self) -> frozenset[str]:
        return self.finetuned | self.scratch


def partition_parameters(model: SynthesisModel, stage: str) -> ParameterPartition:
    """Assign every model parameter to frozen / finetuned / scratch.

    Pre-training (and the from-scratch baseline) trains everything. For
    fine-tuning the assignment is by name prefix; an unrecognized prefix is
    an error rather than a silent default.
    """
    names = [name for name, _ in model.named_parameters()]
    if stage == "pretrain":
        return ParameterPartition(frozenset(), frozenset(), frozenset(names))
    if stage != "finetune":
        raise TrainError(f"unknown stage {stage!r}")
    frozen, finetuned, scratch = set(), set(), set()
    for name in names:
        if name.startswith("pseudo_encoder."):
            raise TrainError(
                "pseudo token encoder has no role in fine-tuning; "
                "it must be discarded when converting a pre-trained model"
            )
        if name.startswith(_FROZEN_PREFIXES):
            frozen.add(name)
        elif name.startswith(_FINETUNED_PREFIXES):
            finetuned.add(name)
        elif name.startswith(_SCRATCH_PREFIXES):
            scratch.add(name)
        else:
            raise TrainError(f"parameter {name!r} has no fine-tuning assignment")
    return ParameterPartition(frozenset(frozen), frozenset(finetuned), frozenset(scratch))


def apply_partition(model: SynthesisModel, partition: ParameterPartition) -> None:
    """Mark frozen parameters non-trainable and write-protect their data."""
    for name, param in model.named_parameters():
        if name in partition.frozen:
            param.requires_grad = False
            param.grad = None
            param.data.setflags(write=False)
        else:
            param.requires_grad = True


# -- corpus preparation -----------------------------------------------------


@dataclass
class PreparedUtterance:
    """One training item with everything precomputed that never changes."""

    entry_id: str
    wave: np.ndarray  # [samples] float32
    spec: np.ndarray  # [frames, bins] linear magnitudes
    mel: np.ndarray  # [frames, n_mels] log mels
    tokens: np.ndarray  # [n_tokens] int64 token ids
    speaker: str = ""


def prepare_corpus(
    entries: list[ManifestEntry],
    cfg: RunConfig,
    stage: str,
    codebook: Codebook | None = None,
    provider=None,
    lexicon: Lexicon | None = None,
) -> list[PreparedUtterance]:
    """Load audio and derive per-utterance targets for one stage.

    Pre-training labels every utterance with its merged pseudo token runs;
    fine-tuning keeps only entries that carry text and converts it to
    phoneme ids.
    """
    if not entries:
        raise TrainError("manifest is empty")
    if stage == "pretrain":
        if codebook is None:
            raise TrainError("pre-training requires a trained codebook")
        if codebook.k > cfg.model.pseudo_vocab_size:
            raise TrainError(
                f"codebook has {codebook.k} clusters but the model's pseudo "
                f"vocabulary holds {cfg.model.pseudo_vocab_size}"
            )
        if provider is None:
            provider = build_provider(
                cfg.codebook.provider,
                cfg.feature,
                entries=entries,
                normalize=cfg.codebook.normalize_features,
                feature_dir=cfg.codebook.feature_dir,
            )
    else:
        entries = [e for e in entries if e.text]
        if not entries:
            raise TrainError("fine-tuning requires labeled entries (none have text)")
        if lexicon is None:
            lexicon = Lexicon.default()

    prepared = []
    from .features import compute_linear_spectrogram, compute_mel

    for entry in entries:
        wave, sr = read_wav(entry.audio_path)
        if sr != cfg.feature.sample_rate:
            raise TrainError(
                f"{entry.id}: sample rate {sr} != configured {cfg.feature.sample_rate}"
            )
        spec = compute_linear_spectrogram(wave, cfg.feature)
        mel = compute_mel(spec, cfg.feature)
        if stage == "pretrain":
            feats = provider.features_for(entry)
            tokens = merge_runs(quantize(feats, codebook)).tokens
        else:
            tokens = text_to_phonemes(entry.text, lexicon).as_array()
        if tokens.size > spec.values.shape[0]:
            raise TrainError(
                f"{entry.id}: {tokens.size} tokens exceed {spec.values.shape[0]} "
                "frames; alignment is impossible"
            )
        prepared.append(
            PreparedUtterance(
                entry_id=entry.id,
                wave=wave,
                spec=spec.values,
                mel=mel.values,
                tokens=tokens,
                speaker=entry.speaker_id,
            )
        )
    return prepared


# -- loss computation -------------------------------------------------------


def utterance_losses(
    model: SynthesisModel,
    item: PreparedUtterance,
    eps,
    include_recon: bool,
) -> tuple[dict[str, Tensor], Tensor | None]:
    """Loss terms for one utterance. Returns (losses, decoded wave or None).

    The alignment between tokens and latent frames is recomputed each call
    by monotonic search over prior likelihoods; the search itself never
    contributes gradients.
    """
    z, post = model.posterior_encode(item.spec, eps)
    speaker = model.reference_encode(item.mel) if model.config.multi_speaker else None
    z_p, logdet = model.flow_forward(z, speaker)
    hidden, prior = model.token_encode(item.tokens)

    with tz.no_grad():
        grid = align.likelihood_grid(prior.mean_tc, prior.std_tc, z_p.data.T)
        assignment = align.monotonic_alignment_search(grid)
    durations = align.alignment_to_durations(assignment, item.tokens.size)

    frame_prior = Stats(
        mean=tz.repeat_cols(prior.mean, durations),
        std=tz.repeat_cols(prior.std, durations),
    )
    out = {
        "kld": losses.kld_prior_loss(post, z, z_p, frame_prior, logdet),
        "dur": losses.duration_loss(model.predict_durations(hidden), durations),
    }
    wave = None
    if include_recon:
        wave = model.decode(z)
        out["recon"] = losses.reconstruction_loss(wave, item.mel, model.audio)
    return out, wave


def _batch_mean(terms: list[dict[str, Tensor]]) -> dict[str, Tensor]:
    keys = terms[0].keys()
    inv = 1.0 / len(terms)
    out = {}
    for key in keys:
        total = terms[0][key]
        for term in terms[1:]:
            total = total + term[key]
        out[key] = total * inv
    return out


def _sample_eps(model: SynthesisModel, item: PreparedUtterance, rng) -> np.ndarray:
    shape = (model.config.latent_channels, item.spec.shape[0])
    return rng.standard_normal(shape).astype(model.np_dtype)


class ToyDiscriminator(Module):
    """Tiny waveform critic for the optional least-squares adversarial term."""

    def __init__(self, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv1d(1, 16, 15, stride=4, padding=7, rng=rng, dtype=dtype)
        self.conv2 = Conv1d(16, 16, 15, stride=4, padding=7, rng=rng, dtype=dtype)
        self.proj = Conv1d(16, 1, 3, padding=1, rng=rng, dtype=dtype)

    def __call__(self, wave: Tensor) -> Tensor:
        x = wave.reshape(1, wave.shape[0])
        x = self.conv1(x).relu()
        x = self.conv2(x).relu()
        return self.proj(x).mean()


def training_step(
    model: SynthesisModel,
    optimizer: AdamW,
    items: list[PreparedUtterance],
    cfg,
    step_index: int,
    partition: ParameterPartition,
    include_recon: bool,
    adversary: ToyDiscriminator | None = None,
    adversary_opt: AdamW | None = None,
) -> dict[str, float]:
    """One optimizer update over a batch. Returns scalar loss metrics."""
    terms = []
    fakes: list[tuple[Tensor, PreparedUtterance]] = []
    for j, item in enumerate(items):
        rng = seeded_rng(cfg.seed, step_index, j)
        eps = _sample_eps(model, item, rng)
        losses_j, wave = utterance_losses(model, item, eps, include_recon)
        terms.append(losses_j)
        if adversary is not None and wave is not None:
            fakes.append((wave, item))

    mean = _batch_mean(terms)
    total = cfg.kld_weight * mean["kld"] + cfg.duration_weight * mean["dur"]
    if include_recon:
        total = total + cfg.mel_weight * mean["recon"]

    if adversary is not None and fakes:
        # Critic update on detached generator output, least-squares targets.
        d_loss = None
        for wave, item in fakes:
            real = adversary(Tensor(item.wave.astype(model.np_dtype)))
            fake = adversary(wave.detach())
            term = (real - 1.0) ** 2 + fake**2
            d_loss = term if d_loss is None else d_loss + term
        d_loss = d_loss * (1.0 / len(fakes))
        adversary_opt.zero_grad()
        d_loss.backward()
        adversary_opt.step()

        g_adv = None
        for wave, _ in fakes:
            term = (adversary(wave) - 1.0) ** 2
            g_adv = term if g_adv is None else g_adv + term
        g_adv = g_adv * (1.0 / len(fakes))
        total = total + cfg.adversarial_weight * g_adv
        mean["adv"] = g_adv

    optimizer.zero_grad()
    total.backward()
    params = dict(model.named_parameters())
    for name in partition.frozen:
        if params[name].grad is not None:
            raise TrainError(f"gradient reached frozen parameter {name!r}")
    optimizer.step()

    out = {
        "loss_total": float(total.item()),
        "loss_kld": float(mean["kld"].item()),
        "loss_dur": float(mean["dur"].item()),
    }
    if include_recon:
        out["loss_recon"] = float(mean["recon"].item())
    return out


def evaluate_losses(model: SynthesisModel, items: list[PreparedUtterance]) -> dict[str, float]:
    """Deterministic validation losses (posterior noise disabled)."""
    if not items:
        raise TrainError("no items to evaluate")
    klds, durs = [], []
    with tz.no_grad():
        for item in items:
            losses_i, _ = utterance_losses(model, item, eps=0.0, include_recon=False)
            klds.append(float(losses_i["kld"].item()))
            durs.append(float(losses_i["dur"].item()))
    return {
        "loss_kld": float(np.mean(klds)),
        "loss_dur": float(np.mean(durs)),
        "loss_total": float(np.mean(klds) + np.mean(durs)),
    }


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    """Deserialized checkpoint: weights plus enough metadata to rebuild."""

    config: ModelConfig
    audio: AudioConfig
    mode: str
    stage: str
    from_scratch: bool
    codebook_hash: str | None
    seed: int
    params: dict[str, np.ndarray]
    optimizer: dict | None = None


_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(
    model: SynthesisModel,
    path: str | Path,
    stage: str,
    seed: int = 0,
    codebook_hash: str | None = None,
    optimizer=None,
    from_scratch: bool = False,
) -> None:
    """Serialize model weights and metadata atomically.

    Layout: magic, u32 version, u32 header length, JSON header with sorted
    keys, then raw little-endian parameter blobs in header order.
    """
    path = Path(path)
    named = list(model.named_parameters())
    header = {
        "mode": model.mode,
        "stage": stage,
        "from_scratch": bool(from_scratch),
        "seed": int(seed),
        "codebook_hash": codebook_hash,
        "config": dataclasses.asdict(model.config),
        "audio": dataclasses.asdict(model.audio),
        "params": [
            {"name": name, "shape": list(p.data.shape), "dtype": str(p.data.dtype)}
            for name, p in named
        ],
        "optimizer": None,
    }
    blobs = [np.ascontiguousarray(p.data) for _, p in named]
    if optimizer is not None:
        state = optimizer if isinstance(optimizer, dict) else optimizer.state_dict()
        names = sorted(state["m"])
        header["optimizer"] = {
            "step": int(state["step"]),
            "slots": [
                {
                    "name": name,
                    "shape": list(state["m"][name].shape),
                    "dtype": str(state["m"][name].dtype),
                }
                for name in names
            ],
        }
        for name in names:
            blobs.append(np.ascontiguousarray(state["m"][name]))
            blobs.append(np.ascontiguousarray(state["v"][name]))
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for arr in blobs:
            code = _DTYPE_CODES.get(str(arr.dtype))
            if code is None:
                raise TrainError(f"unsupported parameter dtype {arr.dtype}")
            fh.write(arr.astype(code, copy=False).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise TrainError(f"{path}: not a model checkpoint (bad magic)")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise TrainError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))

        def read_blob(shape, dtype_name):
            code = _DTYPE_CODES.get(dtype_name)
            if code is None:
                raise TrainError(f"{path}: unsupported dtype {dtype_name} in header")
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * np.dtype(code).itemsize)
            if len(raw) != count * np.dtype(code).itemsize:
                raise TrainError(f"{path}: truncated checkpoint")
            arr = np.frombuffer(raw, dtype=code).astype(dtype_name, copy=False)
            return arr.reshape(shape).copy()

        params = {}
        for meta in header["params"]:
            params[meta["name"]] = read_blob(meta["shape"], meta["dtype"])
        optimizer = None
        if header.get("optimizer") is not None:
            opt = header["optimizer"]
            m, v = {}, {}
            for meta in opt["slots"]:
                m[meta["name"]] = read_blob(meta["shape"], meta["dtype"])
                v[meta["name"]] = read_blob(meta["shape"], meta["dtype"])
            optimizer = {"step": int(opt["step"]), "m": m, "v": v}
        trailing = fh.read(1)
        if trailing:
            raise TrainError(f"{path}: trailing bytes after parameter blobs")

    return Checkpoint(
        config=_build_section(ModelConfig, header["config"], "model"),
        audio=_build_section(AudioConfig, header["audio"], "feature"),
        mode=header["mode"],
        stage=header["stage"],
        from_scratch=bool(header.get("from_scratch", False)),
        codebook_hash=header.get("codebook_hash"),
        seed=int(header.get("seed", 0)),
        params=params,
        optimizer=optimizer,
    )


def build_model_from_checkpoint(ckpt: Checkpoint) -> SynthesisModel:
    """Reconstruct a model whose parameter bytes match the checkpoint."""
    model = SynthesisModel(ckpt.config, ckpt.audio, ckpt.mode, seed=0)
    _load_params(model, ckpt.params, require_all=True)
    return model


def _load_params(model: SynthesisModel, params: dict[str, np.ndarray], require_all: bool) -> None:
    named = dict(model.named_parameters())
    if require_all:
        missing = sorted(set(named) - set(params))
        extra = sorted(set(params) - set(named))
        if missing or extra:
            raise TrainError(
                f"checkpoint/model parameter mismatch; missing={missing} extra={extra}"
            )
    for name, param in named.items():
        if name not in params:
            continue
        arr = params[name]
        if tuple(arr.shape) != tuple(param.data.shape):
            raise TrainError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs model "
                f"{param.data.shape}"
            )
        param.data = arr.astype(param.data.dtype, copy=True)


def init_finetune_from_pretrained(
    ckpt: Checkpoint, seed: int, text_vocab_size: int | None = None
) -> SynthesisModel:
    """Convert a pre-trained checkpoint into a fine-tuning model.

    Posterior encoder, flow, decoder, and reference encoder keep their
    trained weights; the text encoder and duration predictor are freshly
    initialized from the seed; the pseudo token encoder is discarded.
    """
    if ckpt.mode != "pretrain":
        raise TrainError(
            f"fine-tuning must start from a pre-training checkpoint, got mode "
            f"{ckpt.mode!r}"
        )
    config = ckpt.config
    if text_vocab_size is not None and text_vocab_size != config.text_vocab_size:
        config = dataclasses.replace(config, text_vocab_size=text_vocab_size)
    model = SynthesisModel(config, ckpt.audio, "finetune", seed=seed)
    keep = ("posterior.", "flow.", "decoder.", "reference.")
    carried = {k: v for k, v in ckpt.params.items() if k.startswith(keep)}
    _load_params(model, carried, require_all=False)
    # Every carried-over prefix must be fully covered by the new model.
    model_names = {n for n, _ in model.named_parameters() if n.startswith(keep)}
    if model_names != set(carried):
        raise TrainError(
            "pre-trained checkpoint does not cover the fine-tuning model: "
            f"unmatched={sorted(model_names ^ set(carried))}"
        )
    return model


# -- training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    model: SynthesisModel
    checkpoint_path: Path
    metrics_path: Path
    decoder_calls: int
    final_metrics: dict[str, float]
    elapsed_s: float = 0.0


def _check_ckpt_compat(cfg: RunConfig, ckpt: Checkpoint) -> None:
    if ckpt.config != cfg.model:
        raise TrainError(
            "model config does not match checkpoint (channel/size mismatch); "
            "re-run with the checkpoint's model settings"
        )
    if ckpt.audio != cfg.feature:
        raise TrainError("feature config does not match checkpoint")


def run_training(
    entries: list[ManifestEntry],
    cfg: RunConfig,
    out_dir: str | Path,
    codebook: Codebook | None = None,
    init_ckpt: str | Path | None = None,
    provider=None,
    lexicon: Lexicon | None = None,
) -> TrainResult:
    """Run one full training stage and write metrics + checkpoints.

    Batches cycle through a per-epoch shuffled order seeded from the run
    seed, so reruns with identical inputs produce identical parameter bytes
    and metric values.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train
    stage = tcfg.stage

    if stage == "pretrain":
        if tcfg.from_scratch:
            raise TrainError("from_scratch only applies to the finetune stage")
        model = SynthesisModel(cfg.model, cfg.feature, "pretrain", seed=tcfg.seed)
        if init_ckpt is not None:
            ckpt = load_checkpoint(init_ckpt)
            if ckpt.mode != "pretrain":
                raise TrainError("resume checkpoint is not a pre-training checkpoint")
            _check_ckpt_compat(cfg, ckpt)
            if codebook is not None and ckpt.codebook_hash is not None:
                if ckpt.codebook_hash != codebook_hash(codebook):
                    warnings.warn(
                        "resuming with a different codebook than the checkpoint "
                        "was trained with; pseudo token targets will not line up",
                        stacklevel=2,
                    )
            _load_params(model, ckpt.params, require_all=True)
        partition = partition_parameters(model, "pretrain")
    elif stage == "finetune":
        if tcfg.from_scratch:
            if init_ckpt is not None:
                raise TrainError("from_scratch and an initial checkpoint are exclusive")
            model = SynthesisModel(cfg.model, cfg.feature, "finetune", seed=tcfg.seed)
            partition = partition_parameters(model, "pretrain")  # train everything
        else:
            if init_ckpt is None:
                raise TrainError("fine-tuning requires an initial checkpoint")
            ckpt = load_checkpoint(init_ckpt)
            _check_ckpt_compat(cfg, ckpt)
            model = init_finetune_from_pretrained(ckpt, seed=tcfg.seed)
            partition = partition_parameters(model, "finetune")
    else:
        raise TrainError(f"unknown stage {tcfg.stage!r}")

    items = prepare_corpus(entries, cfg, stage, codebook, provider, lexicon)
    apply_partition(model, partition)

    named = dict(model.named_parameters())
    trainable = [(n, named[n]) for n in sorted(partition.trainable)]
    # Fresh heads may take larger steps than carried-over weights, but only
    # when the two kinds actually coexist (true fine-tuning).
    lr_scales = None
    if partition.finetuned and tcfg.scratch_lr_multiplier != 1.0:
        lr_scales = {n: tcfg.scratch_lr_multiplier for n in partition.scratch}
    optimizer = AdamW(
        trainable,
        lr=tcfg.learning_rate,
        weight_decay=tcfg.weight_decay,
        lr_scales=lr_scales,
    )

    # Reconstruction applies whenever the decoder participates in training.
    include_recon = stage == "pretrain" or tcfg.from_scratch
    adversary = adversary_opt = None
    if tcfg.adversarial and include_recon:
        adversary = ToyDiscriminator(seeded_rng(tcfg.seed, 7), dtype=model.np_dtype)
        adversary_opt = AdamW(
            list(adversary.named_parameters()),
            lr=tcfg.learning_rate,
            weight_decay=0.0,
        )

    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "model_final.ckpt"
    cb_hash = codebook_hash(codebook) if codebook is not None else None

    order: list[int] = []
    epoch = 0
    t0 = time.perf_counter()
    last_metrics: dict[str, float] = {}
    with open(metrics_path, "w", encoding="utf-8") as log:
        for it in range(1, tcfg.iterations + 1):
            batch = []
            while len(batch) < min(tcfg.batch_size, len(items)):
                if not order:
                    rng = seeded_rng(tcfg.seed, 1_000_003, epoch)
                    order = list(rng.permutation(len(items)))
                    epoch += 1
                batch.append(items[order.pop()])
            last_metrics = training_step(
                model,
                optimizer,
                batch,
                tcfg,
                it,
                partition,
                include_recon,
                adversary,
                adversary_opt,
            )
            if tcfg.log_interval > 0 and it % tcfg.log_interval == 0:
                # Metric lines carry no wall-clock values so reruns with the
                # same seed produce byte-identical logs.
                record = {"iter": it, **last_metrics, "lr": tcfg.learning_rate}
                log.write(json.dumps(record, sort_keys=True) + "\n")
            if (
                tcfg.checkpoint_interval > 0
                and it % tcfg.checkpoint_interval == 0
                and it < tcfg.iterations
            ):
                save_checkpoint(
                    model,
                    out_dir / f"model_{it:06d}.ckpt",
                    stage=stage,
                    seed=tcfg.seed,
                    codebook_hash=cb_hash,
                    optimizer=optimizer,
                    from_scratch=tcfg.from_scratch,
                )

    save_checkpoint(
        model,
        ckpt_path,
        stage=stage,
        seed=tcfg.seed,
        codebook_hash=cb_hash,
        optimizer=optimizer,
        from_scratch=tcfg.from_scratch,
    )
    return TrainResult(
        model=model,
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        decoder_calls=model.decoder.calls,
        final_metrics=last_metrics,
        elapsed_s=time.perf_counter() - t0,
    )
