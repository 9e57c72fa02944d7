"""Pseudo-phoneme discovery: k-means codebook, quantization, run merging.

Frames are clustered with seeded k-means++ plus full Lloyd updates; each
frame's cluster index is its unit, and maximal runs of equal indices merge
into one token carrying the run length as its duration.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from . import _kernels
from .features import FrameFeatures

_CHUNK = 8192  # frames per streamed assignment block
_CODEBOOK_MAGIC = "PPCB1"


@dataclass
class Codebook:
    """K centroids over frame-feature space."""

    centroids: np.ndarray  # [k, dim] float64
    k: int
    dim: int
    seed: int
    provider_id: str
    inertia: float | None = None

    def __post_init__(self) -> None:
        if self.centroids.shape != (self.k, self.dim):
            raise ValueError("centroid matrix shape does not match k/dim")


@dataclass(frozen=True)
class PseudoPhonemeSequence:
    """Merged cluster indices with per-token run lengths (frames)."""

    tokens: np.ndarray  # int64, no two adjacent equal
    durations: np.ndarray  # int64, all >= 1

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.durations):
            raise ValueError("tokens and durations must have equal length")
        if len(self.durations) and np.any(self.durations < 1):
            raise ValueError("durations must be positive")
        if len(self.tokens) > 1 and np.any(self.tokens[1:] == self.tokens[:-1]):
            raise ValueError("adjacent tokens must differ")

    def __len__(self) -> int:
        return len(self.tokens)


def _iter_frame_blocks(frames: np.ndarray) -> Iterator[np.ndarray]:
    for start in range(0, len(frames), _CHUNK):
        yield frames[start : start + _CHUNK]


def _collect_frames(feature_stream: Iterable[FrameFeatures]) -> tuple[np.ndarray, str]:
    blocks = []
    provider_id = None
    dim = None
    for feats in feature_stream:
        if dim is None:
            dim = feats.values.shape[1]
            provider_id = feats.provider_id
        elif feats.values.shape[1] != dim:
            raise ValueError(
                f"inconsistent feature dims: {feats.values.shape[1]} vs {dim}"
            )
        elif feats.provider_id != provider_id:
            raise ValueError(
                f"mixed feature providers: {feats.provider_id!r} vs {provider_id!r}"
            )
        blocks.append(np.asarray(feats.values, dtype=np.float64))
    if not blocks:
        raise ValueError("empty feature stream")
    return np.concatenate(blocks, axis=0), provider_id or "unknown"


def _kmeans_pp_init(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(frames)
    centroids = np.empty((k, frames.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = frames[first]
    # Squared distance to the nearest chosen centroid so far.
    d2 = np.square(frames - centroids[0]).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # All remaining mass is on chosen points; fall back to uniform.
            choice = int(rng.integers(n))
        else:
            choice = int(rng.choice(n, p=d2 / total))
        centroids[i] = frames[choice]
        d2 = np.minimum(d2, np.square(frames - centroids[i]).sum(axis=1))
    return centroids


def train_codebook(
    feature_stream: Iterable[FrameFeatures],
    k: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-6,
    on_iteration: Callable[[int, float], None] | None = None,
) -> Codebook:
    """Lloyd's algorithm with seeded k-means++ initialization.

    Stops when the largest centroid shift drops below ``tol`` or after
    ``max_iters`` passes. Assignment inertia is asserted non-increasing
    every iteration; empty clusters are reseeded to the point currently
    farthest from its assigned centroid. ``on_iteration`` receives
    ``(iteration, inertia)`` after each assignment pass.
    """
    frames, provider_id = _collect_frames(feature_stream)
    n, dim = frames.shape
    if n < k:
        raise ValueError(f"need at least k={k} frames, got {n}")
    if len(np.unique(frames, axis=0)) < k:
        raise ValueError(f"fewer than k={k} distinct feature frames")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(frames, k, rng)
    prev_inertia = np.inf
    inertia = np.inf
    for iteration in range(max_iters):
        sums = np.zeros((k, dim), dtype=np.float64)
        counts = np.zeros(k, dtype=np.int64)
        inertia = 0.0
        worst_d2 = -1.0
        worst_idx = 0
        for block_start, block in zip(range(0, n, _CHUNK), _iter_frame_blocks(frames)):
            ids, d2 = _kernels.nearest_centroids(block, centroids)
            np.add.at(sums, ids, block)
            counts += np.bincount(ids, minlength=k)
            inertia += float(d2.sum())
            local_worst = int(np.argmax(d2))
            if d2[local_worst] > worst_d2:
                worst_d2 = float(d2[local_worst])
                worst_idx = block_start + local_worst
        # Lloyd reassignment can only lower the objective (tiny fp slack).
        if inertia > prev_inertia * (1 + 1e-9) + 1e-9:
            raise AssertionError(
                f"k-means inertia increased: {prev_inertia} -> {inertia}"
            )
        prev_inertia = inertia
        if on_iteration is not None:
            on_iteration(iteration, inertia)

        new_centroids = centroids.copy()
        filled = counts > 0
        new_centroids[filled] = sums[filled] / counts[filled, None]
        for empty in np.flatnonzero(~filled):
            new_centroids[empty] = frames[worst_idx]
        shift = float(np.sqrt(np.square(new_centroids - centroids).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break

    return Codebook(
        centroids=centroids,
        k=k,
        dim=dim,
        seed=seed,
        provider_id=provider_id,
        inertia=inertia,
    )


def quantize(features: FrameFeatures, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid index per frame (ties go to the lowest index)."""
    values = np.asarray(features.values, dtype=np.float64)
    if values.shape[1] != codebook.dim:
        raise ValueError(
            f"feature dim {values.shape[1]} != codebook dim {codebook.dim}"
        )
    ids, _ = _kernels.nearest_centroids(values, codebook.centroids)
    return ids


def merge_runs(ids: np.ndarray) -> PseudoPhonemeSequence:
    """Collapse maximal runs of equal indices into (token, run length)."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        empty = np.empty(0, dtype=np.int64)
        return PseudoPhonemeSequence(tokens=empty, durations=empty.copy())
    boundaries = np.flatnonzero(np.diff(ids) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(ids)]))
    return PseudoPhonemeSequence(tokens=ids[starts], durations=ends - starts)


def expand_runs(seq: PseudoPhonemeSequence) -> np.ndarray:
    """Inverse of merge_runs: repeat each token by its duration."""
    return np.repeat(seq.tokens, seq.durations)


# ---------------------------------------------------------------------------
# Codebook serialization: a text header line then one line per centroid.
# ---------------------------------------------------------------------------


def save_codebook(path: str | Path, codebook: Codebook) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"{_CODEBOOK_MAGIC} k={codebook.k} dim={codebook.dim} "
            f"seed={codebook.seed} provider={codebook.provider_id}\n"
        )
        for row in codebook.centroids:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_codebook(path: str | Path) -> Codebook:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if not header or header[0] != _CODEBOOK_MAGIC:
            raise ValueError(f"{path}: not a codebook file")
        fields = dict(part.split("=", 1) for part in header[1:])
        k, dim, seed = int(fields["k"]), int(fields["dim"]), int(fields["seed"])
        rows = [
            np.array(line.split(), dtype=np.float64) for line in fh if line.strip()
        ]
    if len(rows) != k:
        raise ValueError(f"{path}: expected {k} centroid rows, found {len(rows)}")
    centroids = np.vstack(rows)
    if centroids.shape[1] != dim:
        raise ValueError(f"{path}: centroid dim {centroids.shape[1]} != header {dim}")
    return Codebook(
        centroids=centroids, k=k, dim=dim, seed=seed, provider_id=fields["provider"]
    )


def codebook_hash(codebook: Codebook) -> str:
    """SHA-256 over the canonical serialized form."""
    digest = hashlib.sha256()
    digest.update(
        f"{_CODEBOOK_MAGIC} k={codebook.k} dim={codebook.dim} "
        f"seed={codebook.seed} provider={codebook.provider_id}\n".encode()
    )
    digest.update(np.ascontiguousarray(codebook.centroids, dtype="<f8").tobytes())
    return digest.hexdigest()
