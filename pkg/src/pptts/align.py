"""Monotonic alignment between token-level priors and latent frames.

The grid scores every (token, frame) pair by the diagonal-Gaussian
log-likelihood of the frame under the token's prior statistics; a dynamic
program then finds the best monotonic, complete, surjective alignment.
Used identically for phoneme and pseudo-phoneme priors.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

_LOG_2PI = float(np.log(2.0 * np.pi))


def likelihood_grid(
    mean: np.ndarray, std: np.ndarray, frames: np.ndarray
) -> np.ndarray:
    """Per-(token, frame) Gaussian log-likelihood summed over channels.

    Args:
        mean, std: [n_tokens, channels] prior statistics, std > 0.
        frames: [n_frames, channels] latent frames.

    Returns:
        [n_tokens, n_frames] float64 grid.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    frames = np.asarray(frames, dtype=np.float64)
    if mean.shape != std.shape:
        raise ValueError("mean/std shape mismatch")
    if mean.shape[1] != frames.shape[1]:
        raise ValueError(
            f"channel mismatch: prior {mean.shape[1]} vs frames {frames.shape[1]}"
        )
    if np.any(std <= 0):
        raise ValueError("std must be strictly positive")
    c = mean.shape[1]
    inv_var = 1.0 / np.square(std)  # [N, C]
    # sum_c log N(x; mu, sigma) expanded into x^2, x, const terms -> 3 GEMMs.
    const = -0.5 * c * _LOG_2PI - np.log(std).sum(axis=1)
    const -= 0.5 * np.square(mean / std).sum(axis=1)
    quad = -0.5 * (np.square(frames) @ inv_var.T)  # [T, N]
    lin = frames @ (mean * inv_var).T  # [T, N]
    return (quad + lin).T + const[:, None]


def monotonic_alignment_search(grid: np.ndarray) -> np.ndarray:
    """Maximum-likelihood monotonic complete alignment.

    Returns a per-frame token-index array; requires n_tokens <= n_frames.
    Ties in the DP prefer staying on the current token.
    """
    return _kernels.mas_assignment(grid)


def alignment_score(grid: np.ndarray, assignment: np.ndarray) -> float:
    """Total grid log-likelihood along an assignment path."""
    return float(grid[assignment, np.arange(grid.shape[1])].sum())


def alignment_to_durations(assignment: np.ndarray, n_tokens: int) -> np.ndarray:
    """Frames per token; sums to n_frames, every token gets >= 1."""
    durations = np.bincount(assignment, minlength=n_tokens)
    if len(durations) != n_tokens or np.any(durations < 1):
        raise ValueError("assignment does not cover every token")
    return durations.astype(np.int64)


def expand_prior(
    mean: np.ndarray, std: np.ndarray, durations: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Repeat token statistics by duration to frame level.

    Zero durations drop their token (inference path); total duration
    must be positive.
    """
    durations = np.asarray(durations, dtype=np.int64)
    if np.any(durations < 0):
        raise ValueError("durations must be >= 0")
    if durations.sum() == 0:
        raise ValueError("total duration is zero")
    return np.repeat(mean, durations, axis=0), np.repeat(std, durations, axis=0)


def durations_to_assignment(durations: np.ndarray) -> np.ndarray:
    """Per-frame token indices realizing the given durations."""
    durations = np.asarray(durations, dtype=np.int64)
    return np.repeat(np.arange(len(durations)), durations)
