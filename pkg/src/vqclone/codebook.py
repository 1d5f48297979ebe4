"""Codebook quantization, the two VQ losses, and code usage statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# candidates within this relative gap of the expanded-form minimum are re-scored exactly
_TIE_RTOL = 1e-9


def init_codebook(k: int, d: int, rng: np.random.Generator) -> np.ndarray:
    if k < 1 or d < 1:
        raise ValueError(f"codebook needs K >= 1 and D >= 1, got K={k}, D={d}")
    return rng.uniform(-0.5, 0.5, size=(k, d))


@dataclass
class CodeSequence:
    """Per-frame code ids and the quantized vectors they select.

    ``vectors`` is a tensor so the codebook gradient of the VQ loss can flow
    through the row gather.
    """

    indices: np.ndarray
    vectors: Tensor

    def __len__(self) -> int:
        return len(self.indices)

    def to_csv(self, path: str | Path) -> None:
        write_codes_csv(path, self.indices)


def nearest_codes(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the nearest entry (squared Euclidean) per row, lowest index on ties."""
    z = np.asarray(z, dtype=np.float64)
    entries = np.asarray(entries, dtype=np.float64)
    if z.ndim != 2 or entries.ndim != 2:
        raise ValueError("nearest_codes expects 2-D latents and codebook")
    if z.shape[1] != entries.shape[1]:
        raise ValueError(f"latent dim {z.shape[1]} does not match codebook dim {entries.shape[1]}")
    if len(z) == 0:
        return np.zeros(0, dtype=np.int64)
    # fast expanded form, then exact rescoring of near-minimal candidates
    approx = (
        (z * z).sum(axis=1, keepdims=True)
        - 2.0 * (z @ entries.T)
        + (entries * entries).sum(axis=1)[None, :]
    )
    best = approx.min(axis=1, keepdims=True)
    slack = _TIE_RTOL * np.maximum(np.abs(best), 1.0) + 1e-12
    candidates = approx <= best + slack
    out = approx.argmin(axis=1)
    for t in np.flatnonzero(candidates.sum(axis=1) > 1):
        cand = np.flatnonzero(candidates[t])
        diff = entries[cand] - z[t]
        exact = (diff * diff).sum(axis=1)
        out[t] = cand[int(np.argmin(exact))]
    return out


def quantize(z: Tensor, codebook: Tensor) -> CodeSequence:
    """Snap every latent frame to its nearest codebook entry."""
    if z.shape[1:] != codebook.shape[1:]:
        raise ValueError(f"latent dim {z.shape[1:]} does not match codebook dim {codebook.shape[1:]}")
    indices = ad.discrete_choice(lambda: nearest_codes(z.data, codebook.data))
    return CodeSequence(indices=np.asarray(indices, dtype=np.int64), vectors=ad.gather_rows(codebook, indices))


def _as_vectors(q) -> Tensor:
    return q.vectors if isinstance(q, CodeSequence) else ad.as_tensor(q)


def _sq_error(a: Tensor, b: Tensor, reduction: str) -> Tensor:
    err = ad.mse(a, b)
    if reduction == "mean":
        return err
    if reduction == "frame":
        # mean over frames of the full squared distance
        return err * float(a.shape[-1]) if len(a.shape) > 1 else err
    raise ValueError(f"unknown reduction {reduction!r}")


def vq_loss(z: Tensor, q, reduction: str = "mean") -> Tensor:
    """Squared error between stop_gradient(z) and q.

    ``reduction="mean"`` averages over frames and dims (training default);
    ``"frame"`` averages the squared Euclidean distance over frames only.
    """
    return _sq_error(ad.stop_gradient(ad.as_tensor(z)), _as_vectors(q), reduction)


def commitment_loss(z: Tensor, q, reduction: str = "mean") -> Tensor:
    """Squared error between z and stop_gradient(q); reductions as in :func:`vq_loss`."""
    return _sq_error(ad.as_tensor(z), ad.stop_gradient(_as_vectors(q)), reduction)


@dataclass
class UtilizationReport:
    counts: np.ndarray
    used_fraction: float
    perplexity: float
    entropy_bits: float
    total_frames: int = field(default=0)

    @property
    def probabilities(self) -> np.ndarray:
        if self.total_frames == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts / self.total_frames


def usage_stats(seqs: Iterable, k: int) -> UtilizationReport:
    """Histogram, used fraction and perplexity of code usage over ``seqs``.

    ``seqs`` may hold CodeSequence objects or plain index arrays.
    """
    counts = np.zeros(k, dtype=np.int64)
    for s in seqs:
        idx = np.asarray(s.indices if isinstance(s, CodeSequence) else s, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= k):
            raise ValueError(f"code index out of range [0, {k})")
        counts += np.bincount(idx, minlength=k)
    total = int(counts.sum())
    if total == 0:
        return UtilizationReport(counts, 0.0, 1.0, 0.0, 0)
    p = counts[counts > 0] / total
    entropy = float(-(p * np.log(p)).sum())
    return UtilizationReport(
        counts=counts,
        used_fraction=float((counts > 0).sum()) / k,
        perplexity=math.exp(entropy),
        entropy_bits=entropy / math.log(2.0),
        total_frames=total,
    )


def write_codes_csv(path: str | Path, indices: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "code_id"])
        for t, k in enumerate(np.asarray(indices).tolist()):
            w.writerow([t, k])


def read_codes_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([int(r["code_id"]) for r in rows], dtype=np.int64)
