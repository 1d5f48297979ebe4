"""Quantitative analyses: code overlap, bit rate, speaker and content proxies."""

from __future__ import annotations

import csv
import math
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from .codebook import CodeSequence, usage_stats
from .corpus import SpeakerSpec
from .model import ModelState, bottleneck, encode_speech, encode_text, text_logits
from .pipeline import infer_tts, infer_vc


def _indices(seq) -> np.ndarray:
    return np.asarray(seq.indices if isinstance(seq, CodeSequence) else seq, dtype=np.int64)


def code_overlap(a, b) -> float:
    """Fraction of frames whose code ids agree."""
    a, b = _indices(a), _indices(b)
    if a.shape != b.shape:
        raise ValueError(f"code_overlap: length mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 1.0
    return float((a == b).mean())


def fixed_bits_per_frame(k: int) -> int:
    if k < 2:
        raise ValueError(f"bit rate needs K >= 2, got {k}")
    return math.ceil(math.log2(k))


def bit_rate(k: int, frames_per_second: float, seqs: Sequence | None = None) -> dict[str, float]:
    """Fixed-width and empirical-entropy bit rates of a K-code stream.

    The entropy rate is ``frames_per_second * H(code usage)``; without
    sequences it is reported at its maximum, ``log2 K`` bits per frame.
    """
    bits = fixed_bits_per_frame(k)
    if seqs is None:
        entropy = math.log2(k)
    else:
        entropy = usage_stats(seqs, k).entropy_bits
    return {
        "bits_per_frame": float(bits),
        "fixed_bps": frames_per_second * bits,
        "entropy_bits_per_frame": entropy,
        "entropy_bps": frames_per_second * entropy,
    }


def utterance_stats(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    return y.mean(axis=0), y.var(axis=0)


def speaker_distance(y: np.ndarray, spec: SpeakerSpec, x: np.ndarray | None = None) -> float:
    """Distance between the mean/variance of ``y`` and the speaker's analytic
    statistics (for content ``x`` when given)."""
    mean, var = utterance_stats(y)
    ref_mean, ref_var = spec.expected_stats(x)
    return float(np.sqrt(((mean - ref_mean) ** 2).sum() + ((var - ref_var) ** 2).sum()))


def recognize(y: np.ndarray, m: ModelState) -> np.ndarray:
    """Frame-wise symbol decisions of the STT stack (speech encoder mean + text decoder)."""
    lat = encode_speech(y, m)
    speakers = None if m.sd_removed else 0
    return text_logits(lat.z, m, speakers).data.argmax(axis=1)


def content_error(pred, reference: np.ndarray, m: ModelState | None = None) -> float:
    """Frame-level symbol error rate.

    ``pred`` is either a 1-D array of symbol ids or a (T, A) acoustic
    sequence, which is first recognised with the STT stack of ``m``.
    """
    pred = np.asarray(pred)
    reference = np.asarray(reference, dtype=np.int64)
    if pred.ndim == 2:
        if m is None:
            raise ValueError("acoustic input needs a model to recognise it")
        pred = recognize(pred, m)
    if len(pred) != len(reference):
        raise ValueError(f"content_error: length mismatch {len(pred)} vs {len(reference)}")
    if len(reference) == 0:
        return 0.0
    return float((pred.astype(np.int64) != reference).mean())


# --------------------------------------------------------------- exports


def write_overlap_csv(path: str | Path, rows: Sequence[tuple[str, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "frames", "overlap"])
        for uid, n, ov in rows:
            w.writerow([uid, n, repr(ov)])


def write_histogram_csv(path: str | Path, counts: np.ndarray) -> None:
    total = int(counts.sum())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["code_id", "count", "probability"])
        for k, c in enumerate(counts.tolist()):
            w.writerow([k, c, repr(c / total if total else 0.0)])


def codemap_svg(text_codes, speech_codes, k: int, cell: int = 14, title: str = "") -> str:
    """Two-row raster: text-encoded codes (top) over speech-encoded codes
    (bottom).  Cells are shaded by code id; frames where both agree are black."""
    a, b = _indices(text_codes), _indices(speech_codes)
    if a.shape != b.shape:
        raise ValueError("codemap needs equal-length sequences")
    n = len(a)
    left, top = 70, 28
    width = left + n * cell + 10
    height = top + 2 * cell + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="10">',
        f'<text x="4" y="14">{title} overlap={code_overlap(a, b):.4f}</text>',
        f'<text x="4" y="{top + cell - 3}">text</text>',
        f'<text x="4" y="{top + 2 * cell - 3}">speech</text>',
    ]
    for row, (codes, hue) in enumerate(((a, 210), (b, 30))):
        for t, c in enumerate(codes.tolist()):
            if a[t] == b[t]:
                fill = "#000000"
            else:
                light = 35 + int(50 * c / max(k - 1, 1))
                fill = f"hsl({hue},80%,{light}%)"
            x = left + t * cell
            y = top + row * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}"><title>{c}</title></rect>')
    parts.append(f'<text x="{left}" y="{top + 2 * cell + 14}">frames 0..{max(n - 1, 0)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


# --------------------------------------------------------------- reports


def overlap_rows(utterances, m: ModelState) -> list[tuple[str, int, float]]:
    """(utterance id, frames, overlap) of text- vs speech-encoded codes."""
    if m.mode != "vq":
        raise ValueError("code overlap needs a vq-mode model")
    rows = []
    for u in utterances:
        _, a = bottleneck(encode_text(u.x, m), m)
        _, b = bottleneck(encode_speech(u.y, m), m)
        rows.append((u.uid, len(u.x), code_overlap(a, b)))
    return rows


def cloning_report(utterances, m: ModelState, target: SpeakerSpec, source_of) -> dict[str, float]:
    """Speaker-distance win rate and content errors of a cloned model.

    ``source_of(u)`` returns the SpeakerSpec that uttered ``u``.  A win is a
    VC output closer to the target's statistics than to the source's.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        wins, vc_err, tts_err = [], [], []
        for u in utterances:
            vc = infer_vc(u.y, m)
            tts = infer_tts(u.x, m)
            d_tgt = speaker_distance(vc.acoustic, target, u.x)
            d_src = speaker_distance(vc.acoustic, source_of(u), u.x)
            wins.append(d_tgt < d_src)
            vc_err.append(content_error(vc.acoustic, u.x, m))
            tts_err.append(content_error(tts.acoustic, u.x, m))
    return {
        "win_rate": float(np.mean(wins)),
        "vc_content_error": float(np.mean(vc_err)),
        "tts_content_error": float(np.mean(tts_err)),
    }
