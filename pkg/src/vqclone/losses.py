"""Training objectives for every stage, with per-term reporting.

Every norm reduces as a mean over frames and latent/acoustic dimensions, so
hyperparameters keep their meaning across sequence lengths and sizes.  Every objective returns a :class:`LossBreakdown` whose
``loss`` tensor is the differentiable total.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codebook import commitment_loss, vq_loss
from .model import Batch, LatentSequence, ModelState, sts_stack, stt_stack, tts_stack, ttt_stack, vocode

TERMS = (
    "loss_tts",
    "loss_sts",
    "loss_stt",
    "loss_ttt",
    "loss_tie",
    "loss_vq_t",
    "loss_vq_s",
    "loss_c_t",
    "loss_c_s",
    "loss_voc",
)


@dataclass
class HyperParams:
    alpha_sts: float = 0.1
    alpha_stt: float = 0.1
    beta: float = 0.25
    gamma: float = 0.01
    delta_vq: float = 0.25
    delta_c: float = 1.0

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"hyperparameter {name} must be finite and >= 0, got {value}")


@dataclass
class LossBreakdown:
    """Named loss terms, the weight each carries in ``total``, and the graph
    node for the total."""

    terms: dict[str, float]
    weights: dict[str, float]
    total: float
    loss: Tensor = field(repr=False)

    def reconstruct(self) -> float:
        return float(sum(w * self.terms[k] for k, w in self.weights.items()))

    def detached(self) -> "LossBreakdown":
        """Copy without the graph behind ``loss`` (keeps histories small)."""
        return LossBreakdown(dict(self.terms), dict(self.weights), self.total, ad.Tensor(self.total))

    def __getitem__(self, key: str) -> float:
        return self.total if key == "total" else self.terms[key]


def _breakdown(parts: dict[str, Tensor], weights: dict[str, float]) -> LossBreakdown:
    total = None
    for name, w in weights.items():
        term = parts[name] * w
        total = term if total is None else total + term
    terms = {k: 0.0 for k in TERMS}
    terms.update({k: float(v.data) for k, v in parts.items()})
    return LossBreakdown(terms, dict(weights), float(total.data), total)


def _require_lengths(batch: Batch, *, need_x: bool = False, need_o: bool = False) -> None:
    n = batch.n_frames
    if batch.y is None or len(batch.y) != n:
        raise ValueError("batch acoustics do not match utterance lengths")
    if need_x and (batch.x is None or len(batch.x) != n):
        raise ValueError("batch transcripts missing or misaligned with acoustics")
    if need_o and (batch.o is None or len(batch.o) != n):
        raise ValueError("batch waveforms missing or misaligned with acoustics")


def _vq_terms(lat: LatentSequence, codes, m: ModelState) -> tuple[Tensor, Tensor]:
    if m.mode != "vq":
        zero = ad.Tensor(0.0)
        return zero, zero
    return vq_loss(lat.z, codes), commitment_loss(lat.z, codes)


def tie_loss(z_text: LatentSequence, z_speech: LatentSequence, mode: str) -> Tensor:
    """Cross-modal tying term.

    vq: mse(sg(z_text), z_speech), gradient into the speech side only
    standard: mse(z_text, z_speech), both sides
    vae: KL(speech posterior || sg(text posterior)), diagonal Gaussians
    """
    if len(z_text) != len(z_speech):
        raise ValueError(f"tie_loss: length mismatch {len(z_text)} vs {len(z_speech)}")
    if mode == "vq":
        return ad.mse(ad.stop_gradient(z_text.z), z_speech.z)
    if mode == "standard":
        return ad.mse(z_text.z, z_speech.z)
    if mode != "vae":
        raise ValueError(f"unknown mode {mode!r}")
    mu_t = ad.stop_gradient(z_text.mu)
    ls_t = ad.stop_gradient(z_text.log_sigma)
    mu_s, ls_s = z_speech.mu, z_speech.log_sigma
    inv_var_t = np.exp(-2.0 * ls_t.data)
    kl = (
        (ls_t - ls_s)
        + ad.exp((ls_s - ls_t) * 2.0) * 0.5
        + ad.square(mu_s - mu_t) * (0.5 * inv_var_t)
        - 0.5
    )
    return ad.mean(kl)


def tts_stack_loss(batch: Batch, m: ModelState, h: HyperParams, rng=None) -> LossBreakdown:
    _require_lengths(batch, need_x=True)
    out = tts_stack(batch, m, rng)
    vq_t, c_t = _vq_terms(out.latent, out.codes, m)
    parts = {"loss_tts": ad.mae(out.output, batch.y), "loss_vq_t": vq_t, "loss_c_t": c_t}
    return _breakdown(parts, {"loss_tts": 1.0, "loss_vq_t": h.delta_vq, "loss_c_t": h.delta_c})


def sts_stack_loss(batch: Batch, m: ModelState, h: HyperParams, rng=None) -> LossBreakdown:
    _require_lengths(batch)
    out = sts_stack(batch, m, rng)
    vq_s, c_s = _vq_terms(out.latent, out.codes, m)
    parts = {"loss_sts": ad.mae(out.output, batch.y), "loss_vq_s": vq_s, "loss_c_s": c_s}
    return _breakdown(parts, {"loss_sts": 1.0, "loss_vq_s": h.delta_vq, "loss_c_s": h.delta_c})


def joint_train_loss(batch: Batch, m: ModelState, h: HyperParams, rng=None) -> LossBreakdown:
    """Initial supervised objective.

    total = [tts + d_vq*vq_t + d_c*c_t] + a_sts*[sts + d_vq*vq_s + d_c*c_s]
            + a_stt*stt + beta*tie

    ``loss_ttt`` is reported but carries no weight.
    """
    _require_lengths(batch, need_x=True)
    tts = tts_stack(batch, m, rng)
    sts = sts_stack(batch, m, rng)
    vq_t, c_t = _vq_terms(tts.latent, tts.codes, m)
    vq_s, c_s = _vq_terms(sts.latent, sts.codes, m)
    stt = stt_stack(batch, m, latent=sts.latent)
    ttt = ttt_stack(batch, m, latent=tts.latent)
    parts = {
        "loss_tts": ad.mae(tts.output, batch.y),
        "loss_vq_t": vq_t,
        "loss_c_t": c_t,
        "loss_sts": ad.mae(sts.output, batch.y),
        "loss_vq_s": vq_s,
        "loss_c_s": c_s,
        "loss_stt": ad.cross_entropy(stt.output, batch.x),
        "loss_ttt": ad.Tensor(ad.cross_entropy(ttt.output, batch.x).data),
        "loss_tie": tie_loss(tts.latent, sts.latent, m.mode),
    }
    weights = {
        "loss_tts": 1.0,
        "loss_vq_t": h.delta_vq,
        "loss_c_t": h.delta_c,
        "loss_sts": h.alpha_sts,
        "loss_vq_s": h.alpha_sts * h.delta_vq,
        "loss_c_s": h.alpha_sts * h.delta_c,
        "loss_stt": h.alpha_stt,
        "loss_tie": h.beta,
    }
    return _breakdown(parts, weights)


def vocoder_train_loss(batch: Batch, m: ModelState, h: HyperParams | None = None, rng=None) -> LossBreakdown:
    """MAE between the vocoded ground-truth acoustics and the waveform."""
    _require_lengths(batch, need_o=True)
    speakers = None if m.sd_removed else batch.speakers
    pred = vocode(batch.y, m, speakers)
    return _breakdown({"loss_voc": ad.mae(pred, batch.o)}, {"loss_voc": 1.0})


def _require_sd_removed(m: ModelState) -> None:
    if not m.sd_removed:
        raise ValueError("adaptation losses need SD components removed first")


def adapt_loss(batch: Batch, m: ModelState, h: HyperParams | None = None, rng=None) -> LossBreakdown:
    """STS reconstruction only; encoder and codebook are immutable here, so the
    codebook and commitment terms are left out."""
    _require_sd_removed(m)
    _require_lengths(batch)
    out = sts_stack(batch, m, rng)
    return _breakdown({"loss_sts": ad.mae(out.output, batch.y)}, {"loss_sts": 1.0})


def vocoder_adapt_loss(batch: Batch, m: ModelState, h: HyperParams | None = None, rng=None) -> LossBreakdown:
    _require_sd_removed(m)
    return vocoder_train_loss(batch, m)


def weld_loss(batch: Batch, m: ModelState, h: HyperParams, rng=None) -> LossBreakdown:
    """loss_sts + gamma * loss_voc.  The vocoder term consumes ground-truth
    acoustics; the decoder term its own prediction."""
    _require_sd_removed(m)
    _require_lengths(batch, need_o=True)
    out = sts_stack(batch, m, rng)
    parts = {
        "loss_sts": ad.mae(out.output, batch.y),
        "loss_voc": ad.mae(vocode(batch.y, m), batch.o),
    }
    return _breakdown(parts, {"loss_sts": 1.0, "loss_voc": h.gamma})


class LossLog:
    """Appends one CSV row per optimizer step."""

    columns = ("step", "stage", *TERMS, "total")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def append(self, step: int, stage: str, br: LossBreakdown) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([step, stage, *(repr(br.terms[t]) for t in TERMS), repr(br.total)])
