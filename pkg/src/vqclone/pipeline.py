"""Stage machine: initial training, vocoder training, adaptation, welding, inference.

Each stage sets the model's freeze flags, runs full-batch gradient descent on
its objective, and appends its name to ``ModelState.stages`` so checkpoints
carry their provenance.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .codebook import CodeSequence
from .corpus import TRAIN, AdaptationSet, Corpus
from .losses import (
    HyperParams,
    LossBreakdown,
    LossLog,
    adapt_loss,
    joint_train_loss,
    vocoder_adapt_loss,
    vocoder_train_loss,
    weld_loss,
)
from .model import (
    MODULES,
    Batch,
    ModelConfig,
    ModelState,
    bottleneck,
    decode_speech,
    encode_speech,
    encode_text,
    init_model,
    remove_sd,
    vocode,
)

log = logging.getLogger(__name__)

STAGE_IDS = {"train": 1, "train_voc": 2, "adapt": 3, "adapt_voc": 4, "weld": 5}


def trainable_modules(stage: str, mode: str = "vq") -> set[str]:
    """Modules a stage updates; everything else is frozen for its duration."""
    table = {
        "train": {"tenc", "senc", "sdec", "tdec"},
        "train_voc": {"voc"},
        "adapt": {"sdec"},
        "adapt_voc": {"voc"},
        "weld": {"sdec", "voc"},
    }
    if stage not in table:
        raise StageError(f"unknown stage {stage!r}")
    out = set(table[stage])
    if stage == "train" and mode == "vq":
        out.add("codebook")
    return out


@dataclass
class TrainConfig:
    """Step sizes: ``initial_lr`` for the from-scratch stages (joint training,
    vocoder initialisation), ``lr`` for adaptation and welding."""

    lr: float = 0.05
    initial_lr: float = 0.2
    clip: float = 5.0
    initial_steps: int = 500
    vocoder_steps: int = 200
    adapt_steps: int = 100
    vocoder_adapt_steps: int = 100
    weld_steps: int = 50
    seed: int = 0


class StageError(RuntimeError):
    """A stage was invoked out of order or with the wrong kind of data."""


class TrainingAborted(RuntimeError):
    """A non-finite value appeared; ``last_good`` is the state before that step."""

    def __init__(self, message: str, last_good: ModelState, step: int):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


def gd_step(m: ModelState, grads: dict[str, np.ndarray], lr: float, clip: float) -> ModelState:
    """Plain gradient descent with global-norm clipping.

    Arrays of parameters without a gradient are carried over untouched, so
    frozen modules stay bit-identical.
    """
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    scale = lr * (min(1.0, clip / norm) if norm > 0 else 1.0)
    params = dict(m.params)
    for name, g in grads.items():
        params[name] = m.params[name] - scale * g
    return ModelState(m.config, params, set(m.frozen), m.sd_removed, list(m.stages))


LossFn = Callable[..., LossBreakdown]


def evaluate(loss_fn: LossFn, batch: Batch, m: ModelState, h: HyperParams, rng=None) -> tuple[LossBreakdown, dict]:
    """One forward + backward pass; gradients for the unfrozen parameters."""
    with ad.Graph() as g:
        br = loss_fn(batch, m, h, rng)
    return br, g.backward(br.loss)


def run_stage(
    m: ModelState,
    stage: str,
    loss_fn: LossFn,
    batch: Batch,
    h: HyperParams,
    steps: int,
    tc: TrainConfig,
    trainable: set[str],
    loss_log: LossLog | None = None,
    lr: float | None = None,
) -> tuple[ModelState, list[LossBreakdown]]:
    lr = tc.lr if lr is None else lr
    m = ModelState(m.config, dict(m.params), set(MODULES) - trainable, m.sd_removed, list(m.stages))
    history: list[LossBreakdown] = []
    stage_id = STAGE_IDS.get(stage, 0)
    for step in range(steps):
        rng = np.random.default_rng([tc.seed, stage_id, step]) if m.mode == "vae" else None
        try:
            # overflow surfaces as NonFiniteError from the finiteness checks
            with np.errstate(over="ignore", invalid="ignore"):
                br, grads = evaluate(loss_fn, batch, m, h, rng)
        except ad.NonFiniteError as exc:
            raise TrainingAborted(f"{stage} step {step}: {exc}", m, step) from exc
        br = br.detached()
        history.append(br)
        if loss_log is not None:
            loss_log.append(step, stage, br)
        m = gd_step(m, grads, lr, tc.clip)
        if step % 100 == 0:
            log.debug("%s step %d total %.5f", stage, step, br.total)
    m.stages.append(stage)
    return m, history


def train_batch(corpus: Corpus) -> Batch:
    return Batch.from_utterances(corpus.split(TRAIN))


def model_config_for(corpus: Corpus, **overrides) -> ModelConfig:
    cfg = corpus.config
    base = dict(
        vocab_size=cfg.vocab_size,
        acoustic_dim=cfg.acoustic_dim,
        n_speakers=cfg.n_speakers,
        wave_rate=cfg.wave_rate,
    )
    base.update(overrides)
    return ModelConfig(**base)


def train_initial(
    corpus: Corpus,
    tc: TrainConfig | None = None,
    h: HyperParams | None = None,
    model_config: ModelConfig | None = None,
    loss_log: LossLog | None = None,
) -> tuple[ModelState, list[LossBreakdown]]:
    """Joint supervised training of encoders, decoders and codebook."""
    tc = tc or TrainConfig()
    h = h or HyperParams()
    h.validate()
    m = init_model(model_config or model_config_for(corpus, seed=tc.seed))
    trainable = trainable_modules("train", m.mode)
    return run_stage(m, "train", joint_train_loss, train_batch(corpus), h, tc.initial_steps, tc, trainable, loss_log, tc.initial_lr)


def train_vocoder(
    corpus: Corpus, m: ModelState, tc: TrainConfig | None = None, loss_log: LossLog | None = None
) -> tuple[ModelState, list[LossBreakdown]]:
    tc = tc or TrainConfig()
    if m.sd_removed:
        raise StageError("vocoder initialisation needs SD components")
    return run_stage(
        m, "train_voc", vocoder_train_loss, train_batch(corpus), HyperParams(), tc.vocoder_steps, tc, trainable_modules("train_voc"), loss_log, tc.initial_lr
    )


def _adaptation_batch(data) -> Batch:
    if isinstance(data, Batch):
        if data.x is not None:
            raise StageError("adaptation refuses transcribed data")
        return data
    if not isinstance(data, AdaptationSet):
        raise StageError("adaptation expects an untranscribed AdaptationSet")
    return Batch.untranscribed(data.y, data.o)


def _ensure_sd_removed(m: ModelState) -> ModelState:
    return m if m.sd_removed else remove_sd(m)


def adapt(
    m: ModelState, data, tc: TrainConfig | None = None, loss_log: LossLog | None = None
) -> tuple[ModelState, list[LossBreakdown]]:
    """Step 1: remove SD components, then fine-tune the speech decoder alone."""
    tc = tc or TrainConfig()
    if "train" not in m.stages:
        raise StageError("adapt needs an initially trained model")
    batch = _adaptation_batch(data)
    m = _ensure_sd_removed(m)
    return run_stage(m, "adapt", adapt_loss, batch, HyperParams(), tc.adapt_steps, tc, trainable_modules("adapt"), loss_log)


def adapt_vocoder(
    m: ModelState, data, tc: TrainConfig | None = None, loss_log: LossLog | None = None
) -> tuple[ModelState, list[LossBreakdown]]:
    """Sibling pass of step 1: fine-tune the SD-free vocoder alone."""
    tc = tc or TrainConfig()
    batch = _adaptation_batch(data)
    if batch.o is None:
        raise StageError("vocoder adaptation needs waveforms")
    m = _ensure_sd_removed(m)
    return run_stage(m, "adapt_voc", vocoder_adapt_loss, batch, HyperParams(), tc.vocoder_adapt_steps, tc, trainable_modules("adapt_voc"), loss_log)


def weld(
    m: ModelState,
    data,
    tc: TrainConfig | None = None,
    h: HyperParams | None = None,
    loss_log: LossLog | None = None,
) -> tuple[ModelState, list[LossBreakdown]]:
    """Step 2: jointly tune speech decoder and vocoder."""
    tc = tc or TrainConfig()
    h = h or HyperParams()
    if "adapt" not in m.stages:
        raise StageError("weld must follow adapt")
    batch = _adaptation_batch(data)
    if batch.o is None:
        raise StageError("welding needs waveforms")
    return run_stage(m, "weld", weld_loss, batch, h, tc.weld_steps, tc, trainable_modules("weld"), loss_log)


@dataclass
class InferenceResult:
    acoustic: np.ndarray
    wave: np.ndarray
    codes: CodeSequence | None
    dec_in: np.ndarray


def _speaker_arg(m: ModelState, speaker):
    if m.sd_removed:
        if speaker is not None:
            raise ValueError("speaker id supplied after SD components were removed")
        return None
    if speaker is None:
        raise ValueError("model still has SD components; pass a training speaker id")
    return speaker


def _finish(lat, m: ModelState, speaker) -> InferenceResult:
    if "weld" not in m.stages:
        warnings.warn("inference on a model that has not been welded", stacklevel=3)
    dec_in, codes = bottleneck(lat, m)
    spk = _speaker_arg(m, speaker)
    y_hat = decode_speech(dec_in, m, spk)
    wave = vocode(y_hat, m, spk)
    return InferenceResult(y_hat.data, wave.data.reshape(-1), codes, dec_in.data)


def infer_tts(x: np.ndarray, m: ModelState, speaker: int | None = None) -> InferenceResult:
    """TEnc -> codebook -> SDec -> Voc.  vae mode decodes from the latent mean."""
    return _finish(encode_text(x, m), m, speaker)


def infer_vc(y_source: np.ndarray, m: ModelState, speaker: int | None = None) -> InferenceResult:
    """SEnc -> codebook -> SDec -> Voc; the source speaker needs no id."""
    return _finish(encode_speech(y_source, m), m, speaker)


def clone(
    m: ModelState,
    data: AdaptationSet,
    tc: TrainConfig | None = None,
    h: HyperParams | None = None,
    loss_log: LossLog | None = None,
) -> ModelState:
    """Decoder adaptation, vocoder adaptation and welding, in that order."""
    m, _ = adapt(m, data, tc, loss_log)
    m, _ = adapt_vocoder(m, data, tc, loss_log)
    m, _ = weld(m, data, tc, h, loss_log)
    return m
