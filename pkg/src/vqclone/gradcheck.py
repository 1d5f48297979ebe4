"""Central finite-difference check of analytic gradients.

Stop-gradient values and codebook assignments are pinned at the base point
(:class:`~vqclone.autodiff.FrozenReplay`), so the finite differences measure
the surrogate objective whose exact gradient backprop is meant to return.
Without pinning, the straight-through path would always disagree: the true
loss is piecewise constant in the encoder output.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .corpus import TARGET, TRAIN, Corpus
from .losses import HyperParams, LossBreakdown, adapt_loss, joint_train_loss, vocoder_train_loss, weld_loss
from .model import Batch, ModelState, module_of, remove_sd
from .pipeline import trainable_modules


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    max_abs: dict[str, float]
    n_checked: int
    seconds: float
    analytic: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    numeric: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)))
    diff = float(np.linalg.norm(a - n))
    if not (math.isfinite(denom) and math.isfinite(diff)):
        return float("inf")
    if denom == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / denom


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (mutated in
    place, then restored bit-exactly)."""
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise ValueError("parameter array must be contiguous")
    out = np.empty(arr.size)
    for i in range(arr.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(arr.shape)


def check_loss(
    loss_fn: Callable[..., LossBreakdown],
    batch: Batch,
    m: ModelState,
    h: HyperParams | None = None,
    names: Iterable[str] | None = None,
    step: float = 1e-5,
    seed: int = 0,
    keep_arrays: bool = False,
) -> GradcheckReport:
    """Compare backprop against finite differences for ``loss_fn`` on ``batch``.

    ``names`` defaults to every trainable parameter of ``m``.
    """
    t0 = time.perf_counter()
    h = h or HyperParams()
    m = m.copy()

    def rng():
        return np.random.default_rng(seed) if m.mode == "vae" else None

    replay = ad.FrozenReplay()
    with replay, ad.Graph() as g:
        br = loss_fn(batch, m, h, rng())
    analytic = g.backward(br.loss)

    def f() -> float:
        with replay:
            value = float(loss_fn(batch, m, h, rng()).loss.data)
        if not math.isfinite(value):
            raise ad.NonFiniteError("non-finite loss during finite differencing")
        return value

    names = list(names) if names is not None else m.trainable_names()
    errors, max_abs, numeric, kept = {}, {}, {}, {}
    count = 0
    for name in names:
        a = analytic.get(name, np.zeros_like(m.params[name]))
        n = numeric_gradient(f, m.params[name], step)
        errors[name] = relative_error(a, n)
        max_abs[name] = float(np.abs(a - n).max()) if a.size else 0.0
        count += a.size
        if keep_arrays:
            kept[name] = a
            numeric[name] = n
    return GradcheckReport(errors, max_abs, count, time.perf_counter() - t0, kept, numeric)


def _shortest(utts, n: int):
    return sorted(utts, key=lambda u: (len(u.y), u.uid))[:n]


def toy_batches(corpus: Corpus, n: int = 2) -> tuple[Batch, Batch]:
    """The ``n`` shortest transcribed training utterances, and the ``n``
    shortest target-speaker utterances with transcripts dropped."""
    train = Batch.from_utterances(_shortest(corpus.split(TRAIN), n))
    target = [u for u in corpus.split(TARGET) if u.speaker == corpus.split(TARGET)[0].speaker]
    target = _shortest(target, n)
    return train, Batch.untranscribed([u.y for u in target], [u.o for u in target])


def _names(m: ModelState, stage: str) -> list[str]:
    keep = trainable_modules(stage, m.mode)
    return [n for n in m.params if module_of(n) in keep]


def check_all_losses(
    corpus: Corpus, m: ModelState, h: HyperParams | None = None, step: float = 1e-5
) -> dict[str, GradcheckReport]:
    """Gradient check of the joint, vocoder, adaptation and welding objectives,
    each over every parameter its stage trains.

    ``m`` must still carry its SD components; the adaptation and welding
    checks run on a copy with them removed.
    """
    h = h or HyperParams()
    train, target = toy_batches(corpus)
    out = {
        "joint_train_loss": check_loss(joint_train_loss, train, m, h, _names(m, "train"), step),
        "vocoder_train_loss": check_loss(vocoder_train_loss, train, m, h, _names(m, "train_voc"), step),
    }
    m2 = remove_sd(m)
    out["adapt_loss"] = check_loss(adapt_loss, target, m2, h, _names(m2, "adapt"), step)
    out["weld_loss"] = check_loss(weld_loss, target, m2, h, _names(m2, "weld"), step)
    return out
