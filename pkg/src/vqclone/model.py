"""Toy-scale networks of the voice cloning system and their stack compositions.

Networks (all frame-wise two-layer tanh perceptrons, hidden width ``hidden``):

* ``tenc``  symbol id -> latent (first layer is an embedding lookup)
* ``senc``  acoustic frame -> latent
* ``sdec``  latent window (current frame + ``context`` previous) -> acoustic frame
* ``tdec``  latent -> symbol logits (auxiliary phone classifier)
* ``voc``   acoustic frame -> ``wave_rate`` waveform samples

``sdec``, ``tdec`` and ``voc`` carry speaker-dependent (SD) components: a
table of per-speaker embeddings (one-hot lookup) projected into the hidden
layer.  :func:`remove_sd` swaps them for a single trainable hidden bias.

In ``vae`` mode the encoders emit a mean and a log standard deviation, and
the latent is sampled as ``mu + sigma * eps``.
"""

from __future__ import annotations

import copy
import functools
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import blocks
from .autodiff import Tensor
from .codebook import CodeSequence, init_codebook, quantize

CHECKPOINT_MAGIC = b"VQCLCKPT"

MODES = ("vq", "vae", "standard")
MODULES = ("tenc", "senc", "sdec", "tdec", "voc", "codebook")
SD_MODULES = ("sdec", "tdec", "voc")


@dataclass
class ModelConfig:
    mode: str = "vq"
    vocab_size: int = 12
    acoustic_dim: int = 8
    latent_dim: int = 64
    codebook_size: int = 160
    hidden: int = 64
    speaker_dim: int = 8
    n_speakers: int = 8
    wave_rate: int = 4
    context: int = 3
    latent_scale: float = 4.0
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("vocab_size", "acoustic_dim", "latent_dim", "codebook_size", "hidden", "speaker_dim", "n_speakers", "wave_rate"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.context < 0:
            raise ValueError("context must be >= 0")


def module_of(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)
    sd_removed: bool = False
    stages: list[str] = field(default_factory=list)
    _constants: dict[str, Tensor] = field(default_factory=dict, repr=False, compare=False)

    @property
    def mode(self) -> str:
        return self.config.mode

    def leaf(self, name: str) -> Tensor:
        """Tensor view of a parameter; trainable when a graph is recording and
        the owning module is not frozen."""
        value = self.params[name]
        graph = ad.current_graph()
        if graph is not None and module_of(name) not in self.frozen:
            return graph.parameter(value, name)
        cached = self._constants.get(name)
        if cached is None or cached.data is not value:
            cached = self._constants[name] = Tensor(value)
        return cached

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if module_of(n) not in self.frozen]

    def module_params(self, module: str) -> dict[str, np.ndarray]:
        return {n: v for n, v in self.params.items() if module_of(n) == module}

    def copy(self) -> "ModelState":
        return ModelState(
            copy.deepcopy(self.config),
            {k: v.copy() for k, v in self.params.items()},
            set(self.frozen),
            self.sd_removed,
            list(self.stages),
        )


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def init_model(config: ModelConfig | None = None) -> ModelState:
    cfg = config or ModelConfig()
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 7])
    V, A, D, K, H, E, S, W = (
        cfg.vocab_size, cfg.acoustic_dim, cfg.latent_dim, cfg.codebook_size,
        cfg.hidden, cfg.speaker_dim, cfg.n_speakers, cfg.wave_rate,
    )
    p: dict[str, np.ndarray] = {}

    def encoder(prefix: str, fan_in: int) -> None:
        p[f"{prefix}.w1"] = _dense(rng, fan_in, H)
        p[f"{prefix}.b1"] = np.zeros(H)
        p[f"{prefix}.w_mu"] = _dense(rng, H, D) * cfg.latent_scale
        p[f"{prefix}.b_mu"] = np.zeros(D)
        if cfg.mode == "vae":
            p[f"{prefix}.w_logsig"] = _dense(rng, H, D) * 0.1
            p[f"{prefix}.b_logsig"] = np.full(D, -2.0)

    def decoder(prefix: str, fan_in: int, fan_out: int) -> None:
        p[f"{prefix}.w1"] = _dense(rng, fan_in, H)
        p[f"{prefix}.b1"] = np.zeros(H)
        p[f"{prefix}.w2"] = _dense(rng, H, fan_out)
        p[f"{prefix}.b2"] = np.zeros(fan_out)
        p[f"{prefix}.spk_table"] = rng.normal(0.0, 1.0, size=(S, E))
        p[f"{prefix}.spk_proj"] = _dense(rng, E, H)

    encoder("tenc", V)
    encoder("senc", A)
    decoder("sdec", (cfg.context + 1) * D, A)
    decoder("tdec", D, V)
    decoder("voc", A, W)
    p["codebook.entries"] = init_codebook(K, D, np.random.default_rng([cfg.seed, 11]))
    frozen = set() if cfg.mode == "vq" else {"codebook"}
    return ModelState(cfg, p, frozen=frozen)


# ----------------------------------------------------------------- batches


@dataclass
class Batch:
    """Utterances stacked along the frame axis.

    ``speakers`` holds SD-table rows per frame (None for untranscribed or
    SD-free use); ``lengths`` delimits utterances for causal windows.
    """

    lengths: list[int]
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    o: np.ndarray | None = None
    speakers: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return int(sum(self.lengths))

    @classmethod
    def from_utterances(cls, utts: Sequence, transcribed: bool = True, with_speakers: bool = True) -> "Batch":
        lengths = [len(u.y) for u in utts]
        x = np.concatenate([u.x for u in utts]) if transcribed and utts else None
        y = np.concatenate([u.y for u in utts]) if utts else np.zeros((0, 0))
        o = np.concatenate([np.asarray(u.o).reshape(len(u.y), -1) for u in utts]) if utts else None
        spk = np.concatenate([np.full(len(u.y), u.speaker) for u in utts]) if with_speakers and utts else None
        return cls(lengths, x, y, o, spk)

    @classmethod
    def untranscribed(cls, ys: Sequence[np.ndarray], os: Sequence[np.ndarray] | None = None) -> "Batch":
        lengths = [len(y) for y in ys]
        o = None
        if os is not None:
            o = np.concatenate([np.asarray(w).reshape(len(y), -1) for y, w in zip(ys, os)])
        return cls(lengths, None, np.concatenate(ys), o, None)


def lag_index(lengths: Sequence[int], lag: int) -> np.ndarray:
    """Row index of the frame ``lag`` steps back within the same utterance, -1 if none."""
    return _lag_index(tuple(lengths), lag)


@functools.lru_cache(maxsize=64)
def _lag_index(lengths: tuple[int, ...], lag: int) -> np.ndarray:
    out = []
    offset = 0
    for n in lengths:
        idx = np.arange(n) - lag
        out.append(np.where(idx >= 0, idx + offset, -1))
        offset += n
    idx = np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
    idx.setflags(write=False)
    return idx


# ---------------------------------------------------------------- networks


@dataclass
class LatentSequence:
    z: Tensor
    mu: Tensor | None = None
    log_sigma: Tensor | None = None

    @property
    def sigma(self) -> np.ndarray | None:
        return None if self.log_sigma is None else np.exp(self.log_sigma.data)

    def __len__(self) -> int:
        return self.z.shape[0]


def _encoder_head(prefix: str, h: Tensor, m: ModelState, rng: np.random.Generator | None) -> LatentSequence:
    mu = ad.linear(h, m.leaf(f"{prefix}.w_mu"), m.leaf(f"{prefix}.b_mu"))
    if m.mode != "vae":
        return LatentSequence(mu)
    log_sigma = ad.linear(h, m.leaf(f"{prefix}.w_logsig"), m.leaf(f"{prefix}.b_logsig"))
    if rng is None:
        return LatentSequence(mu, mu, log_sigma)
    eps = rng.standard_normal(mu.shape)
    z = mu + ad.exp(log_sigma) * eps
    return LatentSequence(z, mu, log_sigma)


def encode_text(x: np.ndarray, m: ModelState, rng: np.random.Generator | None = None) -> LatentSequence:
    """Text encoder.  In vae mode ``rng`` draws the latent sample; without it
    the latent is the mean."""
    x = np.asarray(x, dtype=np.int64)
    if x.size and (x.min() < 0 or x.max() >= m.config.vocab_size):
        raise ValueError(f"symbol id out of range [0, {m.config.vocab_size})")
    h = ad.tanh(ad.gather_rows(m.leaf("tenc.w1"), x) + m.leaf("tenc.b1"))
    return _encoder_head("tenc", h, m, rng)


def encode_speech(y: np.ndarray, m: ModelState, rng: np.random.Generator | None = None) -> LatentSequence:
    y = np.asarray(y, dtype=np.float64).reshape(-1, m.config.acoustic_dim)
    h = ad.tanh(ad.linear(ad.as_tensor(y), m.leaf("senc.w1"), m.leaf("senc.b1")))
    return _encoder_head("senc", h, m, rng)


def bottleneck(lat: LatentSequence, m: ModelState) -> tuple[Tensor, CodeSequence | None]:
    """Decoder input for the current mode.

    vq: straight-through quantized latents plus the code sequence;
    vae/standard: the continuous latent itself.
    """
    if m.mode != "vq":
        return lat.z, None
    codes = quantize(lat.z, m.leaf("codebook.entries"))
    return ad.straight_through(lat.z, codes.vectors), codes


def _speaker_term(prefix: str, m: ModelState, speakers: np.ndarray | None, n: int) -> Tensor:
    if m.sd_removed:
        if speakers is not None:
            raise ValueError("speaker id supplied after SD components were removed")
        return m.leaf(f"{prefix}.sd_bias")
    if speakers is None:
        raise ValueError(f"{prefix} has SD components; a speaker id is required")
    speakers = np.broadcast_to(np.asarray(speakers, dtype=np.int64), (n,))
    if speakers.size and (speakers.min() < 0 or speakers.max() >= m.config.n_speakers):
        raise ValueError(f"speaker id out of range [0, {m.config.n_speakers})")
    emb = ad.gather_rows(m.leaf(f"{prefix}.spk_table"), speakers)
    return emb @ m.leaf(f"{prefix}.spk_proj")


def _sd_mlp(prefix: str, inp: Tensor, m: ModelState, speakers) -> Tensor:
    pre = ad.linear(inp, m.leaf(f"{prefix}.w1"), m.leaf(f"{prefix}.b1"))
    h = ad.tanh(pre + _speaker_term(prefix, m, speakers, inp.shape[0]))
    return ad.linear(h, m.leaf(f"{prefix}.w2"), m.leaf(f"{prefix}.b2"))


def decode_speech(
    dec_in: Tensor,
    m: ModelState,
    speakers: np.ndarray | int | None = None,
    lengths: Sequence[int] | None = None,
) -> Tensor:
    """Speech decoder over a causal window of decoder inputs.

    ``lengths`` splits stacked utterances so windows never cross them.
    """
    dec_in = ad.as_tensor(dec_in)
    lengths = [dec_in.shape[0]] if lengths is None else list(lengths)
    cols = [dec_in] + [ad.gather_rows(dec_in, lag_index(lengths, lag)) for lag in range(1, m.config.context + 1)]
    window = ad.concat(cols, axis=1) if len(cols) > 1 else dec_in
    return _sd_mlp("sdec", window, m, speakers)


def text_logits(z: Tensor, m: ModelState, speakers=None) -> Tensor:
    return _sd_mlp("tdec", ad.as_tensor(z), m, speakers)


def decode_text(z: Tensor, m: ModelState, speakers=None) -> Tensor:
    """Per-frame symbol probabilities."""
    return ad.softmax(text_logits(z, m, speakers))


def vocode(y, m: ModelState, speakers=None) -> Tensor:
    """Toy vocoder: (T, A) acoustics -> (T, wave_rate) samples."""
    y = ad.as_tensor(y)
    return _sd_mlp("voc", y, m, speakers)


def remove_sd(m: ModelState) -> ModelState:
    """Drop the speaker tables of sdec/tdec/voc, replacing each with a hidden
    bias initialised at the average speaker contribution."""
    if m.sd_removed:
        raise ValueError("SD components already removed")
    out = m.copy()
    for prefix in SD_MODULES:
        table = out.params.pop(f"{prefix}.spk_table")
        proj = out.params.pop(f"{prefix}.spk_proj")
        out.params[f"{prefix}.sd_bias"] = (table @ proj).mean(axis=0)
    out.sd_removed = True
    out.stages.append("remove_sd")
    return out


# ------------------------------------------------------------------ stacks


@dataclass
class StackOutput:
    latent: LatentSequence
    dec_in: Tensor
    codes: CodeSequence | None
    output: Tensor


def _frame_speakers(batch: Batch, m: ModelState):
    return None if m.sd_removed else batch.speakers


def tts_stack(batch: Batch, m: ModelState, rng=None) -> StackOutput:
    lat = encode_text(batch.x, m, rng)
    dec_in, codes = bottleneck(lat, m)
    return StackOutput(lat, dec_in, codes, decode_speech(dec_in, m, _frame_speakers(batch, m), batch.lengths))


def sts_stack(batch: Batch, m: ModelState, rng=None) -> StackOutput:
    lat = encode_speech(batch.y, m, rng)
    dec_in, codes = bottleneck(lat, m)
    return StackOutput(lat, dec_in, codes, decode_speech(dec_in, m, _frame_speakers(batch, m), batch.lengths))


def stt_stack(batch: Batch, m: ModelState, rng=None, latent: LatentSequence | None = None) -> StackOutput:
    """Speech to text: bypasses the codebook; output is logits."""
    lat = latent or encode_speech(batch.y, m, rng)
    return StackOutput(lat, lat.z, None, text_logits(lat.z, m, _frame_speakers(batch, m)))


def ttt_stack(batch: Batch, m: ModelState, rng=None, latent: LatentSequence | None = None) -> StackOutput:
    lat = latent or encode_text(batch.x, m, rng)
    return StackOutput(lat, lat.z, None, text_logits(lat.z, m, _frame_speakers(batch, m)))


# -------------------------------------------------------------- checkpoints


def checkpoint_bytes(m: ModelState, extra: dict | None = None) -> bytes:
    cfg = m.config
    header = {
        "magic": CHECKPOINT_MAGIC.decode(),
        "mode": cfg.mode,
        "K": cfg.codebook_size,
        "D": cfg.latent_dim,
        "A": cfg.acoustic_dim,
        "V": cfg.vocab_size,
        "config": asdict(cfg),
        "frozen": sorted(m.frozen),
        "sd_removed": m.sd_removed,
        "stages": list(m.stages),
        "extra": extra or {},
    }
    return blocks.dumps(CHECKPOINT_MAGIC, header, {k: m.params[k] for k in sorted(m.params)})


def save_checkpoint(m: ModelState, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(m, extra))


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    header, params = blocks.load(path, CHECKPOINT_MAGIC)
    cfg = ModelConfig(**header["config"])
    state = ModelState(cfg, params, set(header["frozen"]), header["sd_removed"], list(header["stages"]))
    return state, header
