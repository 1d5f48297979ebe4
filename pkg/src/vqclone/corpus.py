"""Deterministic synthetic parallel corpus.

Every speaker renders the same per-symbol acoustic patterns through its own
affine voice transform::

    y_t = gain * P[x_t] + bias + noise

and the toy waveform is a fixed nonlinear expansion of each acoustic frame
into ``wave_rate`` samples.  Voice identity is therefore fully described by
``(gain, bias)``, which makes speaker similarity measurable analytically.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import blocks

CORPUS_MAGIC = b"VQCLUTT\x00"

TRAIN = "train"
TEST = "test"
TARGET = "target"


@dataclass
class CorpusConfig:
    n_speakers: int = 8
    utterances_per_speaker: int = 16
    seed: int = 0
    n_targets: int = 2
    target_utterances: int = 24
    test_utterances: int = 4
    vocab_size: int = 12
    acoustic_dim: int = 8
    wave_rate: int = 4
    min_len: int = 8
    max_len: int = 24
    noise: float = 0.02
    gain_low: float = 0.6
    gain_high: float = 1.6
    bias_scale: float = 0.5
    mean_margin: float = 0.3

    def validate(self) -> None:
        if self.n_speakers < 1 or self.utterances_per_speaker < 1:
            raise ValueError("n_speakers and utterances_per_speaker must be >= 1")
        if self.n_targets < 0 or self.target_utterances < 0:
            raise ValueError("target counts must be >= 0")
        if not 0 <= self.test_utterances < self.utterances_per_speaker:
            raise ValueError("test_utterances must leave at least one training utterance")
        if not 0.5 <= self.gain_low <= self.gain_high <= 2.0:
            raise ValueError("gains must lie in [0.5, 2]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")


@dataclass
class SpeakerSpec:
    id: int
    patterns: np.ndarray
    gain: np.ndarray
    bias: np.ndarray
    noise: float
    held_out: bool = False

    def render_clean(self, x: np.ndarray) -> np.ndarray:
        return self.gain * self.patterns[np.asarray(x)] + self.bias

    def expected_stats(self, x: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Analytic per-dimension mean and variance of this speaker's frames.

        With ``x`` the statistics are those of a noisy rendering of that exact
        symbol sequence; without it, symbols are taken as uniform over the
        vocabulary.
        """
        clean = self.render_clean(np.arange(len(self.patterns)) if x is None else x)
        return clean.mean(axis=0), clean.var(axis=0) + self.noise**2

    @property
    def mean_vector(self) -> np.ndarray:
        return self.expected_stats()[0]


@dataclass
class SynthUtterance:
    uid: str
    speaker: int
    x: np.ndarray
    y: np.ndarray
    o: np.ndarray
    split: str

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Corpus:
    config: CorpusConfig
    speakers: list[SpeakerSpec]
    utterances: list[SynthUtterance]
    wave_basis: np.ndarray
    _by_id: dict[str, SynthUtterance] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {u.uid: u for u in self.utterances}

    def split(self, name: str) -> list[SynthUtterance]:
        return [u for u in self.utterances if u.split == name]

    def utterance(self, uid: str) -> SynthUtterance:
        return self._by_id[uid]

    def speaker(self, sid: int) -> SpeakerSpec:
        for s in self.speakers:
            if s.id == sid:
                return s
        raise KeyError(f"unknown speaker {sid}")

    @property
    def training_speakers(self) -> list[SpeakerSpec]:
        return [s for s in self.speakers if not s.held_out]

    @property
    def target_speakers(self) -> list[SpeakerSpec]:
        return [s for s in self.speakers if s.held_out]


def waveform(y: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Toy waveform: ``wave_rate`` samples per acoustic frame, flattened."""
    return np.tanh(np.asarray(y) @ basis).reshape(-1)


def make_wave_basis(acoustic_dim: int, wave_rate: int) -> np.ndarray:
    a = np.arange(acoustic_dim)[:, None] + 0.5
    j = np.arange(wave_rate)[None, :] + 0.5
    return 0.5 * np.cos(np.pi * a * j / wave_rate)


def _symbols(rng: np.random.Generator, cfg: CorpusConfig) -> np.ndarray:
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    out: list[int] = []
    while len(out) < length:
        sym = int(rng.integers(cfg.vocab_size))
        out.extend([sym] * int(rng.integers(1, 4)))
    return np.array(out[:length], dtype=np.int64)


def _make_speakers(cfg: CorpusConfig, patterns: np.ndarray) -> list[SpeakerSpec]:
    speakers: list[SpeakerSpec] = []
    total = cfg.n_speakers + cfg.n_targets
    for sid in range(total):
        rng = np.random.default_rng([cfg.seed, 0, sid])
        for _ in range(10_000):
            gain = rng.uniform(cfg.gain_low, cfg.gain_high, size=cfg.acoustic_dim)
            bias = rng.normal(0.0, cfg.bias_scale, size=cfg.acoustic_dim)
            cand = SpeakerSpec(sid, patterns, gain, bias, cfg.noise, held_out=sid >= cfg.n_speakers)
            if all(np.linalg.norm(cand.mean_vector - s.mean_vector) >= cfg.mean_margin for s in speakers):
                break
        else:
            raise ValueError(f"could not place speaker {sid} at mean margin {cfg.mean_margin}")
        speakers.append(cand)
    return speakers


def gen_corpus(config: CorpusConfig | None = None, **overrides) -> Corpus:
    """Build the corpus as a pure function of the config (seed included)."""
    cfg = config or CorpusConfig()
    if overrides:
        cfg = CorpusConfig(**{**asdict(cfg), **overrides})
    cfg.validate()
    patterns = np.random.default_rng([cfg.seed, 2]).normal(0.0, 1.0, size=(cfg.vocab_size, cfg.acoustic_dim))
    basis = make_wave_basis(cfg.acoustic_dim, cfg.wave_rate)
    speakers = _make_speakers(cfg, patterns)

    utterances: list[SynthUtterance] = []
    counter = 0
    for spk in speakers:
        n = cfg.target_utterances if spk.held_out else cfg.utterances_per_speaker
        for i in range(n):
            rng = np.random.default_rng([cfg.seed, 1, counter])
            counter += 1
            x = _symbols(rng, cfg)
            y = spk.render_clean(x) + cfg.noise * rng.standard_normal((len(x), cfg.acoustic_dim))
            if spk.held_out:
                split = TARGET
            else:
                split = TEST if i >= n - cfg.test_utterances else TRAIN
            utterances.append(SynthUtterance(f"s{spk.id:02d}u{i:04d}", spk.id, x, y, waveform(y, basis), split))
    return Corpus(cfg, speakers, utterances, basis)


@dataclass
class AdaptationSet:
    """Untranscribed (y, o) pairs of one speaker.

    Transcripts stay with the corpus; :meth:`Corpus.utterance` recovers them
    by id for evaluation only.
    """

    speaker: int
    uids: list[str]
    y: list[np.ndarray]
    o: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.uids)


def strip_transcripts(corpus: Corpus, speaker: int, n: int | None = None) -> AdaptationSet:
    spec = corpus.speaker(speaker)
    utts = [u for u in corpus.utterances if u.speaker == spec.id]
    if n is not None:
        if n < 1 or n > len(utts):
            raise ValueError(f"speaker {speaker} has {len(utts)} utterances, asked for {n}")
        utts = utts[:n]
    return AdaptationSet(spec.id, [u.uid for u in utts], [u.y for u in utts], [u.o for u in utts])


# ------------------------------------------------------------------ disk I/O


def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    root = Path(directory)
    (root / "utterances").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "speaker_id", "length", "split"])
        for u in corpus.utterances:
            w.writerow([u.uid, u.speaker, len(u), u.split])
    for u in corpus.utterances:
        blocks.save(
            root / "utterances" / f"{u.uid}.bin",
            CORPUS_MAGIC,
            {"kind": "utterance", "uid": u.uid, "speaker": u.speaker, "split": u.split},
            {"x": u.x.astype(np.float64), "y": u.y, "o": u.o},
        )
    spk_blocks = {"patterns": corpus.speakers[0].patterns, "wave_basis": corpus.wave_basis}
    for s in corpus.speakers:
        spk_blocks[f"gain/{s.id}"] = s.gain
        spk_blocks[f"bias/{s.id}"] = s.bias
    header = {
        "kind": "speakers",
        "config": asdict(corpus.config),
        "speakers": [{"id": s.id, "noise": s.noise, "held_out": s.held_out} for s in corpus.speakers],
    }
    blocks.save(root / "speakers.bin", CORPUS_MAGIC, header, spk_blocks)


def load_corpus(directory: str | Path) -> Corpus:
    root = Path(directory)
    header, spk_blocks = blocks.load(root / "speakers.bin", CORPUS_MAGIC)
    cfg = CorpusConfig(**header["config"])
    patterns = spk_blocks["patterns"]
    speakers = [
        SpeakerSpec(m["id"], patterns, spk_blocks[f"gain/{m['id']}"], spk_blocks[f"bias/{m['id']}"], m["noise"], m["held_out"])
        for m in header["speakers"]
    ]
    utterances = []
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            _, ub = blocks.load(root / "utterances" / f"{row['utterance_id']}.bin", CORPUS_MAGIC)
            utterances.append(
                SynthUtterance(
                    row["utterance_id"], int(row["speaker_id"]), ub["x"].astype(np.int64), ub["y"], ub["o"], row["split"]
                )
            )
    return Corpus(cfg, speakers, utterances, spk_blocks["wave_basis"])
