"""Plain-text run configuration (INI sections of ``key = value`` lines).

One root ``seed`` drives the corpus, the model initialisation and the
sampling noise of vae mode.  :func:`resolve` turns a parsed file into the
typed config objects the library consumes.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .corpus import CorpusConfig
from .losses import HyperParams
from .model import MODES, ModelConfig
from .pipeline import TrainConfig


class ConfigError(ValueError):
    """Unreadable file, unknown key, or a value of the wrong type or range."""


DEFAULT_TEXT = """\
[run]
seed = 0
mode = vq
frames_per_second = 100

[hyperparameters]
alpha = 0.1
beta = 0.25
gamma = 0.01
delta_vq = 0.25
delta_c = 1.0
codebook_k = 160
latent_dim = 64

[corpus]
n_speakers = 8
utterances_per_speaker = 16
test_utterances = 4
n_targets = 2
target_utterances = 24
vocab_size = 12
acoustic_dim = 8
wave_rate = 4
min_len = 8
max_len = 24
noise = 0.02

[model]
hidden = 64
speaker_dim = 8
context = 3
latent_scale = 4.0

[training]
lr = 0.05
initial_lr = 0.2
clip = 5.0
initial_steps = 500
vocoder_steps = 200
adapt_steps = 100
vocoder_adapt_steps = 100
weld_steps = 50

[adaptation]
target = 0
utterances = 20
"""

_SCHEMA: dict[str, dict[str, type]] = {
    "run": {"seed": int, "mode": str, "frames_per_second": float},
    "hyperparameters": {
        "alpha": float,
        "beta": float,
        "gamma": float,
        "delta_vq": float,
        "delta_c": float,
        "codebook_k": int,
        "latent_dim": int,
    },
    "corpus": {
        "n_speakers": int,
        "utterances_per_speaker": int,
        "test_utterances": int,
        "n_targets": int,
        "target_utterances": int,
        "vocab_size": int,
        "acoustic_dim": int,
        "wave_rate": int,
        "min_len": int,
        "max_len": int,
        "noise": float,
    },
    "model": {"hidden": int, "speaker_dim": int, "context": int, "latent_scale": float},
    "training": {
        "lr": float,
        "initial_lr": float,
        "clip": float,
        "initial_steps": int,
        "vocoder_steps": int,
        "adapt_steps": int,
        "vocoder_adapt_steps": int,
        "weld_steps": int,
    },
    "adaptation": {"target": int, "utterances": int},
}


@dataclass
class RunConfig:
    seed: int
    mode: str
    frames_per_second: float
    hyper: HyperParams
    corpus: CorpusConfig
    model: ModelConfig
    train: TrainConfig
    target: int
    utterances: int
    raw: dict[str, dict[str, str]] = field(repr=False, default_factory=dict)

    def to_text(self) -> str:
        """Canonical INI text; parsing it back gives an equal config."""
        out = []
        for section, keys in _SCHEMA.items():
            out.append(f"[{section}]")
            out.extend(f"{k} = {self.raw[section][k]}" for k in keys)
            out.append("")
        return "\n".join(out)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))


def load_raw(path: str | Path | None = None) -> dict[str, dict[str, str]]:
    """Defaults overlaid with ``path``; rejects unknown sections and keys."""
    cp = _parser()
    cp.read_string(DEFAULT_TEXT)
    if path is not None:
        user = _parser()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            user.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in user.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in user.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cp.set(section, key, value.strip())
    return {s: dict(cp.items(s)) for s in _SCHEMA}


def _typed(raw: dict[str, dict[str, str]]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for section, keys in _SCHEMA.items():
        out[section] = {}
        for key, kind in keys.items():
            text = raw[section][key]
            try:
                out[section][key] = kind(text)
            except ValueError:
                raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {text!r}") from None
    return out


def resolve(raw: dict[str, dict[str, str]]) -> RunConfig:
    v = _typed(raw)
    run, hp, co, mo, tr, ad = (v[s] for s in _SCHEMA)
    if run["mode"] not in MODES:
        raise ConfigError(f"run.mode must be one of {MODES}, got {run['mode']!r}")
    if run["frames_per_second"] <= 0:
        raise ConfigError("run.frames_per_second must be > 0")
    seed = run["seed"]
    hyper = HyperParams(
        alpha_sts=hp["alpha"],
        alpha_stt=hp["alpha"],
        beta=hp["beta"],
        gamma=hp["gamma"],
        delta_vq=hp["delta_vq"],
        delta_c=hp["delta_c"],
    )
    corpus = CorpusConfig(seed=seed, **co)
    model = ModelConfig(
        mode=run["mode"],
        vocab_size=co["vocab_size"],
        acoustic_dim=co["acoustic_dim"],
        latent_dim=hp["latent_dim"],
        codebook_size=hp["codebook_k"],
        n_speakers=co["n_speakers"],
        wave_rate=co["wave_rate"],
        seed=seed,
        **mo,
    )
    train = TrainConfig(seed=seed, **tr)
    try:
        hyper.validate()
        corpus.validate()
        model.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for f in fields(TrainConfig):
        value = getattr(train, f.name)
        if value < 0:
            raise ConfigError(f"training.{f.name} must be >= 0")
    if not 0 <= ad["target"] < corpus.n_targets:
        raise ConfigError(f"adaptation.target must index one of {corpus.n_targets} held-out speakers")
    if not 1 <= ad["utterances"] <= corpus.target_utterances:
        raise ConfigError(f"adaptation.utterances must lie in [1, {corpus.target_utterances}]")
    return RunConfig(seed, run["mode"], run["frames_per_second"], hyper, corpus, model, train, ad["target"], ad["utterances"], raw)


def load(path: str | Path | None = None, **overrides) -> RunConfig:
    """Parse ``path`` (or the defaults) and apply ``section.key`` overrides,
    given as ``{"run.seed": 3}``-style keyword pairs with dots replaced by
    double underscores (``run__seed=3``)."""
    raw = load_raw(path)
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, key = dotted.split("__", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown override {section}.{key}")
        raw[section][key] = str(value)
    return resolve(raw)
