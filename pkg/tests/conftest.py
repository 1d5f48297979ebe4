from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import pytest

from vqclone.corpus import gen_corpus, strip_transcripts
from vqclone.losses import HyperParams
from vqclone.model import ModelState, init_model, remove_sd
from vqclone.pipeline import (
    TrainConfig,
    adapt,
    adapt_vocoder,
    model_config_for,
    train_initial,
    train_vocoder,
    weld,
)

ADAPT_UTTERANCES = 20

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    print(line)
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@dataclass
class ClonedTarget:
    removed: ModelState
    adapted: ModelState
    adapted_voc: ModelState
    welded: ModelState
    adapt_history: list
    weld_history: list


@dataclass
class PipelineRun:
    mode: str
    beta: float
    trained: ModelState
    voc_trained: ModelState
    train_history: list
    voc_history: list
    targets: dict[int, ClonedTarget] = field(default_factory=dict)
    seconds: float = 0.0


@pytest.fixture(scope="session")
def corpus():
    return gen_corpus()


def run_pipeline(corpus, mode: str = "vq", beta: float = 0.25, clone_targets: bool = True) -> PipelineRun:
    t0 = time.perf_counter()
    tc = TrainConfig()
    h = HyperParams(beta=beta)
    m, th = train_initial(corpus, tc, h, model_config_for(corpus, mode=mode, seed=tc.seed))
    mv, vh = train_vocoder(corpus, m, tc)
    run = PipelineRun(mode, beta, m, mv, th, vh)
    if clone_targets:
        for spec in corpus.target_speakers:
            data = strip_transcripts(corpus, spec.id, ADAPT_UTTERANCES)
            removed = remove_sd(mv)
            ma, ah = adapt(mv, data, tc)
            mav, _ = adapt_vocoder(ma, data, tc)
            mw, wh = weld(mav, data, tc, h)
            run.targets[spec.id] = ClonedTarget(removed, ma, mav, mw, ah, wh)
    run.seconds = time.perf_counter() - t0
    return run


_RUNS: dict[tuple, PipelineRun] = {}


@pytest.fixture(scope="session")
def pipeline_runs(corpus):
    """Lazily trained pipelines keyed by (mode, beta, clone_targets)."""

    def get(mode: str = "vq", beta: float = 0.25, clone_targets: bool = True) -> PipelineRun:
        key = (mode, beta, clone_targets)
        if key not in _RUNS:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                _RUNS[key] = run_pipeline(corpus, mode, beta, clone_targets)
        return _RUNS[key]

    return get


@pytest.fixture(scope="session")
def vq_run(pipeline_runs):
    return pipeline_runs("vq")


@pytest.fixture
def fresh_model(corpus):
    return init_model(model_config_for(corpus))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
