"""Command-line front end: ``vqclone <command> [flags]``.

All commands share one run directory (``--out``).  It holds the resolved
config, the generated corpus, every checkpoint (``<stage>-<step>.ckpt``), a
manifest linking each checkpoint to its parent, one loss CSV per
checkpoint, and the
inference/analysis outputs.

Exit status: 0 success, 2 usage error, 3 bad config or missing artifact,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .autodiff import NonFiniteError
from .blocks import FormatError
from .codebook import usage_stats, write_codes_csv
from .corpus import TEST, TRAIN, Corpus, gen_corpus, load_corpus, save_corpus, strip_transcripts
from .gradcheck import check_all_losses
from .losses import LossLog
from .metrics import (
    bit_rate,
    codemap_svg,
    content_error,
    overlap_rows,
    speaker_distance,
    write_histogram_csv,
    write_overlap_csv,
)
from .model import ModelState, bottleneck, encode_speech, encode_text, init_model, load_checkpoint, save_checkpoint
from .pipeline import (
    StageError,
    TrainingAborted,
    adapt,
    adapt_vocoder,
    infer_tts,
    infer_vc,
    train_initial,
    train_vocoder,
    weld,
)

log = logging.getLogger("vqclone")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4


class MissingArtifact(RuntimeError):
    pass


class NumericFailure(RuntimeError):
    pass


# ------------------------------------------------------------- run directory


class RunDir:
    def __init__(self, root: Path, rc: cfgmod.RunConfig):
        self.root = root
        self.rc = rc

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def init(self) -> None:
        """Create the directory and pin its config; refuse a different one."""
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "config.ini"
        text = self.rc.to_text()
        if path.exists():
            if cfgmod.load(path).digest() != self.rc.digest():
                raise cfgmod.ConfigError(f"{path} holds a different config; use a fresh --out directory")
        else:
            path.write_text(text)
        if not self.manifest_path.exists():
            self._write_manifest([])

    def manifest(self) -> list[dict]:
        if not self.manifest_path.exists():
            return []
        return json.loads(self.manifest_path.read_text())["checkpoints"]

    def _write_manifest(self, entries: list[dict]) -> None:
        doc = {"config_hash": self.rc.digest(), "seed": self.rc.seed, "checkpoints": entries}
        self.manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def corpus(self) -> Corpus:
        if not (self.corpus_dir / "manifest.csv").exists():
            raise MissingArtifact(f"missing artifact: corpus at {self.corpus_dir} (run gen-data first)")
        corpus = load_corpus(self.corpus_dir)
        if corpus.config != self.rc.corpus:
            raise cfgmod.ConfigError(f"corpus at {self.corpus_dir} was generated from a different config")
        return corpus

    def latest(self, stages: tuple[str, ...]) -> Path | None:
        for entry in reversed(self.manifest()):
            if entry["stage"] in stages:
                return self.root / entry["checkpoint"]
        return None

    def load_model(self, explicit: str | None, stages: tuple[str, ...], what: str) -> tuple[ModelState, Path]:
        path = Path(explicit) if explicit else self.latest(stages)
        if path is None:
            raise MissingArtifact(f"missing artifact: {what} checkpoint in {self.root} (pass --checkpoint)")
        if not path.exists():
            raise MissingArtifact(f"missing artifact: checkpoint {path}")
        m, _ = load_checkpoint(path)
        return m, path

    def save(self, m: ModelState, stage: str, step: int, parent: Path | None) -> Path:
        path = self.root / f"{stage}-{step}.ckpt"
        parent_name = None
        if parent is not None:
            parent_name = parent.name if parent.parent.resolve() == self.root.resolve() else str(parent)
        save_checkpoint(m, path, {"stage": stage, "step": step, "seed": self.rc.seed, "config_hash": self.rc.digest()})
        entries = [e for e in self.manifest() if e["checkpoint"] != path.name]
        entries.append(
            {
                "stage": stage,
                "step": step,
                "checkpoint": path.name,
                "parent": parent_name,
                "seed": self.rc.seed,
                "config_hash": self.rc.digest(),
            }
        )
        self._write_manifest(entries)
        log.info("wrote %s", path)
        return path

    def loss_log(self, stage: str, step: int) -> LossLog:
        """Fresh per-checkpoint loss CSV, so reruns overwrite instead of append."""
        path = self.root / f"{stage}-{step}.losses.csv"
        path.unlink(missing_ok=True)
        return LossLog(path)


def _abort(run: RunDir, exc: TrainingAborted, stage: str, parent: Path | None):
    path = run.save(exc.last_good, f"{stage}-aborted", exc.step, parent)
    raise NumericFailure(f"{exc} (last good state saved to {path.name})") from exc


# ------------------------------------------------------------------ commands


def cmd_gen_data(run: RunDir, args) -> int:
    corpus = gen_corpus(run.rc.corpus)
    save_corpus(corpus, run.corpus_dir)
    print(f"corpus: {len(corpus.utterances)} utterances, {len(corpus.speakers)} speakers -> {run.corpus_dir}")
    return EXIT_OK


def cmd_train(run: RunDir, args) -> int:
    corpus = run.corpus()
    rc = run.rc
    try:
        m, hist = train_initial(corpus, rc.train, rc.hyper, rc.model, run.loss_log("train", rc.train.initial_steps))
    except TrainingAborted as exc:
        _abort(run, exc, "train", None)
    run.save(m, "train", rc.train.initial_steps, None)
    if hist:
        print(f"train: total {hist[0].total:.6f} -> {hist[-1].total:.6f}")
    return EXIT_OK


def cmd_train_voc(run: RunDir, args) -> int:
    corpus = run.corpus()
    m, parent = run.load_model(args.checkpoint, ("train",), "train")
    try:
        m, hist = train_vocoder(corpus, m, run.rc.train, run.loss_log("train-voc", run.rc.train.vocoder_steps))
    except TrainingAborted as exc:
        _abort(run, exc, "train-voc", parent)
    run.save(m, "train-voc", run.rc.train.vocoder_steps, parent)
    if hist:
        print(f"train-voc: total {hist[0].total:.6f} -> {hist[-1].total:.6f}")
    return EXIT_OK


def _target_set(run: RunDir, corpus: Corpus):
    targets = corpus.target_speakers
    if run.rc.target >= len(targets):
        raise cfgmod.ConfigError(f"corpus has {len(targets)} held-out speakers, adaptation.target={run.rc.target}")
    spec = targets[run.rc.target]
    return spec, strip_transcripts(corpus, spec.id, run.rc.utterances)


def cmd_adapt(run: RunDir, args) -> int:
    corpus = run.corpus()
    m, parent = run.load_model(args.checkpoint, ("train-voc", "train"), "train")
    if "train" not in m.stages:
        raise MissingArtifact(f"missing artifact: {parent} is not a trained checkpoint")
    spec, data = _target_set(run, corpus)
    tc = run.rc.train
    loss_log = run.loss_log("adapt", tc.adapt_steps)
    try:
        m, _ = adapt(m, data, tc, loss_log)
        m, _ = adapt_vocoder(m, data, tc, loss_log)
    except TrainingAborted as exc:
        _abort(run, exc, "adapt", parent)
    run.save(m, "adapt", tc.adapt_steps, parent)
    print(f"adapt: speaker {spec.id}, {len(data)} untranscribed utterances")
    return EXIT_OK


def cmd_weld(run: RunDir, args) -> int:
    corpus = run.corpus()
    m, parent = run.load_model(args.checkpoint, ("adapt",), "adapt")
    spec, data = _target_set(run, corpus)
    try:
        m, hist = weld(m, data, run.rc.train, run.rc.hyper, run.loss_log("weld", run.rc.train.weld_steps))
    except TrainingAborted as exc:
        _abort(run, exc, "weld", parent)
    run.save(m, "weld", run.rc.train.weld_steps, parent)
    if hist:
        print(f"weld: total {hist[0].total:.6f} -> {hist[-1].total:.6f}")
    return EXIT_OK


def _infer(run: RunDir, args, kind: str) -> int:
    corpus = run.corpus()
    m, _ = run.load_model(args.checkpoint, ("weld", "adapt", "train-voc", "train"), "trained")
    speaker = None if m.sd_removed else corpus.split(TRAIN)[0].speaker
    target = corpus.target_speakers[run.rc.target] if m.sd_removed and corpus.target_speakers else None
    out = run.root / kind
    out.mkdir(exist_ok=True)
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for u in corpus.split(TEST):
            r = infer_tts(u.x, m, speaker) if kind == "infer-tts" else infer_vc(u.y, m, speaker)
            np.savetxt(out / f"{u.uid}.acoustic.csv", r.acoustic, delimiter=",", fmt="%.17g")
            if r.codes is not None:
                write_codes_csv(out / f"{u.uid}.codes.csv", r.codes.indices)
            ref = target if target is not None else corpus.speaker(speaker)
            rows.append(
                [u.uid, u.speaker, len(u), repr(content_error(r.acoustic, u.x, m)), repr(speaker_distance(r.acoustic, ref, u.x))]
            )
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "source_speaker", "frames", "content_error", "speaker_distance"])
        w.writerows(rows)
    mean_err = float(np.mean([float(r[3]) for r in rows])) if rows else 0.0
    print(f"{kind}: {len(rows)} utterances, mean content error {mean_err:.4f} -> {out}")
    return EXIT_OK


def cmd_infer_tts(run: RunDir, args) -> int:
    return _infer(run, args, "infer-tts")


def cmd_infer_vc(run: RunDir, args) -> int:
    return _infer(run, args, "infer-vc")


def cmd_analyze(run: RunDir, args) -> int:
    corpus = run.corpus()
    m, _ = run.load_model(args.checkpoint, ("weld", "adapt", "train-voc", "train"), "trained")
    if m.mode != "vq":
        raise cfgmod.ConfigError(f"analyze needs a vq-mode checkpoint, got mode {m.mode!r}")
    out = run.root / "analysis"
    out.mkdir(exist_ok=True)
    test = corpus.split(TEST)
    rows = overlap_rows(test, m)
    write_overlap_csv(out / "overlap.csv", rows)
    seqs = [bottleneck(encode_speech(u.y, m), m)[1] for u in corpus.split(TRAIN) + test]
    k = m.config.codebook_size
    write_histogram_csv(out / "histogram.csv", usage_stats(seqs, k).counts)
    if test:
        u = test[0]
        _, a = bottleneck(encode_text(u.x, m), m)
        _, b = bottleneck(encode_speech(u.y, m), m)
        (out / "codemap.svg").write_text(codemap_svg(a, b, k, title=u.uid))
    rate = bit_rate(k, run.rc.frames_per_second, seqs)
    with open(out / "bitrate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        for key, value in rate.items():
            w.writerow([key, repr(value)])
    mean_ov = float(np.mean([r[2] for r in rows])) if rows else 0.0
    print(f"analyze: mean overlap {mean_ov:.4f}, {rate['bits_per_frame']:.0f} bits/frame fixed, "
          f"{rate['entropy_bits_per_frame']:.3f} bits/frame entropy -> {out}")
    return EXIT_OK


def cmd_gradcheck(run: RunDir, args) -> int:
    corpus = gen_corpus(run.rc.corpus)
    if args.checkpoint:
        m, _ = load_checkpoint(args.checkpoint)
        if m.sd_removed:
            raise cfgmod.ConfigError("gradcheck needs a checkpoint that still has SD components")
    else:
        m = init_model(run.rc.model)
    reports = check_all_losses(corpus, m, run.rc.hyper)
    with open(run.root / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss", "parameter", "relative_error", "max_abs_error"])
        for loss, rep in reports.items():
            for name in sorted(rep.errors):
                w.writerow([loss, name, repr(rep.errors[name]), repr(rep.max_abs[name])])
    worst = max(r.max_rel_error for r in reports.values())
    for loss, rep in reports.items():
        print(f"gradcheck {loss}: {rep.n_checked} entries, max relative error {rep.max_rel_error:.3e}")
    if not worst < GRADCHECK_TOL:
        raise NumericFailure(f"gradcheck failed: max relative error {worst:.3e} >= {GRADCHECK_TOL:g}")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic corpus"),
    "train": (cmd_train, "joint initial training"),
    "train-voc": (cmd_train_voc, "vocoder initialisation"),
    "adapt": (cmd_adapt, "remove SD components, adapt decoder then vocoder"),
    "weld": (cmd_weld, "joint decoder/vocoder tuning"),
    "infer-tts": (cmd_infer_tts, "text-to-speech on the test split"),
    "infer-vc": (cmd_infer_vc, "voice conversion on the test split"),
    "analyze": (cmd_analyze, "code overlap, histogram, codemap and bit rate"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every objective"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vqclone", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: <out>/config.ini, else built-in defaults)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--checkpoint", help="input checkpoint (default: latest suitable one in the manifest)")
    common.add_argument("--mode", choices=("vq", "vae", "standard"), help="override run.mode")
    common.add_argument("--utterances", type=int, help="override adaptation.utterances")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return p


def _resolve_config(args) -> cfgmod.RunConfig:
    path = args.config
    if path is None and (Path(args.out) / "config.ini").exists():
        path = Path(args.out) / "config.ini"
    return cfgmod.load(path, run__seed=args.seed, run__mode=args.mode, adaptation__utterances=args.utterances)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = _resolve_config(args)
        run = RunDir(Path(args.out), rc)
        run.init()
        return COMMANDS[args.command][0](run, args)
    except (cfgmod.ConfigError, MissingArtifact, StageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, NonFiniteError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
