"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into the "acceptance criteria" section of the
pytest terminal summary.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

import vqclone.autodiff as ad
from conftest import record_acceptance
from vqclone.cli import main as cli_main
from vqclone.codebook import commitment_loss, init_codebook, quantize, usage_stats, vq_loss
from vqclone.corpus import TEST, TRAIN
from vqclone.gradcheck import check_all_losses
from vqclone.losses import tie_loss
from vqclone.metrics import bit_rate, cloning_report, overlap_rows
from vqclone.model import Batch, bottleneck, encode_speech, encode_text, init_model, load_checkpoint, save_checkpoint
from vqclone.pipeline import infer_tts, infer_vc, model_config_for

GRAD_TOL = 1e-4
GRAD_BUDGET_S = 120.0
E2E_BUDGET_S = 600.0
FRAMES_PER_SECOND = 100.0


def verdict(label: str, ok: bool, detail: str) -> None:
    record_acceptance(f"{label}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


# ------------------------------------------------------------ shared checks


_GRAD_RESULTS: dict[str, tuple[bool, str]] = {}


def gradient_fidelity(corpus, mode: str) -> tuple[bool, str]:
    if mode not in _GRAD_RESULTS:
        _GRAD_RESULTS[mode] = _gradient_fidelity(corpus, mode)
    return _GRAD_RESULTS[mode]


def _gradient_fidelity(corpus, mode: str) -> tuple[bool, str]:
    m = init_model(model_config_for(corpus, mode=mode))
    t0 = time.perf_counter()
    reports = check_all_losses(corpus, m)
    elapsed = time.perf_counter() - t0
    worst = {k: r.max_rel_error for k, r in reports.items()}
    entries = sum(r.n_checked for r in reports.values())
    ok = all(e < GRAD_TOL for e in worst.values()) and elapsed < GRAD_BUDGET_S
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    return ok, f"mode={mode}, {entries} entries, max rel err [{detail}], {elapsed:.1f}s (tol {GRAD_TOL:g}, budget {GRAD_BUDGET_S:.0f}s)"


def _bits(m, names):
    return {n: m.params[n].tobytes() for n in names}


def freeze_contracts(run, tmp_path) -> tuple[bool, str]:
    problems = []
    for sid, t in run.targets.items():
        ckpt = tmp_path / f"removed-{run.mode}-{sid}.ckpt"
        save_checkpoint(t.removed, ckpt)
        removed, _ = load_checkpoint(ckpt)
        non_sdec = [n for n in removed.params if not n.startswith("sdec.")]
        if _bits(removed, non_sdec) != _bits(t.adapted, non_sdec):
            problems.append(f"adapt changed non-SDec parameters (target {sid})")
        keep = [n for n in removed.params if not n.startswith(("sdec.", "voc."))]
        if _bits(removed, keep) != _bits(t.welded, keep):
            problems.append(f"weld changed non-SDec/Voc parameters (target {sid})")
        before = run.voc_trained
        non_sd = [n for n in before.params if not n.endswith((".spk_table", ".spk_proj"))]
        if _bits(before, non_sd) != _bits(removed, non_sd):
            problems.append(f"remove_sd changed non-SD parameters (target {sid})")
    detail = "; ".join(problems) or f"mode={run.mode}: adapt, weld and remove_sd leave the protected parameters bit-identical"
    return not problems, detail


def cloning_reports(run, corpus):
    return {
        sid: cloning_report(corpus.split(TEST), t.welded, corpus.speaker(sid), lambda u: corpus.speaker(u.speaker))
        for sid, t in run.targets.items()
    }


def content_ok(reports) -> tuple[bool, str]:
    ok = all(r["vc_content_error"] < 0.15 and r["tts_content_error"] < 0.15 for r in reports.values())
    detail = ", ".join(
        f"target {sid}: TTS {r['tts_content_error']:.3f} VC {r['vc_content_error']:.3f}" for sid, r in reports.items()
    )
    return ok, detail + " (threshold 0.15)"


# ---------------------------------------------------------------- criteria


def test_criterion_1_gradient_fidelity(corpus):
    ok, detail = gradient_fidelity(corpus, "vq")
    verdict("criterion 1 (gradient fidelity)", ok, detail)


def test_criterion_2_stop_gradient_semantics(corpus):
    m = init_model(model_config_for(corpus))
    batch = Batch.from_utterances(corpus.split(TRAIN)[:2])

    def grads_of(build):
        with ad.Graph() as g:
            loss = build()
        got = g.backward(loss)
        # leaves the loss never reached are reported as exact zeros
        return {n: got.get(n, np.zeros_like(v)) for n, v in m.params.items()}

    def vq_only():
        lat = encode_speech(batch.y, m)
        return vq_loss(lat.z, quantize(lat.z, m.leaf("codebook.entries")))

    def commit_only():
        lat = encode_speech(batch.y, m)
        return commitment_loss(lat.z, quantize(lat.z, m.leaf("codebook.entries")))

    def tie_only():
        return tie_loss(encode_text(batch.x, m), encode_speech(batch.y, m), "vq")

    g_vq, g_c, g_tie = grads_of(vq_only), grads_of(commit_only), grads_of(tie_only)
    senc = [n for n in m.params if n.startswith("senc.")]
    tenc = [n for n in m.params if n.startswith("tenc.")]
    checks = {
        "vq_loss -> encoder": all(np.all(g_vq[n] == 0.0) for n in senc),
        "vq_loss reaches codebook": bool(np.any(g_vq["codebook.entries"] != 0.0)),
        "commitment -> codebook": bool(np.all(g_c["codebook.entries"] == 0.0)),
        "commitment reaches encoder": any(np.any(g_c[n] != 0.0) for n in senc),
        "tie(vq) -> TEnc": all(np.all(g_tie[n] == 0.0) for n in tenc),
        "tie(vq) reaches SEnc": any(np.any(g_tie[n] != 0.0) for n in senc),
    }
    max_leak = max(
        max(float(np.abs(g_vq[n]).max()) for n in senc),
        float(np.abs(g_c["codebook.entries"]).max()),
        max(float(np.abs(g_tie[n]).max()) for n in tenc),
    )
    ok = all(checks.values())
    bad = [k for k, v in checks.items() if not v]
    verdict("criterion 2 (stop-gradient semantics)", ok, f"largest severed-path gradient {max_leak!r}" + (f"; failed: {bad}" if bad else ""))


def brute_force(z, entries):
    out = np.empty(len(z), dtype=np.int64)
    for t, frame in enumerate(z):
        best, best_k = math.inf, -1
        for k, e in enumerate(entries):
            d = math.fsum(((frame - e) ** 2).tolist())
            if d < best:
                best, best_k = d, k
        out[t] = best_k
    return out


def test_criterion_3_quantizer_correctness():
    rng = np.random.default_rng(2024)
    k, d, n = 160, 64, 1000
    entries = init_codebook(k, d, rng)
    z = rng.normal(0.0, 0.3, size=(n, d))
    tie_frames = {}
    # exact duplicates: frames sitting closest to a duplicated row
    for j, (lo, hi) in enumerate([(3, 97), (20, 21), (150, 159)]):
        entries[hi] = entries[lo]
        for t in range(j * 20, j * 20 + 20):
            z[t] = entries[lo] + rng.normal(0.0, 0.01, size=d)
            tie_frames[t] = lo
    # equidistant pairs on disjoint rows: dyadic centre c with codes at c + v and c - v,
    # so both squared distances are exactly sum(v**2) in floating point
    free = np.setdiff1d(np.arange(k), [3, 97, 20, 21, 150, 159])
    pairs = rng.permutation(free)[:100].reshape(50, 2)
    for n_pair, (i, j) in enumerate(pairs):
        c = np.round(rng.normal(0.0, 0.3, size=d) * 16) / 16
        v = rng.choice([-1.0, 1.0], size=d) / 16
        entries[i], entries[j] = c + v, c - v
        for t in (100 + 2 * n_pair, 101 + 2 * n_pair):
            z[t] = c
            tie_frames[t] = int(min(i, j))
    got = quantize(ad.Tensor(z), ad.Tensor(entries)).indices
    want = brute_force(z, entries)
    agree = float((got == want).mean())
    exact_ties = 0
    for t in range(100, 200):
        dists = [math.fsum(((z[t] - e) ** 2).tolist()) for e in entries]
        exact_ties += dists.count(min(dists)) == 2
    ties_ok = all(got[t] == lo for t, lo in tie_frames.items())
    ok = agree == 1.0 and ties_ok and exact_ties == 100
    verdict(
        "criterion 3 (quantizer vs brute force)",
        ok,
        f"{n} frames, K={k}, D={d}: agreement {agree * 100:.1f}%, {exact_ties} equidistant and 60 duplicate-row exact ties, lowest index chosen: {ties_ok}",
    )


def test_criterion_4_freeze_and_removal(vq_run, tmp_path):
    ok, detail = freeze_contracts(vq_run, tmp_path)
    verdict("criterion 4 (freeze/removal contracts)", ok, detail)


def test_criterion_5_end_to_end_cloning(vq_run, corpus):
    reports = cloning_reports(vq_run, corpus)
    wins_ok = all(r["win_rate"] >= 0.9 for r in reports.values())
    c_ok, c_detail = content_ok(reports)
    time_ok = vq_run.seconds < E2E_BUDGET_S
    wins = ", ".join(f"target {sid}: {r['win_rate'] * 100:.1f}%" for sid, r in reports.items())
    verdict(
        "criterion 5 (end-to-end cloning)",
        wins_ok and c_ok and time_ok,
        f"(a) VC closer to target than source: {wins} (need >= 90%); (b) {c_detail}; "
        f"train 500 + voc 200 + adapt 100 + weld 50 for {len(reports)} targets in {vq_run.seconds:.1f}s (budget {E2E_BUDGET_S:.0f}s)",
    )


def test_criterion_6_tie_loss_efficacy(vq_run, pipeline_runs, corpus):
    no_tie = pipeline_runs("vq", 0.0, clone_targets=False)
    with_beta = float(np.mean([r[2] for r in overlap_rows(corpus.split(TEST), vq_run.trained)]))
    without = float(np.mean([r[2] for r in overlap_rows(corpus.split(TEST), no_tie.trained)]))
    verdict(
        "criterion 6 (tie-loss efficacy)",
        with_beta > without,
        f"mean code overlap on {len(corpus.split(TEST))} held-out utterances: beta=0.25 {with_beta:.4f} vs beta=0 {without:.4f}",
    )


@pytest.mark.parametrize("mode", ["vq", "vae", "standard"])
def test_criterion_7_mode_parity(mode, pipeline_runs, corpus, tmp_path):
    run = pipeline_runs(mode)
    g_ok, g_detail = gradient_fidelity(corpus, mode)
    f_ok, f_detail = freeze_contracts(run, tmp_path)
    c_ok, c_detail = content_ok(cloning_reports(run, corpus))
    parts = [f"[1] {g_detail}", f"[4] {f_detail}", f"[5b] {c_detail}"]
    ok = g_ok and f_ok and c_ok
    if mode == "vq":
        rows_ok, frames = True, 0
        for t in run.targets.values():
            entries = t.welded.params["codebook.entries"]
            for u in corpus.split(TEST):
                for r in (infer_tts(u.x, t.welded), infer_vc(u.y, t.welded)):
                    frames += len(r.dec_in)
                    rows_ok &= r.dec_in.tobytes() == entries[r.codes.indices].tobytes()
        parts.append(f"decoder inputs bit-identical to codebook rows on {frames} frames: {rows_ok}")
        ok = ok and rows_ok
    verdict(f"criterion 7 (mode parity, {mode})", ok, "; ".join(parts))


def test_criterion_8_bit_rate_accounting(vq_run, corpus):
    m = vq_run.trained
    seqs = [bottleneck(encode_speech(u.y, m), m)[1] for u in corpus.split(TRAIN) + corpus.split(TEST)]
    rate = bit_rate(160, FRAMES_PER_SECOND, seqs)
    fixed_ok = rate["bits_per_frame"] == 8.0 and rate["fixed_bps"] == 8 * FRAMES_PER_SECOND
    bound_ok = rate["entropy_bps"] <= 8 * FRAMES_PER_SECOND
    usage = usage_stats(seqs, 160)
    uniform_observed = bool(np.all(usage.counts == usage.counts[0]))
    strict_ok = uniform_observed or rate["entropy_bps"] < 8 * FRAMES_PER_SECOND
    # equality needs uniform usage over a power-of-two code count; K=160 can only approach log2(160)
    uniform160 = bit_rate(160, FRAMES_PER_SECOND, [np.arange(160)])
    uniform256 = bit_rate(256, FRAMES_PER_SECOND, [np.arange(256)])
    skewed256 = bit_rate(256, FRAMES_PER_SECOND, [np.r_[np.arange(256), 7]])
    eq_ok = (
        math.isclose(uniform256["entropy_bps"], uniform256["fixed_bps"], rel_tol=1e-12)
        and skewed256["entropy_bps"] < skewed256["fixed_bps"]
        and uniform160["entropy_bps"] < uniform160["fixed_bps"]
    )
    ok = fixed_ok and bound_ok and strict_ok and eq_ok
    verdict(
        "criterion 8 (bit-rate accounting)",
        ok,
        f"K=160 -> {rate['bits_per_frame']:.0f} bits/frame, {rate['fixed_bps']:.0f} bps at {FRAMES_PER_SECOND:.0f} frames/s; "
        f"trained code stream entropy {rate['entropy_bits_per_frame']:.3f} bits/frame = {rate['entropy_bps']:.1f} bps "
        f"({usage.used_fraction * 160:.0f} codes used); uniform K=160 reaches {uniform160['entropy_bits_per_frame']:.3f}; "
        f"uniform K=256 equals fixed rate, one extra frame breaks equality",
    )


def test_criterion_9_reproducibility(tmp_path):
    commands = ("gen-data", "train", "train-voc", "adapt", "weld", "infer-tts", "infer-vc", "analyze")
    trees = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in commands:
            assert cli_main([cmd, "--out", str(out), "--seed", "0"]) == 0, cmd
        trees.append(
            {
                p.relative_to(out).as_posix(): p.read_bytes()
                for p in sorted(out.rglob("*"))
                if p.is_file() and p.suffix in (".ckpt", ".csv", ".svg", ".json", ".ini")
            }
        )
    a, b = trees
    ckpts = [k for k in a if k.endswith(".ckpt")]
    csvs = [k for k in a if k.endswith(".csv")]
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not differing and len(ckpts) == 4 and len(csvs) > 0
    verdict(
        "criterion 9 (reproducibility)",
        ok,
        f"two default-config CLI runs: {len(ckpts)} checkpoints and {len(csvs)} CSVs compared byte-for-byte, "
        f"{len(differing)} differ" + (f" ({differing[:5]})" if differing else ""),
    )
