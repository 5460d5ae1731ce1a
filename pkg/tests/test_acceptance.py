"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Criteria 7 to 10 share two full runs of the command-line pipeline on the
default synthetic corpus (configs/desk.ini), single-threaded.
"""

import csv
import json
import math
import os
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from uapforge import audio, corpus, evalharness as ev, gradcore as gc, spkmodel, uaptrain
from uapforge.audio import SAMPLE_RATE, AudioClip
from uapforge.gradcore import Tensor
from uapforge.spkmodel import SpeakerModel

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
PIPELINE = ["gen-data", "train-model", "train-uap --loss exp_tv", "train-uap --loss l2", "evaluate", "compare"]


@contextmanager
def criterion(label: str, budget_s: float = None):
    """Record PASS/FAIL for one criterion; runtime over budget is a failure."""
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - t0
        if budget_s is not None:
            assert elapsed < budget_s, f"runtime {elapsed:.1f}s over budget {budget_s}s"
    except BaseException as exc:
        record_criterion(f"FAIL {label}: {exc}".splitlines()[0])
        raise
    detail = info.get("detail", "")
    record_criterion(f"PASS {label} ({time.perf_counter() - t0:.1f}s){': ' + detail if detail else ''}")


# 1 ----------------------------------------------------------------------------------


def _per_op_cases(rng):
    k = Tensor(rng.normal(size=(3, 2, 4)))
    w = Tensor(rng.normal(size=(5, 6)))
    c = Tensor(rng.normal(size=6))
    return {
        "tanh": (lambda t: gc.sum(gc.tanh(t)), rng.normal(size=6)),
        "exp_mul": (lambda t: gc.sum(gc.mul(gc.exp(t), t)), rng.normal(size=6)),
        "div_sqrt": (lambda t: gc.sum(gc.div(gc.sqrt(gc.mul(t, t) + 1.0), 3.0)), rng.normal(size=6)),
        "abs_away_from_0": (lambda t: gc.sum(gc.abs(t)), rng.uniform(0.5, 1.0, 6) * rng.choice([-1, 1], 6)),
        "matmul": (lambda t: gc.sum(gc.tanh(gc.matmul(w, gc.reshape(t, (6, 1))))), rng.normal(size=6)),
        "conv1d": (lambda t: gc.sum(gc.tanh(gc.conv1d(gc.reshape(t, (2, -1)), k, stride=2))), rng.normal(size=24)),
        "stat_pool": (lambda t: gc.sum(gc.stat_pool(gc.reshape(t, (2, -1)))), rng.normal(size=20)),
        "norm": (lambda t: gc.norm(t), rng.normal(size=6)),
        "cosine": (lambda t: gc.cosine_similarity(t, c), rng.normal(size=6)),
        "tile_roll_take": (lambda t: gc.sum(gc.mul(gc.tile(gc.roll(t, 2), 15, 1), gc.take(gc.tile(t, 20), 2, 17))),
                           rng.normal(size=6)),
        "cross_entropy": (lambda t: gc.cross_entropy(t, 2), rng.normal(size=6)),
    }


def test_criterion_1_gradient_correctness():
    with criterion("1 gradient correctness", budget_s=30) as info:
        worst_op, worst_e2e = 0.0, 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            for name, (fn, x0) in _per_op_cases(rng).items():
                rep = gc.finite_diff_check(fn, x0, rel_tol=1e-4)
                assert rep.passed, f"seed {seed} op {name}: rel err {rep.max_rel_error:.2e}"
                worst_op = max(worst_op, rep.max_rel_error)
            model = SpeakerModel.init(3, seed=seed, kernels=[8, 4], strides=[4, 2], channels=[1, 4, 4], emb_dim=6)
            x = rng.normal(size=160) * 0.3
            target = Tensor(spkmodel.embed(model, x))
            rep = gc.finite_diff_check(
                lambda p: gc.cosine_similarity(target, model.embed_tensor(gc.add(Tensor(x), gc.tile(p, 160)))),
                rng.uniform(-0.05, 0.05, 24), rel_tol=1e-3)
            assert rep.passed, f"seed {seed} end-to-end: rel err {rep.max_rel_error:.2e}"
            worst_e2e = max(worst_e2e, rep.max_rel_error)
        info["detail"] = f"max rel err per-op {worst_op:.1e} (<1e-4), end-to-end {worst_e2e:.1e} (<1e-3)"


# 2 ----------------------------------------------------------------------------------


def _phi_independent(x, y):
    sgn = lambda v: (v > 0) - (v < 0)
    if abs(y) > abs(x):
        return math.exp(abs(y) - abs(x)) - 1.0
    if sgn(x) != sgn(y) and sgn(x) != 0 and sgn(y) != 0:
        return math.exp(abs(y)) - 1.0
    return 0.0


def test_criterion_2_phi_oracle():
    with criterion("2 phi oracle table", budget_s=1) as info:
        table = [((0.1, 0.2), math.exp(0.1) - 1), ((0.2, 0.1), 0.0), ((0.2, -0.1), math.exp(0.1) - 1), ((0.0, 0.0), 0.0)]
        for (x, y), want in table:
            assert abs(uaptrain.phi(x, y) - want) <= 1e-12, (x, y)
        rng = np.random.default_rng(2024)
        pts = rng.uniform(-0.05, 0.05, size=(1000, 2))
        pts[::9, 0] = 0.0
        pts[4::9, 1] = 0.0
        worst = max(abs(uaptrain.phi(x, y) - _phi_independent(x, y)) for x, y in pts.tolist())
        assert worst <= 1e-12
        info["detail"] = f"4 examples + 1000 points, max |diff| {worst:.1e}"


# 3 ----------------------------------------------------------------------------------


def test_criterion_3_tiling_comb():
    with criterion("3 tiling comb property", budget_s=5) as info:
        rng = np.random.default_rng(3)
        worst = 0.0
        for i in range(50):
            l = (4, 8, 16)[i % 3]
            n = 4 * l
            x = audio.tile_patch(rng.normal(size=l), n)
            power = np.array([abs(sum(x[t] * np.exp(-2j * np.pi * k * t / n) for t in range(n))) ** 2
                              for k in range(n)])
            off = power[np.arange(n) % (n // l) != 0].sum() / power.sum()
            worst = max(worst, off)
        assert worst < 1e-10
        info["detail"] = f"max off-comb energy fraction {worst:.1e} (<1e-10)"


# 4 ----------------------------------------------------------------------------------


def test_criterion_4_snr_identities():
    with criterion("4 SNR identities", budget_s=1) as info:
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(20):
            x, d = rng.normal(size=1000), rng.normal(size=1000) * 0.01
            for alpha in (0.1, 0.5, 3.0, 100.0):
                gap = abs(audio.snr_db(x, alpha * d) - (audio.snr_db(x, d) - 20 * math.log10(alpha)))
                worst = max(worst, gap)
        assert worst <= 1e-9
        x = rng.normal(size=1000)
        assert audio.snr_db(x, x[::-1].copy()) == 0.0
        info["detail"] = f"scaling law max err {worst:.1e} dB, equal-norm = 0 dB"


# 5 ----------------------------------------------------------------------------------


def test_criterion_5_loudness():
    with criterion("5 loudness anchor", budget_s=5) as info:
        t = np.arange(20 * SAMPLE_RATE) / SAMPLE_RATE
        tone = math.sqrt(2) * 10 ** (-18 / 20) * np.sin(2 * math.pi * 997 * t)
        anchor = audio.integrated_loudness(tone)
        assert abs(anchor + 18) <= 0.5, anchor
        worst_rt, worst_idem = 0.0, 0.0
        for seed in range(5):
            clip = corpus.synthesize_utterance(corpus.generate_speaker(seed), 6.0, seed)
            for target in (-30.0, -23.0, -16.0):
                once = audio.normalize_loudness(clip, target)
                twice = audio.normalize_loudness(once, target)
                worst_rt = max(worst_rt, abs(audio.integrated_loudness(once.samples) - target))
                worst_idem = max(worst_idem, abs(audio.integrated_loudness(twice.samples)
                                                 - audio.integrated_loudness(once.samples)))
        assert worst_rt <= 0.5 and worst_idem <= 0.5
        info["detail"] = f"anchor {anchor:.2f} LUFS, round-trip err {worst_rt:.2e} LU, idempotence {worst_idem:.2e} LU"


# 6 ----------------------------------------------------------------------------------


def test_criterion_6_preprocessing():
    with criterion("6 preprocessing contract", budget_s=10) as info:
        spec = corpus.SplitSpec(test_speakers=(4, 5), val_per_speaker=1, long_per_test_speaker=1)
        m = corpus.build_synthetic_corpus(6, 4, (3.0, 12.0), spec, seed=6)
        pc = corpus.preprocess_corpus(m, -23.0, 20.0)
        win = int(0.2 * SAMPLE_RATE)
        n_train = 0
        for e in m.entries:
            clip = pc.get(e.clip_id)
            raw = pc.clips[e.clip_id]
            if e.split == "train":
                n_train += 1
                assert len(clip) == 20 * SAMPLE_RATE and clip.padded
                # padding repeats content rather than inserting zeros
                np.testing.assert_array_equal(clip.samples, np.resize(raw.samples, len(clip)))
                frames = np.abs(clip.samples[: len(clip) // win * win]).reshape(-1, win)
                assert frames.max(axis=1).min() > 0.0
            else:
                assert not clip.padded and len(clip) == len(raw)
        model = SpeakerModel.init(2, seed=0)
        enr = spkmodel.EnrollmentSet({"a": np.eye(64)[0]}, 1)
        with pytest.raises(AssertionError, match="padded"):
            ev.fooling_rate(model, enr, pc.split("train")[:1], np.ones(8))
        info["detail"] = f"{n_train} padded train clips without silence; eval clips unpadded; padded input rejected"


# 7-10: pipeline -----------------------------------------------------------------------


def _run_pipeline(out: Path) -> float:
    env = dict(os.environ, UAPFORGE_THREADS="1")
    t0 = time.perf_counter()
    for step in PIPELINE:
        argv = [sys.executable, "-m", "uapforge.cli", *step.split(), "-c", str(DESK_CONFIG), "--out", str(out)]
        proc = subprocess.run(argv, env=env, capture_output=True, text=True)
        (out.parent / f"{out.name}-{step.replace(' ', '_')}.log").write_text(proc.stdout + proc.stderr)
        if proc.returncode != 0:
            raise RuntimeError(f"`uapforge {step}` exited {proc.returncode}: {proc.stderr.strip()[-500:]}")
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    out = root / "run1"
    return out, _run_pipeline(out)


def _report(out: Path) -> dict:
    return json.loads((out / "report" / "report.json").read_text())


@pytest.mark.slow
def test_criterion_7a_model_accuracy(pipeline_run):
    out, _ = pipeline_run
    with criterion("7a held-out identification accuracy >= 90%") as info:
        model = spkmodel.load_model(out / "model.bin")
        acc = model.metadata["gate_accuracy"]
        assert acc >= 0.9, f"accuracy {acc:.4f}"
        info["detail"] = f"accuracy {acc:.4f} (gallery {model.metadata.get('gallery')})"


def _held_out(out: Path):
    from uapforge import cli
    cfg = cli.load_config(str(DESK_CONFIG), {("run", "out_dir"): str(out)})
    model = spkmodel.load_model(out / "model.bin")
    manifest = corpus.CorpusManifest.load(out / "corpus" / "manifest.tsv")
    prepared = cli._prepare(cfg, manifest, ("val", "test"))
    return model, cli.build_gallery(cfg, model, prepared)


@pytest.mark.slow
def test_criterion_7b_fooling_rate(pipeline_run):
    out, elapsed = pipeline_run
    with criterion("7b exp_tv FR >= 50% on held-out speakers, zero patch FR = 0%") as info:
        rep = _report(out)
        assert rep["fooling_rate"] >= 50.0, f"FR {rep['fooling_rate']}"
        model, gallery = _held_out(out)
        probes = gallery.probes
        clean = [spkmodel.identify(model, c, gallery.enrollment)[0] for c in probes]
        zero = [spkmodel.identify(model, c.samples + audio.tile_patch(np.zeros(3200), len(c)),
                                  gallery.enrollment)[0] for c in probes]
        zero_fr = 100.0 * sum(a != b for a, b in zip(clean, zero)) / len(probes)
        assert zero_fr == 0.0
        assert elapsed < 1800, f"pipeline took {elapsed:.0f}s"
        info["detail"] = (f"FR {rep['fooling_rate']}% on {len(probes)} probes, zero-patch FR {zero_fr}%, "
                          f"pipeline {elapsed:.0f}s (<1800s)")


@pytest.mark.slow
def test_criterion_7c_snr_at_matched_fr(pipeline_run):
    out, _ = pipeline_run
    with criterion("7c exp_tv SNR >= l2 SNR at matched FR (+-5)") as info:
        doc = json.loads((out / "compare" / "compare.json").read_text())
        cols = doc["columns"]
        rows = {(r[cols.index("variant")], r[cols.index("condition")]): dict(zip(cols, r)) for r in doc["rows"]}
        e, l = rows[("exp_tv", "matched")], rows[("l2", "matched")]
        assert abs(e["FR"] - l["FR"]) <= 5.0, f"FRs not matched: {e['FR']} vs {l['FR']}"
        assert e["SNR"] >= l["SNR"], f"exp_tv SNR {e['SNR']} < l2 SNR {l['SNR']}"
        info["detail"] = (f"FR {e['FR']} vs {l['FR']} (scale {e['scale']}/{l['scale']}), "
                          f"SNR {e['SNR']} dB vs {l['SNR']} dB")


@pytest.mark.slow
def test_criterion_8_length_robustness(pipeline_run):
    out, _ = pipeline_run
    with criterion("8 length sweep spread <= 20 points, five content-controlled rows") as info:
        rows = list(csv.DictReader((out / "report" / "sweep.csv").open()))
        assert [float(r["length_s"]) for r in rows] == [3.0, 5.0, 10.0, 15.0, 20.0]
        assert len({r["clips_hash"] for r in rows}) == 1 and rows[0]["clips_hash"]
        frs = [float(r["fooling_rate"]) for r in rows]
        spread = max(frs) - min(frs)
        assert spread <= 20.0, f"spread {spread}"
        info["detail"] = f"FR by length {frs}, spread {spread} on {rows[0]['n_clips']} clips"


@pytest.mark.slow
def test_criterion_9_similarity_ordering(pipeline_run):
    out, _ = pipeline_run
    with criterion("9 similarity ordering") as info:
        h = _report(out)["histograms"]
        orig, anon, pair = h["orig_enroll"]["mean"], h["anon_enroll"]["mean"], h["anon_anon"]["mean"]
        assert orig - anon >= 0.1, f"orig {orig} - anon {anon} < 0.1"
        assert pair > anon, f"anon-anon {pair} <= anon-enroll {anon}"
        info["detail"] = f"Orig-Enroll {orig}, Anon-Enroll {anon}, Anon-Anon {pair}"


@pytest.mark.slow
def test_criterion_10_determinism(pipeline_run, tmp_path_factory):
    out, _ = pipeline_run
    with criterion("10 determinism: byte-identical report.json") as info:
        second = tmp_path_factory.mktemp("acceptance-rerun") / "run2"
        elapsed = _run_pipeline(second)
        a = (out / "report" / "report.json").read_bytes()
        b = (second / "report" / "report.json").read_bytes()
        assert a == b, "report.json differs between identical runs"
        info["detail"] = f"{len(a)} bytes identical; rerun {elapsed:.0f}s"
