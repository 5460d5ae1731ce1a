"""Fast invariant suite behind ``uapforge selftest``.

Each check is a zero-argument function returning ``(ok, detail)``. Output is a
pure function of the code, so two runs print identical text.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import audio, gradcore as gc, uaptrain
from .spkmodel import SpeakerModel, embed


def _gradients():
    rng = np.random.default_rng(0)
    worst = 0.0
    kernel = gc.Tensor(rng.normal(size=(2, 1, 3)))
    ops = [
        lambda t: gc.sum(gc.tanh(t)),
        lambda t: gc.sum(gc.mul(gc.exp(t), t)),
        lambda t: gc.norm(t),
        lambda t: gc.sum(gc.conv1d(gc.reshape(t, (1, -1)), gc.Tensor(rng.normal(size=(2, 1, 3))), stride=2)),
    ]
    for op in ops:
        rep = gc.finite_diff_check(op, rng.normal(size=12), rel_tol=1e-4)
        if not rep.passed:
            return False, f"per-op max rel err {rep.max_rel_error:.2e}"
        worst = max(worst, rep.max_rel_error)
    model = SpeakerModel.init(2, seed=1, kernels=[8, 4], strides=[4, 2], channels=[1, 3, 3], emb_dim=4)
    x = rng.normal(size=96) * 0.2
    clean = embed(model, x)
    rep = gc.finite_diff_check(lambda p: uaptrain.fooling_loss(model, x, p, clean), rng.uniform(-0.05, 0.05, 16),
                               rel_tol=1e-3)
    if not rep.passed:
        return False, f"end-to-end max rel err {rep.max_rel_error:.2e}"
    return True, f"max rel err {max(worst, rep.max_rel_error):.1e}"


def _phi_reference(x: float, y: float) -> float:
    sx, sy = np.sign(x), np.sign(y)
    if abs(y) > abs(x):
        return math.expm1(abs(y) - abs(x))
    return math.expm1(abs(y)) if sx * sy < 0 else 0.0


def _phi_oracle():
    table = [((0.1, 0.2), math.exp(0.1) - 1), ((0.2, 0.1), 0.0), ((0.2, -0.1), math.exp(0.1) - 1), ((0.0, 0.0), 0.0)]
    for (x, y), want in table:
        if abs(uaptrain.phi(x, y) - want) > 1e-12:
            return False, f"phi({x}, {y}) = {uaptrain.phi(x, y)!r}, want {want!r}"
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.02, 0.02, size=(1000, 2))
    pts[::7, 0] = 0.0
    for x, y in pts.tolist():
        if abs(uaptrain.phi(x, y) - _phi_reference(x, y)) > 1e-12:
            return False, f"phi({x!r}, {y!r}) disagrees with reference"
    return True, "4 table + 1000 random points"


def _tiling_comb():
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(50):
        l = (4, 8, 16)[i % 3]
        n = 4 * l
        x = audio.tile_patch(rng.normal(size=l), n)
        k = np.arange(n)
        spectrum = np.abs(np.exp(-2j * np.pi * np.outer(k, k) / n) @ x) ** 2
        off = spectrum[k % (n // l) != 0].sum() / spectrum.sum()
        worst = max(worst, off)
    return worst < 1e-10, f"max off-comb energy fraction {worst:.1e}"


def _snr_identities():
    rng = np.random.default_rng(3)
    x, d = rng.normal(size=500), rng.normal(size=500) * 0.01
    for alpha in (0.5, 2.0, 10.0):
        gap = audio.snr_db(x, alpha * d) - (audio.snr_db(x, d) - 20 * math.log10(alpha))
        if abs(gap) > 1e-9:
            return False, f"scaling law off by {gap:.2e} dB at alpha={alpha}"
    eq = audio.snr_db(x, -x)
    if eq != 0.0:
        return False, f"equal-norm snr = {eq!r}"
    return True, "scaling law and equal-norm case"


def _loudness_anchor():
    t = np.arange(10 * audio.SAMPLE_RATE) / audio.SAMPLE_RATE
    tone = math.sqrt(2) * 10 ** (-18 / 20) * np.sin(2 * math.pi * 997 * t)
    lufs = audio.integrated_loudness(tone)
    if not abs(lufs + 18.0) <= 0.5:
        return False, f"997 Hz at -18 dBFS measured {lufs:.3f} LUFS"
    clip = audio.normalize_loudness(audio.AudioClip(tone * 0.3), -23.0)
    got = audio.integrated_loudness(clip.samples)
    if not abs(got + 23.0) <= 0.5:
        return False, f"normalized to {got:.3f} LUFS"
    return True, f"{lufs:.2f} LUFS"


CHECKS: dict[str, Callable[[], tuple]] = {
    "gradients": _gradients,
    "phi_oracle": _phi_oracle,
    "tiling_comb": _tiling_comb,
    "snr_identities": _snr_identities,
    "loudness_anchor": _loudness_anchor,
}


def run_selftest(emit=print) -> list:
    """Run every check; returns the names of failures."""
    failed = []
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        emit(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failed.append(name)
    return failed
