"""Evaluation protocol: fooling rate, SNR, length sweep, similarity histograms, reports.

Fooling is measured against the model's own clean prediction, so a clip the
model already misidentifies still counts as fooled only if the patch changes
the answer. Evaluation clips are never padded.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import audio
from ._parallel import ordered_map
from .audio import SAMPLE_RATE, AudioClip
from .spkmodel import EnrollmentSet, SpeakerModel, embed, embed_many, identify_embedding

REPORT_VERSION = 1
DEFAULT_LENGTHS = (3.0, 5.0, 10.0, 15.0, 20.0)
HIST_EDGES = np.linspace(-1.0, 1.0, 51)
HIST_NAMES = ("orig_enroll", "anon_enroll", "anon_anon")
METRIC_COLUMNS = ("FR", "SNR", "TV_proxy")


class GateError(RuntimeError):
    """The speaker model is not accurate enough to make an attack meaningful."""

    def __init__(self, accuracy: float, threshold: float):
        super().__init__(f"identification accuracy {accuracy:.4f} below gate {threshold:.2f}")
        self.accuracy = accuracy
        self.threshold = threshold


class ReportError(ValueError):
    pass


def check_gate(accuracy: float, threshold: float = 0.9, override: bool = False) -> None:
    if accuracy < threshold and not override:
        raise GateError(accuracy, threshold)


def _require_unpadded(clips: Sequence[AudioClip]) -> None:
    for c in clips:
        if getattr(c, "padded", False):
            raise AssertionError(f"padded clip {c.source or c.speaker_id!r} reached evaluation")


def clip_hash(clip) -> str:
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip)
    return hashlib.sha256(np.ascontiguousarray(samples, dtype="<f8").tobytes()).hexdigest()


def _predict(model: SpeakerModel, enrollment: EnrollmentSet, signals: Sequence[np.ndarray]) -> list:
    return [identify_embedding(e, enrollment)[0] for e in embed_many(model, signals)]


def _perturbed(clips: Sequence[AudioClip], patch: np.ndarray, scale: float = 1.0) -> list:
    return [c.samples + scale * audio.tile_patch(patch, len(c)) for c in clips]


def _values(patch) -> np.ndarray:
    return np.asarray(getattr(patch, "values", patch), dtype=np.float64)


def fooling_rate(model: SpeakerModel, enrollment: EnrollmentSet, clips: Sequence[AudioClip], patch,
                 clean_predictions: Optional[list] = None, scale: float = 1.0) -> float:
    """Percentage of clips whose identified speaker changes when the tiled patch is added."""
    clips = list(clips)
    if not clips:
        raise ValueError("fooling_rate needs at least one clip")
    _require_unpadded(clips)
    values = _values(patch)
    if not np.any(values) or scale == 0.0:
        # x + 0 == x bit for bit, so every prediction is unchanged
        return 0.0
    if clean_predictions is None:
        clean_predictions = _predict(model, enrollment, [c.samples for c in clips])
    adv = _predict(model, enrollment, _perturbed(clips, values, scale))
    return 100.0 * sum(a != b for a, b in zip(adv, clean_predictions)) / len(clips)


def snr_stats(clips: Sequence[AudioClip], patch, scale: float = 1.0) -> tuple:
    values = _values(patch)
    snrs = np.array([audio.snr_db(c.samples, scale * audio.tile_patch(values, len(c))) for c in clips])
    if np.all(np.isinf(snrs)):
        return float("inf"), 0.0  # zero patch
    return float(np.mean(snrs)), float(np.std(snrs))


@dataclass
class SweepRow:
    length_s: float
    fooling_rate: float
    n_clips: int
    clips_hash: str


def length_sweep(model: SpeakerModel, enrollment: EnrollmentSet, pool: Sequence[AudioClip], patch,
                 lengths: Sequence[float] = DEFAULT_LENGTHS) -> list:
    """FR per length, each row truncating the same pool of long clips.

    ``clips_hash`` identifies the underlying full-length audio and is equal on
    every row, which is what makes the sweep content-controlled.
    """
    pool = list(pool)
    if not pool:
        raise ValueError("length sweep needs a nonempty pool")
    _require_unpadded(pool)
    longest = max(lengths)
    need = int(round(longest * SAMPLE_RATE))
    short = [c for c in pool if len(c) < need]
    if short:
        raise ValueError(f"{len(short)} pool clips shorter than the longest sweep length {longest} s")
    ident = hashlib.sha256("".join(clip_hash(c) for c in pool).encode()).hexdigest()
    rows = []
    for length in lengths:
        n = int(round(length * SAMPLE_RATE))
        cut = [audio.truncate(c, n) for c in pool]
        rows.append(SweepRow(float(length), fooling_rate(model, enrollment, cut, patch), len(cut), ident))
    return rows


@dataclass
class Histogram:
    name: str
    counts: np.ndarray
    mean: float
    n: int
    edges: np.ndarray = field(default_factory=lambda: HIST_EDGES.copy())


def _histogram(name: str, values: Sequence[float]) -> Histogram:
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    counts, _ = np.histogram(v, bins=HIST_EDGES)
    return Histogram(name, counts, float(v.mean()) if v.size else float("nan"), int(v.size))


def similarity_analysis(model: SpeakerModel, enrollment: EnrollmentSet, eval_by_speaker: dict, patch,
                        eval_count: int = 20) -> dict:
    """Cosine-similarity distributions for the clean and anonymized probes.

    orig_enroll: clean probe vs. its speaker's enrollment vector.
    anon_enroll: anonymized probe vs. the same enrollment vector.
    anon_anon:   pairs of anonymized probes of one speaker.
    """
    values = _values(patch)
    orig, anon, pairs = [], [], []
    for spk in sorted(eval_by_speaker):
        clips = list(eval_by_speaker[spk])[:eval_count]
        if len(clips) < eval_count:
            raise ValueError(f"speaker {spk} has {len(clips)} evaluation clips, need {eval_count}")
        _require_unpadded(clips)
        e = enrollment.vectors[spk]
        clean = embed_many(model, [c.samples for c in clips])
        adv = embed_many(model, _perturbed(clips, values))
        orig.extend(clean @ e)
        anon.extend(adv @ e)
        gram = adv @ adv.T
        pairs.extend(gram[np.triu_indices(len(clips), k=1)])
    return {name: _histogram(name, vals) for name, vals in zip(HIST_NAMES, (orig, anon, pairs))}


def matched_scale(model: SpeakerModel, enrollment: EnrollmentSet, clips: Sequence[AudioClip], patch,
                  target_fr: float, tolerance: float = 5.0, iterations: int = 12) -> tuple:
    """Largest-step bisection on alpha in (0, 1] so FR(alpha * patch) is within tolerance of target.

    Returns ``(alpha, fr)``. A patch whose full-strength FR is already within
    tolerance keeps alpha = 1.
    """
    clips = list(clips)
    clean = _predict(model, enrollment, [c.samples for c in clips])
    fr = fooling_rate(model, enrollment, clips, patch, clean)
    if abs(fr - target_fr) <= tolerance or fr < target_fr:
        return 1.0, fr
    lo, hi = 0.0, 1.0
    best = (1.0, fr)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        fr = fooling_rate(model, enrollment, clips, patch, clean, scale=mid)
        if abs(fr - target_fr) < abs(best[1] - target_fr):
            best = (mid, fr)
        if abs(fr - target_fr) <= tolerance:
            return mid, fr
        if fr > target_fr:
            hi = mid
        else:
            lo = mid
    return best


@dataclass
class VariantRow:
    variant: str
    fooling_rate: float
    snr_mean_db: float
    snr_std_db: float
    tv_proxy: float
    scale: float = 1.0

    def metrics(self) -> list:
        return [self.fooling_rate, self.snr_mean_db, self.tv_proxy]


def variant_row(name: str, model: SpeakerModel, enrollment: EnrollmentSet, clips: Sequence[AudioClip],
                patch, scale: float = 1.0) -> VariantRow:
    values = _values(patch)
    fr = fooling_rate(model, enrollment, clips, values, scale=scale)
    mean, std = snr_stats(clips, values, scale)
    return VariantRow(name, fr, mean, std, audio.total_variation(scale * values), scale)


def compare_variants(model: SpeakerModel, enrollment: EnrollmentSet, clips: Sequence[AudioClip],
                     patches: dict, tolerance: float = 5.0) -> dict:
    """Side-by-side FR / SNR / TV rows, raw and at matched fooling rate.

    For the matched table the stronger patches are scaled down until their FR
    is within ``tolerance`` points of the weakest patch.
    """
    names = sorted(patches)
    raw = [variant_row(n, model, enrollment, clips, patches[n]) for n in names]
    target = min(r.fooling_rate for r in raw)
    matched = []
    for r in raw:
        if r.fooling_rate - target <= tolerance:
            matched.append(r)
            continue
        alpha, _ = matched_scale(model, enrollment, clips, patches[r.variant], target, tolerance)
        matched.append(variant_row(r.variant, model, enrollment, clips, patches[r.variant], alpha))
    return {"raw": raw, "matched": matched, "target_fr": target, "tolerance": tolerance}


# reports -----------------------------------------------------------------------------


def fmt(x) -> str:
    """9 significant digits, stable across platforms."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.9g}"


def _round(obj):
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_round(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return fmt(x) if not math.isfinite(x) else float(fmt(x))
    return obj


PROVENANCE_KEYS = ("model_hash", "patch_hash", "manifest_hash")


@dataclass
class EvalReport:
    fooling_rate: float
    snr_mean: float
    snr_std: float
    per_length: list
    histograms: dict
    provenance: dict
    variants: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.fooling_rate <= 100.0:
            raise ReportError(f"fooling rate {self.fooling_rate} outside [0, 100]")
        for h in self.histograms.values():
            if int(np.sum(h.counts)) != h.n:
                raise ReportError(f"histogram {h.name} counts do not sum to {h.n}")

    def to_dict(self) -> dict:
        return _round({
            "version": REPORT_VERSION,
            "fooling_rate": self.fooling_rate,
            "snr_mean_db": self.snr_mean,
            "snr_std_db": self.snr_std,
            "per_length": [{"length_s": r.length_s, "fooling_rate": r.fooling_rate, "n_clips": r.n_clips,
                            "clips_hash": r.clips_hash} for r in self.per_length],
            "histograms": {k: {"mean": h.mean, "n": h.n, "counts": h.counts}
                           for k, h in sorted(self.histograms.items())},
            "histogram_edges": HIST_EDGES,
            "variants": [vars(v) for v in self.variants],
            "provenance": dict(sorted(self.provenance.items())),
            "extra": self.extra,
        })


def _csv(rows: list, header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if not isinstance(v, str) else v for v in r])
    return buf.getvalue()


def emit_report(report: EvalReport, out_dir) -> dict:
    """Write report.json, metrics.csv, histograms.csv and sweep.csv; returns their paths."""
    missing = [k for k in PROVENANCE_KEYS if not report.provenance.get(k)]
    if missing:
        raise ReportError(f"refusing to emit report without provenance: {', '.join(missing)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = report.variants or [VariantRow("patch", report.fooling_rate, report.snr_mean, report.snr_std,
                                              float("nan"))]
    files = {
        "report.json": json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
        "metrics.csv": _csv([[v.variant, v.scale] + v.metrics() for v in variants],
                            ("variant", "scale") + METRIC_COLUMNS),
        "sweep.csv": _csv([[r.length_s, r.fooling_rate, r.n_clips, r.clips_hash] for r in report.per_length],
                          ("length_s", "fooling_rate", "n_clips", "clips_hash")),
        "histograms.csv": _csv([[name, HIST_EDGES[i], HIST_EDGES[i + 1], int(h.counts[i])]
                                for name, h in sorted(report.histograms.items())
                                for i in range(len(h.counts))],
                               ("histogram", "bin_lo", "bin_hi", "count")),
    }
    paths = {}
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths[name] = p
    return paths


def write_comparison(result: dict, out_dir) -> dict:
    """compare.csv / compare.json: one row per (variant, raw|matched)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[r.variant, cond, r.scale] + r.metrics() for cond in ("raw", "matched") for r in result[cond]]
    header = ("variant", "condition", "scale") + METRIC_COLUMNS
    doc = _round({"version": REPORT_VERSION, "columns": list(header), "rows": rows,
                  "target_fr": result["target_fr"], "tolerance": result["tolerance"]})
    paths = {"compare.csv": out / "compare.csv", "compare.json": out / "compare.json"}
    paths["compare.csv"].write_text(_csv(rows, header))
    paths["compare.json"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return paths
