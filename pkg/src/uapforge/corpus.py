"""Synthetic multi-speaker corpus, on-disk WAV ingestion and preprocessing.

Synthetic speakers are a harmonic source at a per-speaker pitch pushed through
three formant resonators, plus breath noise and a syllable-rate envelope. They
stand in for a real corpus; ``ingest_wav_corpus`` is the plug-in point for one.

Manifest files are UTF-8 text: one JSON header line, one column-name line,
then tab-separated rows ``clip_id, speaker_id, split, duration_s, source``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from . import audio
from ._parallel import ordered_map
from .audio import SAMPLE_RATE, AudioClip

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "uapforge-manifest"
MANIFEST_VERSION = 1
COLUMNS = ("clip_id", "speaker_id", "split", "duration_s", "source")
SPLITS = ("train", "val", "test")
SYNTH_PREFIX = "synth:"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0_hz: float
    formants: tuple
    bandwidths: tuple
    jitter: float
    noise_mix: float
    seed: int


def generate_speaker(seed: int, speaker_id: Optional[str] = None) -> SpeakerProfile:
    rng = np.random.default_rng(seed)
    f0 = rng.uniform(80.0, 300.0)
    formants = (rng.uniform(300.0, 850.0), rng.uniform(900.0, 2200.0), rng.uniform(2300.0, 3400.0))
    bandwidths = tuple(rng.uniform(60.0, 160.0, size=3))
    return SpeakerProfile(
        speaker_id=speaker_id or f"spk-{seed}",
        f0_hz=float(f0),
        formants=tuple(float(f) for f in formants),
        bandwidths=tuple(float(b) for b in bandwidths),
        jitter=float(rng.uniform(0.005, 0.03)),
        noise_mix=float(rng.uniform(0.0, 0.3)),
        seed=int(seed),
    )


def _smooth_noise(rng, n: int, rate_hz: float) -> np.ndarray:
    """Unit-ish random curve varying at roughly ``rate_hz``, linearly interpolated."""
    knots = max(2, int(math.ceil(n / SAMPLE_RATE * rate_hz)) + 2)
    values = rng.normal(size=knots)
    return np.interp(np.arange(n), np.linspace(0, n, knots), values)


def _resonator(freq: float, bandwidth: float):
    r = math.exp(-math.pi * bandwidth / SAMPLE_RATE)
    theta = 2 * math.pi * freq / SAMPLE_RATE
    return [1.0 - r], [1.0, -2.0 * r * math.cos(theta), r * r]


def synthesize_utterance(profile: SpeakerProfile, duration_s: float, utt_seed: int) -> AudioClip:
    if not 1.0 <= duration_s <= 25.0:
        raise CorpusError(f"duration must be within [1, 25] s, got {duration_s}")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = np.random.default_rng([profile.seed, utt_seed])

    # per-utterance drift keeps utterances of one speaker from being identical
    f0 = profile.f0_hz * rng.uniform(0.92, 1.08)
    formant_scale = rng.uniform(0.95, 1.05, size=3)
    intonation = 1.0 + 0.06 * _smooth_noise(rng, n, 1.5)
    wobble = 1.0 + profile.jitter * _smooth_noise(rng, n, 80.0)
    inst_f0 = f0 * intonation * wobble
    phase = np.cumsum(inst_f0) / SAMPLE_RATE
    source = 2.0 * (phase - np.floor(phase)) - 1.0
    source = source + profile.noise_mix * rng.normal(size=n)

    y = source
    for freq, bw, s in zip(profile.formants, profile.bandwidths, formant_scale):
        b, a = _resonator(freq * s, bw)
        y = lfilter(b, a, y)

    rate = rng.uniform(2.0, 5.0)
    t = np.arange(n) / SAMPLE_RATE
    syllables = 0.5 - 0.5 * np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    stress = np.exp(0.3 * _smooth_noise(rng, n, rate))
    envelope = (0.08 + 0.92 * syllables) * stress
    y = y * envelope
    y = y - y.mean()
    y = 0.5 * y / np.max(np.abs(y))
    return AudioClip(y, speaker_id=profile.speaker_id,
                     source=f"{SYNTH_PREFIX}{profile.seed}:{utt_seed}:{duration_s!r}")


# manifest ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    speaker_id: str
    split: str
    duration_s: float
    source: str


@dataclass
class CorpusManifest:
    entries: list
    sample_rate: int = SAMPLE_RATE
    version: int = MANIFEST_VERSION
    header: dict = field(default_factory=dict)
    root: Optional[Path] = None
    skipped: list = field(default_factory=list)

    def speakers(self, split: Optional[str] = None) -> list:
        ids = {e.speaker_id for e in self.entries if split is None or e.split == split}
        return sorted(ids)

    def by_split(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def by_speaker(self, split: Optional[str] = None) -> dict:
        out: dict = {}
        for e in self.entries:
            if split is None or e.split == split:
                out.setdefault(e.speaker_id, []).append(e)
        return out

    def validate(self, enroll_count: int = 0, eval_count: int = 0) -> None:
        for e in self.entries:
            if e.split not in SPLITS:
                raise CorpusError(f"{e.clip_id}: unknown split {e.split!r}")
        test = set(self.speakers("test"))
        other = set(self.speakers("train")) | set(self.speakers("val"))
        overlap = test & other
        if overlap:
            raise CorpusError(f"test speakers also present in train/val: {sorted(overlap)}")
        need = enroll_count + eval_count
        if need:
            for spk, clips in self.by_speaker("test").items():
                if len(clips) < need:
                    raise CorpusError(f"speaker {spk} has {len(clips)} test clips, need {need}")

    def load_clip(self, entry: ManifestEntry) -> AudioClip:
        if entry.source.startswith(SYNTH_PREFIX):
            seed, utt, dur = entry.source[len(SYNTH_PREFIX):].split(":")
            profile = generate_speaker(int(seed), entry.speaker_id)
            clip = synthesize_utterance(profile, float(dur), int(utt))
        else:
            path = Path(entry.source)
            if not path.is_absolute() and self.root is not None:
                path = self.root / path
            clip = audio.read_wav(path)
            clip.speaker_id = entry.speaker_id
        clip.meta["clip_id"] = entry.clip_id
        return clip

    def dumps(self) -> str:
        header = {"format": MANIFEST_FORMAT, "version": self.version, "sample_rate": self.sample_rate}
        header.update({k: v for k, v in self.header.items() if k not in header})
        lines = [json.dumps(header, sort_keys=True), "\t".join(COLUMNS)]
        for e in self.entries:
            lines.append("\t".join([e.clip_id, e.speaker_id, e.split, repr(float(e.duration_s)), e.source]))
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines:
            raise CorpusError(f"{path}: empty manifest")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}: header line is not JSON") from exc
        if header.get("format") != MANIFEST_FORMAT:
            raise CorpusError(f"{path}: not a {MANIFEST_FORMAT} file")
        if header.get("version") != MANIFEST_VERSION:
            raise CorpusError(f"{path}: unsupported manifest version {header.get('version')}")
        if len(lines) < 2 or tuple(lines[1].split("\t")) != COLUMNS:
            raise CorpusError(f"{path}: bad column line")
        entries = []
        for i, line in enumerate(lines[2:], start=3):
            parts = line.split("\t")
            if len(parts) != len(COLUMNS):
                raise CorpusError(f"{path}:{i}: expected {len(COLUMNS)} fields, got {len(parts)}")
            entries.append(ManifestEntry(parts[0], parts[1], parts[2], float(parts[3]), parts[4]))
        extra = {k: v for k, v in header.items() if k not in ("format", "version", "sample_rate")}
        m = cls(entries, header["sample_rate"], header["version"], extra, root=path.parent)
        m.validate()
        return m


@dataclass(frozen=True)
class SplitSpec:
    """Which speakers are held out for testing, and how many clips per
    remaining speaker go to validation. ``long_per_test_speaker`` clips of
    every test speaker are generated at the maximum duration so length sweeps
    have a pool to truncate from."""

    test_speakers: tuple = (20, 21, 22, 23, 24)
    val_per_speaker: int = 5
    long_per_test_speaker: int = 8


def _speaker_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def build_synthetic_corpus(n_speakers: int = 25, utts_per_speaker: int = 30,
                           duration_range: Sequence[float] = (3.0, 20.0),
                           split_spec: Optional[SplitSpec] = None, seed: int = 0) -> CorpusManifest:
    spec = split_spec or SplitSpec()
    lo, hi = float(duration_range[0]), float(duration_range[1])
    if not 1.0 <= lo <= hi <= 25.0:
        raise CorpusError(f"duration_range must satisfy 1 <= lo <= hi <= 25, got {duration_range}")
    test = sorted(set(spec.test_speakers))
    if any(not 0 <= t < n_speakers for t in test):
        raise CorpusError(f"test speakers {test} outside 0..{n_speakers - 1}")
    if len(test) == n_speakers:
        raise CorpusError("split leaves no training speakers")
    if not 0 <= spec.val_per_speaker < utts_per_speaker:
        raise CorpusError(f"val_per_speaker must be in [0, {utts_per_speaker}), got {spec.val_per_speaker}")
    if not 0 <= spec.long_per_test_speaker <= utts_per_speaker:
        raise CorpusError("long_per_test_speaker exceeds utts_per_speaker")

    rng = np.random.default_rng(seed)
    entries = []
    for s in range(n_speakers):
        spk = f"spk{s:03d}"
        pseed = _speaker_seed(seed, s)
        is_test = s in test
        for u in range(utts_per_speaker):
            dur = round(float(rng.uniform(lo, hi)), 2)
            if is_test:
                split = "test"
                if u >= utts_per_speaker - spec.long_per_test_speaker:
                    dur = hi
            else:
                split = "val" if u >= utts_per_speaker - spec.val_per_speaker else "train"
            entries.append(ManifestEntry(f"{spk}-{u:03d}", spk, split, dur, f"{SYNTH_PREFIX}{pseed}:{u}:{dur!r}"))
    header = {"generator": "synthetic", "seed": seed, "n_speakers": n_speakers,
              "utts_per_speaker": utts_per_speaker, "duration_range": [lo, hi], "split": asdict(spec)}
    m = CorpusManifest(entries, header=header)
    m.validate()
    return m


def write_corpus_wavs(manifest: CorpusManifest, out_dir) -> CorpusManifest:
    """Render a synthetic manifest to ``out_dir/speaker_id/clip_id.wav``.

    Returns a manifest whose sources are the relative WAV paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []

    def render(entry):
        clip = manifest.load_clip(entry)
        rel = Path(entry.speaker_id) / f"{entry.clip_id}.wav"
        (out_dir / entry.speaker_id).mkdir(exist_ok=True)
        audio.write_wav(clip, out_dir / rel)
        return ManifestEntry(entry.clip_id, entry.speaker_id, entry.split, entry.duration_s, rel.as_posix())

    entries = ordered_map(render, manifest.entries)
    return CorpusManifest(entries, manifest.sample_rate, manifest.version, dict(manifest.header), root=out_dir)


def ingest_wav_corpus(root_dir, test_speakers: Sequence[str] = (), val_per_speaker: int = 0) -> CorpusManifest:
    """Build a manifest from ``root/speaker_id/*.wav``; bad files are skipped with a reason."""
    root = Path(root_dir)
    speakers = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    entries, skipped = [], []
    for spk_dir in speakers:
        spk = spk_dir.name
        files = sorted(spk_dir.glob("*.wav"))
        good = []
        for f in files:
            try:
                clip = audio.read_wav(f)
            except audio.WavFormatError as exc:
                skipped.append({"path": f.relative_to(root).as_posix(), "reason": str(exc)})
                continue
            good.append((f, clip.duration_s))
        for i, (f, dur) in enumerate(good):
            if spk in test_speakers:
                split = "test"
            else:
                split = "val" if i >= len(good) - val_per_speaker else "train"
            entries.append(ManifestEntry(f"{spk}-{f.stem}", spk, split, dur, f.relative_to(root).as_posix()))
    if not entries:
        raise CorpusError(f"{root}: no usable WAV files under root/speaker_id/*.wav")
    m = CorpusManifest(entries, header={"generator": "ingest"}, root=root, skipped=skipped)
    m.validate()
    return m


# preprocessing -----------------------------------------------------------------------


@dataclass
class PreparedCorpus:
    """Loudness-normalized clips keyed by clip_id.

    Clips in ``pad_splits`` come back repeat-padded to ``pad_to_s``; the padded
    copy is built on access so a corpus of 20 s training clips stays cheap to hold.
    """

    manifest: CorpusManifest
    clips: dict
    failures: list
    target_lufs: float
    pad_to_s: float
    pad_splits: tuple = ("train",)

    def __post_init__(self):
        self._split_of = {e.clip_id: e.split for e in self.manifest.entries}

    @property
    def pad_len(self) -> int:
        return int(round(self.pad_to_s * SAMPLE_RATE))

    def get(self, clip_id: str) -> AudioClip:
        clip = self.clips[clip_id]
        if self._split_of[clip_id] not in self.pad_splits:
            return clip
        if len(clip) > self.pad_len:
            return audio.truncate(clip, self.pad_len)
        return audio.repeat_pad(clip, self.pad_len)

    def split(self, name: str) -> list:
        return [self.get(e.clip_id) for e in self.manifest.by_split(name) if e.clip_id in self.clips]

    def by_speaker(self, name: str) -> dict:
        out: dict = {}
        for e in self.manifest.by_split(name):
            if e.clip_id in self.clips:
                out.setdefault(e.speaker_id, []).append(self.get(e.clip_id))
        return out


def preprocess_corpus(manifest: CorpusManifest, target_lufs: float = -23.0, pad_to_s: float = 20.0,
                      pad_splits: Sequence[str] = ("train",), splits: Optional[Sequence[str]] = None,
                      ) -> PreparedCorpus:
    """Normalize every clip; clips in ``pad_splits`` are served repeat-padded.

    Normalization comes first, so padding preserves the measured loudness.
    Clips that fail are recorded; the call fails when more than 10 % do.
    """
    wanted = [e for e in manifest.entries if splits is None or e.split in splits]

    def work(entry):
        try:
            return entry.clip_id, audio.normalize_loudness(manifest.load_clip(entry), target_lufs), None
        except (ValueError, OSError) as exc:
            return entry.clip_id, None, str(exc)

    clips, failures = {}, []
    for clip_id, clip, err in ordered_map(work, wanted):
        if err is None:
            clips[clip_id] = clip
        else:
            failures.append({"clip_id": clip_id, "error": err})
            log.warning("preprocess: %s failed: %s", clip_id, err)
    if wanted and len(failures) > 0.1 * len(wanted):
        raise CorpusError(f"preprocessing failed for {len(failures)}/{len(wanted)} clips (> 10 %)")
    return PreparedCorpus(manifest, clips, failures, target_lufs, pad_to_s, tuple(pad_splits))
