"""Waveform I/O and signal-level primitives.

Everything here is a pure function of numpy arrays at a fixed 16 kHz rate.
The loudness meter follows ITU-R BS.1770 (K-weighting, 400 ms gating blocks
with 75 % overlap, absolute gate at -70 LUFS, relative gate at -10 LU).
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import lfilter

SAMPLE_RATE = 16000
INT16_SCALE = 32768.0

_BLOCK_S = 0.400
_OVERLAP = 0.75
_ABS_GATE = -70.0
_REL_GATE = -10.0


class WavFormatError(ValueError):
    """A WAV file does not match the 16-bit / mono / 16 kHz contract."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    speaker_id: Optional[str] = None
    source: Optional[str] = None
    padded: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioClip expects 1-D samples, got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples: np.ndarray, **changes) -> "AudioClip":
        return replace(self, samples=np.asarray(samples, dtype=np.float64), meta=dict(self.meta), **changes)


@dataclass(frozen=True)
class LoudnessStats:
    integrated_loudness: float
    l2_norm: float
    duration_s: float


# WAV ---------------------------------------------------------------------------------


def read_wav(path) -> AudioClip:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            if channels != 1:
                raise WavFormatError(f"{path}: expected mono, got {channels} channels")
            if width != 2:
                raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
            if rate != SAMPLE_RATE:
                raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz sample rate, got {rate} Hz")
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated WAV file") from exc
    ints = np.frombuffer(raw, dtype="<i2")
    return AudioClip(ints.astype(np.float64) / INT16_SCALE, source=str(path))


def to_int16(samples: np.ndarray) -> np.ndarray:
    ints = np.round(np.asarray(samples, dtype=np.float64) * INT16_SCALE)
    return np.clip(ints, -32768, 32767).astype("<i2")


def write_wav(clip_or_samples, path) -> None:
    samples = clip_or_samples.samples if isinstance(clip_or_samples, AudioClip) else np.asarray(clip_or_samples)
    if samples.size and np.max(np.abs(samples)) > 1.0:
        raise ValueError("write_wav: samples outside [-1, 1]")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(to_int16(samples).tobytes())


# padding / tiling --------------------------------------------------------------------


def repeat_pad(clip: AudioClip, target_len: int) -> AudioClip:
    """Extend a clip to ``target_len`` samples by cycling its own content."""
    n = len(clip)
    if n == 0:
        raise ValueError("repeat_pad: empty clip")
    if target_len < n:
        raise ValueError(f"repeat_pad: target {target_len} shorter than clip ({n}); truncate instead")
    if target_len == n:
        return clip
    return clip.with_samples(np.resize(clip.samples, target_len), padded=True)


def truncate(clip: AudioClip, length: int) -> AudioClip:
    if length > len(clip):
        raise ValueError(f"truncate: clip has {len(clip)} samples, asked for {length}")
    return clip.with_samples(clip.samples[:length].copy())


def tile_patch(patch, n: int, offset: int = 0) -> np.ndarray:
    """out[i] = patch[(i + offset) mod l] for i < n."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 1 or patch.size < 1:
        raise ValueError("tile_patch: patch must be a nonempty 1-D sequence")
    if n < 1:
        raise ValueError(f"tile_patch: n must be >= 1, got {n}")
    if offset % patch.size == 0:
        return np.resize(patch, n)
    return patch[(np.arange(n) + offset) % patch.size]


# loudness ----------------------------------------------------------------------------


def _shelf_coefficients(fs: float):
    # analog prototype of the BS.1770 pre-filter; bilinear transform at fs
    # reproduces the tabulated 48 kHz coefficients
    # (b = 1.53512486, -2.69169619, 1.19839281; a = 1, -1.69065929, 0.73248077)
    f0, gain_db, q = 1681.974450955533, 3.999843853973347, 0.7071752369554196
    k = math.tan(math.pi * f0 / fs)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    b = np.array([(vh + vb * k / q + k * k) / a0, 2.0 * (k * k - vh) / a0, (vh - vb * k / q + k * k) / a0])
    a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])
    return b, a


def _highpass_coefficients(fs: float):
    # RLB high-pass; at 48 kHz: a = 1, -1.99004745, 0.99007225
    f0, q = 38.13547087602444, 0.5003270373238773
    k = math.tan(math.pi * f0 / fs)
    den = 1.0 + k / q + k * k
    b = np.array([1.0, -2.0, 1.0])
    a = np.array([1.0, 2.0 * (k * k - 1.0) / den, (1.0 - k / q + k * k) / den])
    return b, a


# At 16 kHz:
#   shelf     b = [1.44329522, -1.83157538, 0.68165876]  a = [1, -1.10153377, 0.39491237]
#   high-pass b = [1, -2, 1]                              a = [1, -1.97028953, 0.97051049]
K_WEIGHTING_16K = (_shelf_coefficients(SAMPLE_RATE), _highpass_coefficients(SAMPLE_RATE))


def k_weight(samples: np.ndarray, coefficients=None) -> np.ndarray:
    (bs, as_), (bh, ah) = coefficients or K_WEIGHTING_16K
    return lfilter(bh, ah, lfilter(bs, as_, samples))


def _block_powers(weighted: np.ndarray, rate: int) -> np.ndarray:
    block = int(round(_BLOCK_S * rate))
    step = int(round(_BLOCK_S * (1.0 - _OVERLAP) * rate))
    n_blocks = (weighted.size - block) // step + 1
    sq = np.concatenate([[0.0], np.cumsum(weighted * weighted)])
    starts = np.arange(n_blocks) * step
    return np.maximum(sq[starts + block] - sq[starts], 0.0) / block


def integrated_loudness(samples: np.ndarray, rate: int = SAMPLE_RATE, coefficients=None) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < int(round(_BLOCK_S * rate)):
        raise ValueError(f"loudness needs at least {_BLOCK_S} s of audio, got {samples.size / rate:.3f} s")
    z = _block_powers(k_weight(samples, coefficients), rate)
    with np.errstate(divide="ignore"):
        block_lufs = -0.691 + 10.0 * np.log10(z)
    kept = z[block_lufs >= _ABS_GATE]
    if kept.size == 0:
        return float("-inf")
    rel_gate = -0.691 + 10.0 * math.log10(kept.mean()) + _REL_GATE
    gated = z[(block_lufs > rel_gate) & (block_lufs >= _ABS_GATE)]
    if gated.size == 0:
        return float("-inf")
    return -0.691 + 10.0 * math.log10(gated.mean())


def measure_loudness(clip) -> LoudnessStats:
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    lufs = integrated_loudness(samples)
    return LoudnessStats(lufs, float(np.linalg.norm(samples)), samples.size / SAMPLE_RATE)


def normalize_loudness(clip: AudioClip, target_lufs: float = -23.0) -> AudioClip:
    """Apply one gain so the clip measures ``target_lufs``; clamp to [-1, 1].

    The returned clip's ``meta`` carries ``gain_db`` and ``clamp_fraction``.
    """
    current = integrated_loudness(clip.samples)
    if not math.isfinite(current):
        raise ValueError("normalize_loudness: clip is silent after gating")
    gain_db = target_lufs - current
    scaled = clip.samples * 10.0 ** (gain_db / 20.0)
    over = np.abs(scaled) > 1.0
    out = clip.with_samples(np.clip(scaled, -1.0, 1.0))
    out.meta.update(gain_db=gain_db, clamp_fraction=float(over.mean()), target_lufs=target_lufs)
    return out


# metrics / analysis ------------------------------------------------------------------


def snr_db(reference, perturbation) -> float:
    """20 log10(||reference|| / ||perturbation||); +inf for a zero perturbation."""
    reference = np.asarray(reference, dtype=np.float64)
    perturbation = np.asarray(perturbation, dtype=np.float64)
    if reference.shape != perturbation.shape:
        raise ValueError(f"snr_db: length mismatch {reference.shape} vs {perturbation.shape}")
    ref_norm = float(np.linalg.norm(reference))
    pert_norm = float(np.linalg.norm(perturbation))
    if ref_norm == 0.0:
        raise ValueError("snr_db: zero reference signal")
    if pert_norm == 0.0:
        return float("inf")
    return 20.0 * math.log10(ref_norm / pert_norm)


def dft_magnitudes(signal) -> np.ndarray:
    """|DFT| for bins 0..n//2 (forward only, not differentiable)."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size < 2:
        raise ValueError("dft_magnitudes: need at least 2 samples")
    return np.abs(np.fft.rfft(signal))


def total_variation(patch) -> float:
    """Mean absolute circular first difference; a crude perceptual proxy."""
    patch = np.asarray(patch, dtype=np.float64)
    return float(np.mean(np.abs(np.roll(patch, -1) - patch)))
