"""Training a short universal patch that is tiled across whole utterances.

Objective per clip: w_fooling * cos(f(x), f(x + tile(patch))) + w_reg * R(patch),
where R is the exponential TV penalty or the l2 baseline. The patch is updated
with Adam and projected onto [-epsilon, epsilon] after every step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import audio
from . import gradcore as gc
from ._parallel import ordered_map
from .audio import SAMPLE_RATE, AudioClip
from .gradcore import Tape, Tensor
from .optim import AdamState, adam_update
from .spkmodel import EnrollmentSet, SpeakerModel, embed, embed_many, identify_embedding

log = logging.getLogger(__name__)

PATCH_MAGIC = b"UAPFPAT\x00"
PATCH_VERSION = 1
LOSS_VARIANTS = ("exp_tv", "l2")


class PatchFormatError(ValueError):
    pass


@dataclass
class AttackConfig:
    w_fooling: float = 1.0
    w_exptv: float = 30.0
    lr: float = 3e-3
    epochs: int = 250
    batch: int = 64
    loss_variant: str = "exp_tv"
    seed: int = 0
    patch_len: int = 3200
    epsilon: float = 0.01
    circular_tv: bool = True
    random_phase: bool = False
    init: str = "zeros"
    max_train_clips: int = 0
    val_clips: int = 0
    val_every: int = 1

    def __post_init__(self):
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}")
        if self.w_fooling < 0 or self.w_exptv < 0:
            raise ValueError("loss weights must be non-negative")
        if self.patch_len < 2 or self.epsilon <= 0:
            raise ValueError("patch_len must be >= 2 and epsilon > 0")
        if self.init not in ("zeros", "uniform"):
            raise ValueError(f"init must be 'zeros' or 'uniform', got {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Patch:
    values: np.ndarray
    epsilon: float = 0.01
    sample_rate: int = SAMPLE_RATE
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError("patch values must be a nonempty 1-D array")

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def zeros(cls, length: int = 3200, epsilon: float = 0.01) -> "Patch":
        return cls(np.zeros(length), epsilon)

    def tiled(self, n: int, offset: int = 0) -> np.ndarray:
        return audio.tile_patch(self.values, n, offset)

    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values, dtype="<f8").tobytes()
                              + repr(self.epsilon).encode()).hexdigest()


# losses ------------------------------------------------------------------------------


def phi(x: float, y: float) -> float:
    if abs(y) > abs(x):
        return math.exp(abs(y) - abs(x)) - 1.0
    if x != 0.0 and y != 0.0 and (x > 0) != (y > 0):
        return math.exp(abs(y)) - 1.0
    return 0.0


def exp_tv_loss(patch, circular: bool = True) -> Tensor:
    """(1/l) * sum_i phi(p_i, p_{i+1}); p_l wraps to p_0 when circular."""
    p = patch if isinstance(patch, Tensor) else Tensor(patch)
    l = p.data.size
    if l < 2:
        raise ValueError("exp_tv_loss needs at least 2 samples")
    if circular:
        x, y = p, gc.roll(p, -1)
    else:
        x, y = gc.take(p, 0, l - 1), gc.take(p, 1, l)
    ax, ay = gc.abs(x), gc.abs(y)
    grows = ay.data > ax.data
    flips = ~grows & (x.data * y.data < 0.0)
    rising = gc.mul(gc.sub(gc.exp(gc.sub(ay, ax)), 1.0), grows.astype(np.float64))
    flipping = gc.mul(gc.sub(gc.exp(ay), 1.0), flips.astype(np.float64))
    return gc.div(gc.sum(gc.add(rising, flipping)), float(l))


def l2_loss(patch) -> Tensor:
    p = patch if isinstance(patch, Tensor) else Tensor(patch)
    return gc.div(gc.norm(p), float(p.data.size))


def regularizer(patch, config: AttackConfig) -> Tensor:
    if config.loss_variant == "exp_tv":
        return exp_tv_loss(patch, config.circular_tv)
    return l2_loss(patch)


def fooling_loss(model: SpeakerModel, clip, patch, clean_embedding: Optional[np.ndarray] = None,
                 offset: int = 0) -> Tensor:
    """cos(f(x), f(x + tile(patch))); the clean embedding is a constant."""
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    p = patch if isinstance(patch, Tensor) else Tensor(patch)
    if clean_embedding is None:
        clean_embedding = embed(model, samples)
    adv = gc.add(Tensor(samples), gc.tile(p, samples.size, offset))
    return gc.cosine_similarity(Tensor(clean_embedding), model.embed_tensor(adv))


def total_loss(model: SpeakerModel, clips: Sequence, patch, config: AttackConfig) -> Tensor:
    if not clips:
        raise ValueError("total_loss needs a nonempty batch")
    p = patch if isinstance(patch, Tensor) else Tensor(patch)
    fool = gc.mean(gc.concat([gc.reshape(fooling_loss(model, c, p), (1,)) for c in clips]))
    reg = regularizer(p, config)
    return gc.add(gc.mul(fool, config.w_fooling), gc.mul(reg, config.w_exptv))


def _fooling_grad(model: SpeakerModel, samples: np.ndarray, clean: np.ndarray, values: np.ndarray,
                  offset: int) -> tuple:
    leaf = Tensor(values, requires_grad=True)
    with Tape() as tape:
        loss = fooling_loss(model, samples, leaf, clean, offset)
    tape.backward(loss)
    return loss.item(), leaf.grad


def _regularizer_grad(values: np.ndarray, config: AttackConfig) -> tuple:
    leaf = Tensor(values, requires_grad=True)
    with Tape() as tape:
        reg = regularizer(leaf, config)
    if not reg.requires_grad:
        return reg.item(), np.zeros_like(values)
    tape.backward(reg)
    return reg.item(), leaf.grad if leaf.grad is not None else np.zeros_like(values)


# optimizer ---------------------------------------------------------------------------


def adam_step(patch: Patch, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """Adam update of ``patch.values`` in place, then projection onto [-eps, eps]."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != patch.values.shape:
        raise ValueError(f"gradient length {grad.size} != patch length {patch.values.size}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite value in patch gradient")
    adam_update(patch.values, grad, state, lr)
    np.clip(patch.values, -patch.epsilon, patch.epsilon, out=patch.values)


# training loop -----------------------------------------------------------------------


@dataclass
class ValidationSet:
    """Unpadded, normalized clips of enrolled speakers, used for per-epoch fooling rate."""

    enrollment: EnrollmentSet
    clips: list
    clean_predictions: list = field(default_factory=list)

    def prime(self, model: SpeakerModel) -> None:
        embs = embed_many(model, [c.samples for c in self.clips])
        self.clean_predictions = [identify_embedding(e, self.enrollment)[0] for e in embs]

    def fooling_rate(self, model: SpeakerModel, patch_values: np.ndarray) -> float:
        def pred(c):
            return identify_embedding(embed(model, c.samples + audio.tile_patch(patch_values, len(c))),
                                      self.enrollment)[0]
        preds = ordered_map(pred, self.clips)
        flips = sum(p != q for p, q in zip(preds, self.clean_predictions))
        return 100.0 * flips / len(self.clips)


@dataclass
class TrainState:
    patch: Patch
    adam: AdamState
    epoch: int
    log: list


def init_state(config: AttackConfig) -> TrainState:
    if config.init == "uniform":
        rng = np.random.default_rng([config.seed, 7])
        values = rng.uniform(-config.epsilon, config.epsilon, size=config.patch_len)
    else:
        values = np.zeros(config.patch_len)
    patch = Patch(values, config.epsilon, config=config.to_dict())
    return TrainState(patch, AdamState.zeros_like(values), 0, [])


def save_state(state: TrainState, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, values=state.patch.values, m=state.adam.m, v=state.adam.v,
                 step=np.array(state.adam.step), epoch=np.array(state.epoch),
                 config=np.array(json.dumps(state.patch.config, sort_keys=True)),
                 log=np.array(json.dumps(state.log)))
    tmp.replace(path)


def load_state(path) -> TrainState:
    with np.load(path) as z:
        config = json.loads(str(z["config"]))
        patch = Patch(z["values"].copy(), config["epsilon"], config=config)
        adam = AdamState(z["m"].copy(), z["v"].copy(), int(z["step"]))
        return TrainState(patch, adam, int(z["epoch"]), json.loads(str(z["log"])))


def train_uap(model: SpeakerModel, train_clips: Sequence[AudioClip], config: AttackConfig,
              validation: Optional[ValidationSet] = None, log_fn: Optional[Callable] = None,
              checkpoint_path=None, resume: Optional[TrainState] = None) -> tuple:
    """Optimize a patch over shuffled batches of (padded) training clips.

    Returns ``(patch, log)``; ``log`` holds one record per epoch. With
    ``checkpoint_path`` set, state is written after every epoch and on
    KeyboardInterrupt, and can be passed back as ``resume``.
    """
    clips = list(train_clips)
    if config.max_train_clips:
        pick = np.random.default_rng([config.seed, 3]).permutation(len(clips))[: config.max_train_clips]
        clips = [clips[i] for i in sorted(pick)]
    if not clips:
        raise ValueError("no training clips")
    samples = [c.samples for c in clips]
    clean = embed_many(model, samples)
    if validation is not None and not validation.clean_predictions:
        validation.prime(model)

    state = resume or init_state(config)
    if resume is not None and AttackConfig.from_dict(resume.patch.config) != config:
        raise ValueError("resume state was produced with a different attack config")
    patch = state.patch

    try:
        for epoch in range(state.epoch, config.epochs):
            rec = {"epoch": epoch}
            if validation is not None and (epoch % config.val_every == 0):
                rec["val_fooling_rate"] = validation.fooling_rate(model, patch.values)
            rng = np.random.default_rng([config.seed, 11, epoch])
            order = rng.permutation(len(clips))
            fool_losses, reg_values = [], []
            for start in range(0, len(order), config.batch):
                idx = order[start:start + config.batch]
                offsets = (rng.integers(0, config.patch_len, size=idx.size) if config.random_phase
                           else np.zeros(idx.size, dtype=int))
                values = patch.values.copy()
                results = ordered_map(lambda j: _fooling_grad(model, samples[idx[j]], clean[idx[j]], values,
                                                              int(offsets[j])), range(idx.size))
                grad = np.zeros_like(values)
                for loss, g in results:
                    fool_losses.append(loss)
                    grad += g
                grad *= config.w_fooling / idx.size
                reg, reg_grad = _regularizer_grad(values, config)
                reg_values.append(reg)
                grad += config.w_exptv * reg_grad
                adam_step(patch, grad, state.adam, config.lr)
                if np.max(np.abs(patch.values)) > patch.epsilon:
                    raise AssertionError("clip bound violated after optimizer step")
            rec.update(fooling_loss=float(np.mean(fool_losses)), regularizer=float(np.mean(reg_values)),
                       max_abs=float(np.max(np.abs(patch.values))), steps=state.adam.step)
            state.log.append(rec)
            state.epoch = epoch + 1
            if log_fn is not None:
                log_fn(rec)
            log.info("uap epoch %d fooling %.4f reg %.5f", epoch, rec["fooling_loss"], rec["regularizer"])
            if checkpoint_path is not None:
                save_state(state, checkpoint_path)
    except KeyboardInterrupt:
        if checkpoint_path is not None:
            save_state(state, checkpoint_path)
            log.warning("interrupted at epoch %d; state saved to %s", state.epoch, checkpoint_path)
        raise
    if validation is not None:
        final = {"epoch": state.epoch, "final": True, "val_fooling_rate": validation.fooling_rate(model, patch.values)}
        if log_fn is not None:
            log_fn(final)
        state.log.append(final)
    return patch, state.log


# persistence -------------------------------------------------------------------------


def save_patch(patch: Patch, path) -> None:
    header = json.dumps({"epsilon": patch.epsilon, "sample_rate": patch.sample_rate,
                         "config": patch.config}, sort_keys=True).encode("utf-8")
    values = np.ascontiguousarray(patch.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(PATCH_MAGIC)
        fh.write(struct.pack("<IIQ", PATCH_VERSION, len(header), values.size))
        fh.write(header)
        fh.write(values.tobytes())


def load_patch(path) -> Patch:
    data = Path(path).read_bytes()
    if data[:8] != PATCH_MAGIC:
        raise PatchFormatError(f"{path}: not a patch file")
    if len(data) < 24:
        raise PatchFormatError(f"{path}: truncated patch header")
    version, hlen, count = struct.unpack_from("<IIQ", data, 8)
    if version != PATCH_VERSION:
        raise PatchFormatError(f"{path}: unsupported patch version {version}")
    start = 24 + hlen
    if len(data) != start + 8 * count:
        raise PatchFormatError(f"{path}: length mismatch (expected {count} values)")
    header = json.loads(data[24:start].decode("utf-8"))
    values = np.frombuffer(data[start:], dtype="<f8").copy()
    return Patch(values, header["epsilon"], header.get("sample_rate", SAMPLE_RATE), header.get("config", {}))


def export_patch_wav(patch: Patch, path) -> None:
    audio.write_wav(patch.values, path)
