"""Speaker-embedding network, its training, enrollment and identification.

The network is a raw-waveform strided 1-D conv stack with tanh activations,
mean+std temporal pooling (x-vector style statistics pooling) and a linear
embedding head. Embeddings are l2-normalized; identification is the argmax of
cosine similarity against per-speaker enrollment vectors.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradcore as gc
from ._parallel import ordered_map
from .audio import AudioClip
from .gradcore import Tape, Tensor
from .optim import Adam

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UAPFMDL\x00"
CHECKPOINT_VERSION = 2


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


DEFAULT_ARCH = {
    "kernels": [16, 8, 4, 4],
    "strides": [8, 4, 2, 2],
    "channels": [1, 32, 32, 64, 64],
    "emb_dim": 64,
    "n_classes": 20,
    "input_gain": 10.0,
}


def receptive_field(arch: dict) -> int:
    rf, jump = 1, 1
    for k, s in zip(arch["kernels"], arch["strides"]):
        rf += (k - 1) * jump
        jump *= s
    return rf


def min_input_length(arch: dict) -> int:
    """Shortest waveform that leaves at least two frames after the conv stack."""
    jump = int(np.prod(arch["strides"]))
    return receptive_field(arch) + jump


@dataclass
class SpeakerModel:
    arch: dict
    params: dict
    labels: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def init(cls, n_classes: int, seed: int = 0, labels: Sequence[str] = (), **arch_overrides) -> "SpeakerModel":
        arch = dict(DEFAULT_ARCH, n_classes=n_classes, **arch_overrides)
        rng = np.random.default_rng(seed)
        params = {}
        ch = arch["channels"]
        for i, k in enumerate(arch["kernels"]):
            fan_in = ch[i] * k
            params[f"conv{i}.w"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(ch[i + 1], ch[i], k))
            params[f"conv{i}.b"] = np.zeros(ch[i + 1])
        pooled = 2 * ch[-1]
        d = arch["emb_dim"]
        params["head.w"] = rng.normal(0.0, 1.0 / math.sqrt(pooled), size=(d, pooled))
        params["head.b"] = np.zeros(d)
        params["cls.w"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(n_classes, d))
        params["cls.b"] = np.zeros(n_classes)
        return cls(arch, params, list(labels), {})

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.arch)

    def leaves(self, requires_grad: bool = False, names: Optional[Sequence[str]] = None) -> dict:
        """Fresh Tensor views of the parameters (one set per tape / thread)."""
        names = names or list(self.params)
        return {n: Tensor(self.params[n], requires_grad=requires_grad) for n in names}

    def forward(self, x, leaves: Optional[dict] = None) -> Tensor:
        """Raw (unnormalized) embedding of a 1-D waveform tensor."""
        p = leaves or self.leaves()
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 1:
            raise ValueError(f"embed expects a 1-D waveform, got shape {x.shape}")
        if x.data.size < min_input_length(self.arch):
            raise ValueError(f"clip of {x.data.size} samples is shorter than the model minimum "
                             f"({min_input_length(self.arch)} samples)")
        h = gc.reshape(gc.mul(x, self.arch["input_gain"]), (1, -1))
        for i, s in enumerate(self.arch["strides"]):
            h = gc.tanh(gc.conv1d(h, p[f"conv{i}.w"], s, bias=p[f"conv{i}.b"]))
        pooled = gc.reshape(gc.stat_pool(h), (-1, 1))
        e = gc.add(gc.matmul(p["head.w"], pooled), gc.reshape(p["head.b"], (-1, 1)))
        return gc.reshape(e, (-1,))

    def embed_tensor(self, x, leaves: Optional[dict] = None) -> Tensor:
        e = self.forward(x, leaves)
        return gc.div(e, gc.norm(e))

    def logits(self, x, leaves: Optional[dict] = None) -> Tensor:
        p = leaves or self.leaves()
        e = self.embed_tensor(x, p)
        z = gc.matmul(p["cls.w"], gc.reshape(e, (-1, 1)))
        return gc.add(gc.reshape(z, (-1,)), p["cls.b"])

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.arch, sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()


def embed(model: SpeakerModel, clip) -> np.ndarray:
    """Unit-norm embedding of a clip (no gradient)."""
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    e = model.forward(Tensor(samples)).data
    n = np.linalg.norm(e)
    if n == 0.0:
        raise ValueError("degenerate zero embedding")
    return e / n


def embed_many(model: SpeakerModel, clips: Sequence) -> np.ndarray:
    return np.stack(ordered_map(lambda c: embed(model, c), clips))


# enrollment / identification ---------------------------------------------------------


@dataclass
class EnrollmentSet:
    vectors: dict
    enroll_count: int
    normalized_inputs: bool = True

    def speaker_ids(self) -> list:
        return sorted(self.vectors)

    def matrix(self) -> tuple:
        ids = self.speaker_ids()
        return ids, np.stack([self.vectors[s] for s in ids])


def build_enrollment(model: SpeakerModel, clips_by_speaker: dict, enroll_count: int = 5,
                     normalized_inputs: bool = True) -> EnrollmentSet:
    """e_k = normalize(mean of the first ``enroll_count`` clip embeddings)."""
    vectors = {}
    for spk in sorted(clips_by_speaker):
        clips = clips_by_speaker[spk]
        if len(clips) < enroll_count:
            raise ValueError(f"speaker {spk} has {len(clips)} clips, enrollment needs {enroll_count}")
        embs = embed_many(model, clips[:enroll_count])
        mean = embs.mean(axis=0)
        vectors[spk] = mean / np.linalg.norm(mean)
    return EnrollmentSet(vectors, enroll_count, normalized_inputs)


def identify_embedding(embedding: np.ndarray, enrollment: EnrollmentSet) -> tuple:
    ids, mat = enrollment.matrix()
    if not ids:
        raise ValueError("empty enrollment set")
    sims = mat @ embedding / (np.linalg.norm(mat, axis=1) * np.linalg.norm(embedding))
    # ids are sorted, so argmax's first-hit rule breaks ties lexicographically
    k = int(np.argmax(sims))
    return ids[k], float(sims[k])


def identify(model: SpeakerModel, clip, enrollment: EnrollmentSet) -> tuple:
    return identify_embedding(embed(model, clip), enrollment)


def identification_accuracy(model: SpeakerModel, enrollment: EnrollmentSet, clips: Sequence[AudioClip]) -> float:
    if not clips:
        raise ValueError("no clips to score")
    embs = embed_many(model, clips)
    hits = sum(identify_embedding(e, enrollment)[0] == c.speaker_id for e, c in zip(embs, clips))
    return hits / len(clips)


# training ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: SpeakerModel
    curve: list


def _sample_grad(model: SpeakerModel, crop: np.ndarray, label: int) -> tuple:
    leaves = model.leaves(requires_grad=True)
    with Tape() as tape:
        loss = gc.cross_entropy(model.logits(Tensor(crop), leaves), label)
    tape.backward(loss)
    return loss.item(), {n: t.grad for n, t in leaves.items()}


def train_model(train_clips: Sequence[AudioClip], epochs: int = 20, lr: float = 1e-3, batch: int = 32,
                seed: int = 0, crop_s: float = 2.0, log_fn=None, **arch_overrides) -> TrainResult:
    """Softmax cross-entropy over speaker labels on random crops; Adam."""
    if not train_clips:
        raise ValueError("train split is empty")
    labels = sorted({c.speaker_id for c in train_clips})
    index = {s: i for i, s in enumerate(labels)}
    model = SpeakerModel.init(len(labels), seed=seed, labels=labels, **arch_overrides)
    opt = Adam(lr=lr)
    rng = np.random.default_rng([seed, 1])
    crop = int(round(crop_s * 16000))
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_clips))
        losses, correct = [], 0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            items = []
            for i in idx:
                clip = train_clips[i]
                off = int(rng.integers(0, max(1, len(clip) - crop + 1)))
                items.append((clip.samples[off:off + crop], index[clip.speaker_id]))
            results = ordered_map(lambda it: _sample_grad(model, *it), items)
            grads = {}
            for loss, g in results:
                losses.append(loss)
                for n, arr in g.items():
                    grads[n] = arr if n not in grads else grads[n] + arr
            if not np.all(np.isfinite([r[0] for r in results])):
                raise TrainingDiverged(f"loss is not finite in epoch {epoch}")
            opt.step(model.params, {n: g / len(idx) for n, g in grads.items()})
        record = {"epoch": epoch, "loss": float(np.mean(losses))}
        curve.append(record)
        if log_fn is not None:
            log_fn(record)
        log.info("model epoch %d loss %.4f", epoch, record["loss"])
    model.metadata["train"] = {"epochs": epochs, "lr": lr, "batch": batch, "seed": seed, "crop_s": crop_s}
    return TrainResult(model, curve)


def classifier_accuracy(model: SpeakerModel, clips: Sequence[AudioClip]) -> float:
    index = {s: i for i, s in enumerate(model.labels)}
    hits = 0
    for c in clips:
        hits += int(np.argmax(model.logits(Tensor(c.samples)).data)) == index[c.speaker_id]
    return hits / len(clips)


# checkpoint --------------------------------------------------------------------------


def save_model(model: SpeakerModel, path, version: int = CHECKPOINT_VERSION) -> None:
    names = sorted(model.params)
    header = {
        "arch": model.arch,
        "labels": model.labels,
        "layers": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    if version >= 2:
        header["metadata"] = model.metadata
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", version, len(blob)))
        fh.write(blob)
        for n in names:
            arr = np.ascontiguousarray(model.params[n], dtype="<f8")
            fh.write(struct.pack("<Q", arr.size))
            fh.write(arr.tobytes())


def load_model(path) -> SpeakerModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version > CHECKPOINT_VERSION or version < 1:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if version < CHECKPOINT_VERSION:
        warnings.warn(f"{path}: reading version {version} checkpoint with version "
                      f"{CHECKPOINT_VERSION} loader; metadata unavailable", stacklevel=2)
    pos = 16 + hlen
    if len(data) < pos:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    header = json.loads(data[16:pos].decode("utf-8"))
    params = {}
    for layer in header["layers"]:
        if len(data) < pos + 8:
            raise CheckpointError(f"{path}: truncated at layer {layer['name']}")
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        expected = int(np.prod(layer["shape"]))
        if count != expected:
            raise CheckpointError(f"{path}: layer {layer['name']} has {count} values, expected {expected}")
        end = pos + 8 * count
        if len(data) < end:
            raise CheckpointError(f"{path}: truncated at layer {layer['name']}")
        params[layer["name"]] = np.frombuffer(data[pos:end], dtype="<f8").reshape(layer["shape"]).copy()
        pos = end
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return SpeakerModel(header["arch"], params, header.get("labels", []), header.get("metadata", {}))
