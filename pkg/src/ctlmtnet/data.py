"""Corpora: in-memory container, on-disk layout, synthetic generator, k-fold splits."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import MfccFeatures, pad_or_truncate, read_mfcc_csv, write_mfcc_csv
from .model import ConfigurationError

log = logging.getLogger(__name__)

DEFAULT_EMOTIONS = ("angry", "fear", "happy", "neutral", "sad", "surprise", "disgust", "calm")


@dataclass(frozen=True)
class Utterance:
    id: str
    features: MfccFeatures
    label: int
    emotion: str


@dataclass
class Corpus:
    items: list[Utterance]
    label_space: tuple[str, ...]

    def __post_init__(self):
        self.label_space = tuple(self.label_space)
        ids = [u.id for u in self.items]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("utterance ids must be unique")
        k = len(self.label_space)
        for u in self.items:
            if not 0 <= u.label < k:
                raise ConfigurationError(f"{u.id}: label {u.label} outside label space of size {k}")
            if self.label_space[u.label] != u.emotion:
                raise ConfigurationError(f"{u.id}: label {u.label} does not name emotion {u.emotion!r}")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_classes(self) -> int:
        return len(self.label_space)

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.items], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.items]

    def max_frames(self) -> int:
        return max(u.features.frames for u in self.items)

    def matrix(self, frames: int | None = None, indices=None) -> np.ndarray:
        """Stacked ``(n, frames, coeffs)`` array, zero-padded/truncated to ``frames``."""
        frames = frames or self.max_frames()
        chosen = self.items if indices is None else [self.items[i] for i in indices]
        return np.stack([pad_or_truncate(u.features, frames).matrix for u in chosen])

    def subset(self, indices) -> "Corpus":
        return Corpus([self.items[i] for i in indices], self.label_space)


def remap_labels(corpus: Corpus, mapping: dict[str, str], label_space) -> Corpus:
    """Move a corpus into a shared label space via an emotion-name mapping.

    Emotions mapped to ``None`` are dropped; unmapped emotions are an error.
    """
    label_space = tuple(label_space)
    items = []
    for u in corpus.items:
        if u.emotion not in mapping:
            raise ConfigurationError(f"label-space mapping has no entry for emotion {u.emotion!r}")
        target = mapping[u.emotion]
        if target is None:
            continue
        if target not in label_space:
            raise ConfigurationError(f"emotion {u.emotion!r} maps to {target!r}, which is not in {label_space}")
        items.append(Utterance(u.id, u.features, label_space.index(target), target))
    return Corpus(items, label_space)


# ---------------------------------------------------------------------------
# disk layout: <id>.csv per utterance + labels.csv (id, emotion)
# ---------------------------------------------------------------------------

def write_corpus(corpus: Corpus, directory: str | os.PathLike) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "emotion"])
        for u in corpus.items:
            write_mfcc_csv(os.path.join(directory, f"{u.id}.csv"), u.features)
            writer.writerow([u.id, u.emotion])


def read_corpus(directory: str | os.PathLike, label_space=None, sample_rate: int = 16000) -> Corpus:
    path = os.path.join(directory, "labels.csv")
    if not os.path.exists(path):
        raise ConfigurationError(f"{directory}: missing labels.csv")
    with open(path, newline="") as fh:
        rows = [(r["id"], r["emotion"]) for r in csv.DictReader(fh)]
    if not rows:
        raise ConfigurationError(f"{directory}: labels.csv lists no utterances")
    if label_space is None:
        label_space = tuple(sorted({e for _, e in rows}))
    label_space = tuple(label_space)
    items = []
    for uid, emotion in rows:
        if emotion not in label_space:
            raise ConfigurationError(f"{uid}: emotion {emotion!r} not in label space {label_space}")
        feats = read_mfcc_csv(os.path.join(directory, f"{uid}.csv"), sample_rate=sample_rate)
        items.append(Utterance(uid, feats, label_space.index(emotion), emotion))
    return Corpus(items, label_space)


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Gaussian class clusters in MFCC-shaped space.

    Class ``k`` has a mean vector whose coordinates come in ``num_pairs``
    planes; in each plane the class means sit on a circle of radius
    ``separation`` at angles ``2 pi k / K`` plus a plane-specific phase, so
    rotating every plane moves each class towards its neighbour.  A sample is
    the class mean repeated over ``frames`` plus i.i.d. ``N(0, noise^2)``
    per frame and coefficient.  The target domain rotates every plane by
    ``rotation_deg`` and then translates by a vector of length
    ``translation * noise`` along the all-ones direction.
    ``task_seed`` fixes the class geometry; ``seed`` the sample draw.
    """

    num_classes: int = 5
    per_class: int = 20
    frames: int = 32
    num_coeffs: int = 39
    num_pairs: int = 8
    separation: float = 1.0
    noise: float = 1.0
    rotation_deg: float = 0.0
    translation: float = 0.0
    task_seed: int = 0
    seed: int = 0
    id_prefix: str = "utt"
    emotions: tuple[str, ...] | None = None

    def target(self, rotation_deg: float = 30.0, translation: float = 0.5, seed: int | None = None, id_prefix: str = "tgt") -> "SynthSpec":
        from dataclasses import replace

        return replace(
            self, rotation_deg=rotation_deg, translation=translation,
            seed=self.seed + 1 if seed is None else seed, id_prefix=id_prefix,
        )


def _emotion_names(spec: SynthSpec) -> tuple[str, ...]:
    if spec.emotions is not None:
        if len(spec.emotions) != spec.num_classes:
            raise ConfigurationError("need one emotion name per class")
        return tuple(spec.emotions)
    names = list(DEFAULT_EMOTIONS[: spec.num_classes])
    names += [f"class{k}" for k in range(len(names), spec.num_classes)]
    return tuple(sorted(names))


def class_means(spec: SynthSpec) -> np.ndarray:
    if 2 * spec.num_pairs > spec.num_coeffs:
        raise ConfigurationError(f"{spec.num_pairs} planes need {2 * spec.num_pairs} coefficients")
    rng = np.random.default_rng([spec.task_seed, 7919])
    phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.num_pairs)
    angles = 2.0 * np.pi * np.arange(spec.num_classes)[:, None] / spec.num_classes + phases[None, :]
    means = np.zeros((spec.num_classes, spec.num_coeffs))
    means[:, 0 : 2 * spec.num_pairs : 2] = spec.separation * np.cos(angles)
    means[:, 1 : 2 * spec.num_pairs : 2] = spec.separation * np.sin(angles)
    return means


def domain_transform(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """(rotation matrix acting on row vectors, translation vector)."""
    theta = np.deg2rad(spec.rotation_deg)
    rot = np.eye(spec.num_coeffs)
    c, s = np.cos(theta), np.sin(theta)
    for p in range(spec.num_pairs):
        i, j = 2 * p, 2 * p + 1
        # row-vector convention: x @ rot turns (x_i, x_j) by +theta
        rot[i, i], rot[i, j], rot[j, i], rot[j, j] = c, s, -s, c
    # the shift vector has length translation * noise, spread evenly over all coefficients
    shift = np.full(spec.num_coeffs, spec.translation * spec.noise / np.sqrt(spec.num_coeffs))
    return rot, shift


def synth_corpus(spec: SynthSpec) -> Corpus:
    if spec.num_classes < 1 or spec.per_class < 1 or spec.frames < 1:
        raise ConfigurationError("synthetic corpus counts must be >= 1")
    names = _emotion_names(spec)
    means = class_means(spec)
    rot, shift = domain_transform(spec)
    rng = np.random.default_rng(spec.seed)
    items = []
    for k in range(spec.num_classes):
        for i in range(spec.per_class):
            x = means[k] + spec.noise * rng.standard_normal((spec.frames, spec.num_coeffs))
            x = x @ rot + shift
            items.append(
                Utterance(f"{spec.id_prefix}{k:02d}_{i:04d}", MfccFeatures(x, sample_rate=16000), k, names[k])
            )
    return Corpus(items, names)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def kfold_split(labels, k: int = 10, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold partition: ``[(train_idx, test_idx), ...]``.

    Each class is shuffled and dealt round-robin into folds, continuing the
    deal where the previous class stopped, so fold sizes differ by at most one.
    A class with fewer than ``k`` members cannot be stratified and is only
    spread as evenly as the deal allows (with a warning).
    """
    if hasattr(labels, "labels"):
        labels = labels.labels
    labels = np.asarray(labels).reshape(-1)
    n = labels.size
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if n < k:
        raise ConfigurationError(f"{n} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < k:
            log.warning("class %s has %d samples < %d folds; not stratified", cls, members.size, k)
        members = rng.permutation(members)
        fold_of[members] = (offset + np.arange(members.size)) % k
        offset += members.size
    folds = []
    everything = np.arange(n)
    for f in range(k):
        test = everything[fold_of == f]
        folds.append((everything[fold_of != f], test))
    return folds
