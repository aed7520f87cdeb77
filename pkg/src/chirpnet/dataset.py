"""Corpus indexing, splitting, label maps, augmentation, and batching.

A corpus on disk is a directory with one subdirectory per class holding
``.bspc`` spectrogram files, plus an optional ``noise/`` subdirectory with
rejected (signal-free) spectrograms used for noise augmentation::

    corpus/
        species_00/chunk_000.bspc
        species_01/...
        noise/...

Class ids are assigned by sorting class directory names lexicographically,
so the mapping is stable across rescans of the same tree.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .spectrogram import load_bspc

NOISE_DIR_NAME = "noise"


class CorpusError(Exception):
    """Raised when a corpus directory cannot be indexed."""


@dataclass(frozen=True)
class CorpusIndex:
    """Snapshot of a corpus tree: class names, labeled samples, noise pool.

    ``samples`` holds ``(path, class_id)`` pairs; ids index into ``classes``.
    """

    classes: tuple[str, ...]
    samples: tuple[tuple[Path, int], ...]
    noise_pool: tuple[Path, ...] = ()

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_counts(self) -> list[int]:
        counts = [0] * len(self.classes)
        for _, cid in self.samples:
            counts[cid] += 1
        return counts


@dataclass(frozen=True)
class LabeledSample:
    """One spectrogram with its foreground class and optional background set.

    Background ids never include the foreground and are used only when
    scoring predictions, never as training targets.
    """

    spectrogram: np.ndarray
    foreground: int
    background: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if self.foreground in self.background:
            raise ValueError("foreground id also listed as background")


@dataclass(frozen=True)
class AugmentConfig:
    max_roll: int = 12
    noise_prob: float = 0.5
    blend_lo: float = 0.2
    blend_hi: float = 0.6

    def __post_init__(self) -> None:
        if self.max_roll < 0:
            raise ValueError("max_roll must be >= 0")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ValueError("noise_prob must be in [0, 1]")
        if not 0.0 <= self.blend_lo <= self.blend_hi:
            raise ValueError("need 0 <= blend_lo <= blend_hi")


def scan_corpus(root: Path | str) -> CorpusIndex:
    """Index a corpus tree, assigning dense class ids in sorted-name order."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root is not a directory: {root}")
    class_dirs = sorted(
        d for d in root.iterdir() if d.is_dir() and d.name != NOISE_DIR_NAME
    )
    if not class_dirs:
        raise CorpusError(f"no class directories under {root}")
    classes = tuple(d.name for d in class_dirs)
    samples: list[tuple[Path, int]] = []
    for cid, d in enumerate(class_dirs):
        files = sorted(d.glob("*.bspc"))
        if not files:
            warnings.warn(f"class directory has no samples: {d}", stacklevel=2)
        samples.extend((f, cid) for f in files)
    noise_dir = root / NOISE_DIR_NAME
    noise = tuple(sorted(noise_dir.glob("*.bspc"))) if noise_dir.is_dir() else ()
    return CorpusIndex(classes=classes, samples=tuple(samples), noise_pool=noise)


def split(
    index: CorpusIndex, val_fraction: float = 0.05, seed: int = 0
) -> tuple[CorpusIndex, CorpusIndex]:
    """Stratified train/validation split, deterministic for a given seed.

    Every class with at least two samples contributes at least one
    validation sample; a single-sample class stays entirely in train.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    rng = np.random.Generator(np.random.PCG64(seed))
    by_class: list[list[int]] = [[] for _ in index.classes]
    for i, (_, cid) in enumerate(index.samples):
        by_class[cid].append(i)
    val_ids: set[int] = set()
    for cid, ids in enumerate(by_class):
        n = len(ids)
        if n < 2:
            if n == 1:
                warnings.warn(
                    f"class {index.classes[cid]!r} has a single sample; "
                    "keeping it in train",
                    stacklevel=2,
                )
            continue
        n_val = min(max(1, round(n * val_fraction)), n - 1)
        order = rng.permutation(n)
        val_ids.update(ids[j] for j in order[:n_val])
    train_samples = tuple(
        s for i, s in enumerate(index.samples) if i not in val_ids
    )
    val_samples = tuple(s for i, s in enumerate(index.samples) if i in val_ids)
    mk = lambda ss: CorpusIndex(  # noqa: E731
        classes=index.classes, samples=ss, noise_pool=index.noise_pool
    )
    return mk(train_samples), mk(val_samples)


def augment(
    spec: np.ndarray,
    noise_pool: Sequence[np.ndarray],
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
) -> np.ndarray:
    """Vertical wrap-roll plus probabilistic noise blend.

    The roll moves input row r to row (r + k) mod n_rows with k drawn
    uniformly from [-max_roll, +max_roll]. With probability ``noise_prob``
    a noise spectrogram is blended in: clamp(spec + a * noise, 0, 1) with
    a uniform in [blend_lo, blend_hi]. An empty noise pool silently skips
    the blend step.
    """
    k = int(rng.integers(-cfg.max_roll, cfg.max_roll + 1))
    out = np.roll(spec, k, axis=0)
    if len(noise_pool) > 0 and rng.random() < cfg.noise_prob:
        noise = noise_pool[int(rng.integers(len(noise_pool)))]
        if noise.shape != spec.shape:
            raise ValueError(
                f"noise shape {noise.shape} does not match spectrogram {spec.shape}"
            )
        alpha = rng.uniform(cfg.blend_lo, cfg.blend_hi)
        out = np.clip(out + alpha * noise, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def load_noise_pool(index: CorpusIndex, limit: int | None = None) -> list[np.ndarray]:
    """Materialize the (possibly truncated) noise pool into memory."""
    paths = index.noise_pool if limit is None else index.noise_pool[:limit]
    return [load_bspc(p) for p in paths]


def make_batches(
    index: CorpusIndex,
    batch_size: int,
    rng: np.random.Generator,
    augment_on: bool = False,
    noise_pool: Sequence[np.ndarray] | None = None,
    aug_cfg: AugmentConfig = AugmentConfig(),
    cache: dict[Path, np.ndarray] | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled epoch over the index as (N,1,H,W) float32 batches.

    The final partial batch is emitted. ``cache`` maps paths to loaded
    spectrograms and is filled on first use; pass the same dict across
    epochs to avoid rereading files.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(index.samples)
    if n == 0:
        return
    if noise_pool is None:
        noise_pool = ()
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        ids = order[start : start + batch_size]
        specs = []
        labels = np.empty(len(ids), dtype=np.int64)
        for j, i in enumerate(ids):
            path, cid = index.samples[i]
            if cache is not None:
                spec = cache.get(path)
                if spec is None:
                    spec = load_bspc(path)
                    cache[path] = spec
            else:
                spec = load_bspc(path)
            if augment_on:
                spec = augment(spec, noise_pool, rng, aug_cfg)
            specs.append(spec)
            labels[j] = cid
        x = np.stack(specs)[:, None, :, :].astype(np.float32, copy=False)
        yield x, labels


def save_label_map(path: Path | str, classes: Sequence[str]) -> None:
    """Write the class id to name mapping as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "class_name"])
        for i, name in enumerate(classes):
            w.writerow([i, name])


def load_label_map(path: Path | str) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["class_id", "class_name"]:
        raise CorpusError(f"not a label map file: {path}")
    names = [""] * (len(rows) - 1)
    for row in rows[1:]:
        names[int(row[0])] = row[1]
    return names


@dataclass(frozen=True)
class GroundTruth:
    """Per-recording evaluation labels keyed by recording id."""

    foreground: dict[str, str] = field(default_factory=dict)
    background: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def label_set(self, recording_id: str) -> tuple[str, ...]:
        fg = self.foreground[recording_id]
        return (fg,) + tuple(
            b for b in self.background.get(recording_id, ()) if b != fg
        )


def save_ground_truth(
    path: Path | str,
    rows: Sequence[tuple[str, str, Sequence[str]]],
) -> None:
    """Write (recording_id, foreground, background list) rows as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["recording_id", "foreground_id", "background_ids"])
        for rec_id, fg, bgs in rows:
            w.writerow([rec_id, fg, ";".join(bgs)])


def load_ground_truth(path: Path | str) -> GroundTruth:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["recording_id", "foreground_id", "background_ids"]:
        raise CorpusError(f"not a ground truth file: {path}")
    fg: dict[str, str] = {}
    bg: dict[str, tuple[str, ...]] = {}
    for row in rows[1:]:
        rec_id, fore, backs = row[0], row[1], row[2]
        fg[rec_id] = fore
        bg[rec_id] = tuple(b for b in backs.split(";") if b) if backs else ()
    return GroundTruth(foreground=fg, background=bg)
