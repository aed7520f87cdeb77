"""Recording-level prediction, chunk-probability pooling, and ranking metric.

A recording is decoded, resampled if needed, cut into one-second chunks,
converted to spectrograms, optionally filtered by the signal detector, and
run through the model in infer mode. Chunk probabilities are pooled into a
single score vector per recording; several recordings' score vectors are
ranked against ground-truth label sets by mean label ranking average
precision (MLRAP), which reduces to mean reciprocal rank when every
recording carries a single label.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import chunk, decode_wav, resample
from .model import Model
from .signal_filter import classify_chunk
from .spectrogram import MelFilterbank, SpectrogramParams, extract, filterbank_for


@dataclass(frozen=True)
class PredictionSet:
    """Chunk-level probabilities and the pooled per-class score vector."""

    recording_id: str
    chunk_probs: np.ndarray
    pooled_scores: np.ndarray

    def __post_init__(self) -> None:
        if self.chunk_probs.ndim != 2:
            raise ValueError("chunk_probs must be a 2-d matrix")
        if self.pooled_scores.shape != (self.chunk_probs.shape[1],):
            raise ValueError("pooled_scores length must match class count")


def pool_mean_exp(chunk_probs: np.ndarray) -> np.ndarray:
    """Mean of (2p)^2 over chunks, per class; range [0, 4], unnormalized."""
    probs = np.asarray(chunk_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise ValueError("need at least one chunk row")
    return np.mean((2.0 * probs) ** 2, axis=0)


def pool_mean(chunk_probs: np.ndarray) -> np.ndarray:
    """Arithmetic column mean over chunks."""
    probs = np.asarray(chunk_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise ValueError("need at least one chunk row")
    return np.mean(probs, axis=0)


POOL_MODES = {"mean_exp": pool_mean_exp, "mean": pool_mean}


def ensemble(pooled: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of pooled score vectors from several models."""
    if len(pooled) < 1:
        raise ValueError("need at least one score vector")
    first = np.asarray(pooled[0], dtype=np.float64)
    for v in pooled[1:]:
        if np.shape(v) != first.shape:
            raise ValueError("class-count mismatch between ensemble members")
    return np.mean([np.asarray(v, dtype=np.float64) for v in pooled], axis=0)


def lrap(scores: np.ndarray, labels: Sequence[int]) -> float:
    """Label ranking average precision for one recording.

    rank(y) counts every class scoring >= score[y] (ties count against the
    label). Each true label contributes the fraction of true labels at its
    rank or better, divided by its rank.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(labels) == 0:
        raise ValueError("label set must be non-empty")
    label_list = list(labels)
    for y in label_list:
        if not 0 <= y < scores.shape[0]:
            raise ValueError(f"label id {y} out of range for {scores.shape[0]} classes")
    ranks = np.array(
        [int(np.sum(scores >= scores[y])) for y in label_list], dtype=np.int64
    )
    total = 0.0
    for r in ranks:
        total += np.sum(ranks <= r) / r
    return total / len(label_list)


def mlrap(
    scores: Sequence[np.ndarray], label_sets: Sequence[Sequence[int]]
) -> float:
    """Mean LRAP over recordings."""
    if len(scores) != len(label_sets):
        raise ValueError("scores and label_sets must align")
    if len(scores) == 0:
        raise ValueError("need at least one recording")
    return float(np.mean([lrap(s, ls) for s, ls in zip(scores, label_sets)]))


def predict_recording(
    model: Model,
    path: Path | str,
    params: SpectrogramParams = SpectrogramParams(),
    snr_filter: bool = False,
    snr_threshold: float | None = None,
    pool: str = "mean_exp",
    bank: MelFilterbank | None = None,
    batch_size: int = 16,
) -> PredictionSet:
    """Chunk, extract, optionally filter, and pool one recording.

    With the SNR filter on, chunks the detector rejects are dropped; if
    every chunk is rejected the filter is bypassed so the result is never
    empty.
    """
    if pool not in POOL_MODES:
        raise ValueError(f"pool must be one of {sorted(POOL_MODES)}")
    path = Path(path)
    buf = decode_wav(path)
    if buf.sample_rate != params.sample_rate:
        buf = resample(buf, params.sample_rate)
    if bank is None:
        bank = filterbank_for(params)
    pieces = chunk(buf, params.chunk_seconds, params.chunk_seconds)
    specs = [extract(c, params, bank) for c in pieces]
    if snr_filter:
        kwargs = {} if snr_threshold is None else {"threshold": snr_threshold}
        kept = [s for s in specs if classify_chunk(s, **kwargs).accepted]
        if kept:
            specs = kept
    probs = np.empty((len(specs), model.config.n_classes), dtype=np.float64)
    for start in range(0, len(specs), batch_size):
        batch = np.stack(specs[start : start + batch_size])[:, None, :, :]
        probs[start : start + batch.shape[0]] = model.predict_probs(
            batch.astype(np.float32)
        )
    pooled = POOL_MODES[pool](probs)
    return PredictionSet(
        recording_id=path.stem, chunk_probs=probs, pooled_scores=pooled
    )


def top_k_rows(
    pred: PredictionSet,
    class_names: Sequence[str],
    k: int = 10,
    normalize: bool = False,
) -> list[tuple[str, str, float]]:
    """(recording_id, class_name, score) rows sorted by descending score."""
    scores = pred.pooled_scores.astype(np.float64)
    if normalize:
        peak = scores.max()
        if peak > 0:
            scores = scores / peak
    order = np.argsort(-scores, kind="stable")[: max(k, 0)]
    return [(pred.recording_id, class_names[i], float(scores[i])) for i in order]
