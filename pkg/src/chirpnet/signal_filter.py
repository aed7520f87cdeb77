"""Rule-based signal/noise scoring of spectrogram chunks.

Pixels far above both their row and column medians are kept, despeckled with
binary morphology, and the fraction of time columns still covered becomes the
score. Chunks scoring below the threshold are routed to the noise pool.
Ranking, not perfection, is the contract: clear calls score high, steady
noise scores near zero, noise plus an actual call lands in between.

The multiplicative median rule is defined on linear magnitudes, but pipeline
spectrograms arrive log-scaled and min-max normalized, so the mask step first
maps values back to a relative linear scale via u -> LOG_RANGE**u; on that
scale "3x the median" means what it says. Grids that are already linear
(zeros with isolated peaks, constant grids) keep their stated behavior
because the map is strictly monotone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

DEFAULT_ROW_FACTOR = 3.0
DEFAULT_COL_FACTOR = 3.0
DEFAULT_THRESHOLD = 0.16
# Assumed dynamic range of a normalized grid when mapping back to linear
# scale. Min-max normalization stretches every grid to [0,1] whatever its
# true range, so this is a calibration constant, not the log floor inverse:
# 1e4 keeps clear calls firing the 3x rule while steady noise stays under it.
LOG_RANGE = 1e4


@dataclass(frozen=True)
class SignalDecision:
    score: float
    accepted: bool
    threshold: float


def median_clip(
    spec: np.ndarray,
    row_factor: float = DEFAULT_ROW_FACTOR,
    col_factor: float = DEFAULT_COL_FACTOR,
) -> np.ndarray:
    """Mask of pixels exceeding row_factor x row median AND col_factor x column median.

    Comparisons run on the de-logged grid (see module docstring), which is a
    strictly increasing transform, so mask pixels are exactly the ones whose
    linear magnitude clears both multiplicative thresholds.
    """
    spec = np.asarray(spec, dtype=np.float64)
    linear = np.power(LOG_RANGE, spec)
    row_med = np.median(linear, axis=1, keepdims=True)
    col_med = np.median(linear, axis=0, keepdims=True)
    return (linear > row_factor * row_med) & (linear > col_factor * col_med)


def morphological_filter(mask: np.ndarray) -> np.ndarray:
    """Despeckle: 2x2 binary erosion then 3x3 binary dilation.

    Isolated single pixels vanish; solid blobs survive roughly at size.
    """
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=np.ones((2, 2), dtype=bool))
    return ndimage.binary_dilation(eroded, structure=np.ones((3, 3), dtype=bool))


def signal_score(
    spec: np.ndarray,
    row_factor: float = DEFAULT_ROW_FACTOR,
    col_factor: float = DEFAULT_COL_FACTOR,
) -> float:
    """Fraction of time columns containing at least one surviving mask pixel, in [0, 1]."""
    mask = morphological_filter(median_clip(spec, row_factor, col_factor))
    n_cols = mask.shape[1]
    return float(mask.any(axis=0).sum()) / n_cols


def classify_chunk(
    spec: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    row_factor: float = DEFAULT_ROW_FACTOR,
    col_factor: float = DEFAULT_COL_FACTOR,
) -> SignalDecision:
    """Accept iff score >= threshold (boundary inclusive)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    score = signal_score(spec, row_factor, col_factor)
    return SignalDecision(score=score, accepted=score >= threshold, threshold=threshold)
