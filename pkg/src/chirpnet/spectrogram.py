"""Band-limited log-mel spectrograms, 128 rows x 256 columns per one-second chunk.

The STFT uses 1024-point Hann frames with a 172-sample hop, reflect-centered,
which yields at least 257 frames per second at 44.1 kHz; the first 256 are
kept. Band limiting lives in the filterbank: FFT bins outside [f_min, f_max]
get zero weight in every filter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioChunk

BSPC_MAGIC = b"BSPC"
BSPC_VERSION = 1


class SpectrogramFormatError(Exception):
    """Raised for malformed .bspc files."""


@dataclass(frozen=True)
class SpectrogramParams:
    sample_rate: int = 44100
    chunk_seconds: float = 1.0
    n_fft: int = 1024
    hop: int = 172
    n_mels: int = 128
    n_cols: int = 256
    f_min: float = 300.0
    f_max: float = 15000.0
    log_floor: float = 1e-6  # relative to the grid maximum

    @property
    def expected_samples(self) -> int:
        return int(round(self.sample_rate * self.chunk_seconds))


def hz_to_mel(f):
    """HTK mel scale: 2595 * log10(1 + f/700). Monotone, mel(0) = 0."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters over rfft bins.

    weights: (n_mels, n_fft//2 + 1), non-negative, zero outside [f_min, f_max].
    centers_hz: peak frequency of each filter, strictly increasing.
    """

    weights: np.ndarray
    centers_hz: np.ndarray
    f_min: float
    f_max: float


def build_filterbank(
    n_mels: int = 128,
    f_min: float = 300.0,
    f_max: float = 15000.0,
    n_fft: int = 1024,
    sample_rate: int = 44100,
) -> MelFilterbank:
    """Build n_mels triangular filters equally spaced on the mel axis.

    Filter i spans mel edges (e[i], e[i+2]) and peaks at e[i+1], where the
    e[j] are n_mels + 2 points from mel(f_min) to mel(f_max). Bins whose
    center frequency falls outside [f_min, f_max] are zeroed in every filter.

    Raises:
        ValueError: f_max above Nyquist, or a filter would end up with no
            strictly positive weight (too many mels for the bins in band).
    """
    nyquist = sample_rate / 2.0
    if not (0 <= f_min < f_max):
        raise ValueError(f"need 0 <= f_min < f_max, got {f_min}, {f_max}")
    if f_max > nyquist:
        raise ValueError(f"f_max {f_max} above Nyquist {nyquist}")

    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * (sample_rate / n_fft)
    edges_mel = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    edges_hz = mel_to_hz(edges_mel)

    lower = edges_hz[:-2][:, None]
    center = edges_hz[1:-1][:, None]
    upper = edges_hz[2:][:, None]
    rise = (bin_hz[None, :] - lower) / (center - lower)
    fall = (upper - bin_hz[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rise, fall))

    in_band = (bin_hz >= f_min) & (bin_hz <= f_max)
    weights *= in_band[None, :]

    if not np.all((weights > 0).any(axis=1)):
        empty = int(np.flatnonzero(~(weights > 0).any(axis=1))[0])
        raise ValueError(
            f"filter {empty} has no positive weight: n_mels={n_mels} too large "
            f"for the FFT bins inside [{f_min}, {f_max}] Hz"
        )
    return MelFilterbank(
        weights=weights.astype(np.float64),
        centers_hz=edges_hz[1:-1].copy(),
        f_min=f_min,
        f_max=f_max,
    )


def filterbank_for(params: SpectrogramParams) -> MelFilterbank:
    """Filterbank matching a parameter set."""
    return build_filterbank(
        n_mels=params.n_mels,
        f_min=params.f_min,
        f_max=params.f_max,
        n_fft=params.n_fft,
        sample_rate=params.sample_rate,
    )


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Reflect-centered Hann STFT magnitudes, shape (n_fft//2 + 1, n_frames)."""
    x = np.asarray(samples, dtype=np.float64)
    pad = n_fft // 2
    x = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (len(x) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[:: hop][:n_frames]
    win = _hann_periodic(n_fft)
    return np.abs(np.fft.rfft(frames * win, axis=1)).T


def extract(chunk: AudioChunk, params: SpectrogramParams, bank: MelFilterbank | None = None) -> np.ndarray:
    """One-second chunk -> normalized log-mel grid, shape (n_mels, n_cols).

    STFT magnitude, filterbank projection, log compression with a floor
    relative to the grid maximum, then per-spectrogram min-max scaling to
    [0, 1]. A constant grid (digital silence included) maps to all zeros.
    Frame count is cropped to the first n_cols columns and right-padded with
    silence if the STFT produced fewer.
    """
    if len(chunk.samples) != params.expected_samples:
        raise ValueError(
            f"chunk has {len(chunk.samples)} samples, expected {params.expected_samples}"
        )
    if bank is None:
        bank = build_filterbank(params.n_mels, params.f_min, params.f_max, params.n_fft, params.sample_rate)

    mag = stft_magnitude(chunk.samples, params.n_fft, params.hop)
    mel = bank.weights @ mag
    if mel.shape[1] >= params.n_cols:
        mel = mel[:, : params.n_cols]
    else:
        mel = np.pad(mel, ((0, 0), (0, params.n_cols - mel.shape[1])))

    peak = mel.max()
    if peak <= 0.0:
        return np.zeros((params.n_mels, params.n_cols), dtype=np.float32)
    # Floor relative to the peak keeps the normalized grid invariant to input gain.
    v = np.log(mel + params.log_floor * peak)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros((params.n_mels, params.n_cols), dtype=np.float32)
    return ((v - lo) / (hi - lo)).astype(np.float32)


def save_bspc(path: str | Path, spec: np.ndarray) -> None:
    """Write a spectrogram as BSPC v1: magic, u32 version/rows/cols, f32 row-major."""
    spec = np.asarray(spec, dtype="<f4")
    if spec.ndim != 2:
        raise ValueError(f"expected a 2-d grid, got shape {spec.shape}")
    rows, cols = spec.shape
    with open(path, "wb") as fh:
        fh.write(BSPC_MAGIC)
        fh.write(struct.pack("<III", BSPC_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(spec).tobytes())


def load_bspc(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != BSPC_MAGIC:
        raise SpectrogramFormatError(f"{path}: bad magic")
    version, rows, cols = struct.unpack_from("<III", raw, 4)
    if version != BSPC_VERSION:
        raise SpectrogramFormatError(f"{path}: unsupported version {version}")
    need = 16 + 4 * rows * cols
    if len(raw) < need:
        raise SpectrogramFormatError(f"{path}: truncated ({len(raw)} < {need} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=16)
    return data.reshape(rows, cols).copy()


def export_pgm(path: str | Path, spec: np.ndarray) -> None:
    """8-bit PGM dump for visual inspection; high frequencies at the top."""
    g = np.round(np.clip(np.asarray(spec, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    g = g[::-1]  # row 0 is the lowest band; flip so the image reads naturally
    rows, cols = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(g.tobytes())
