"""WAV decoding, resampling, and fixed-length chunking.

Everything downstream assumes mono 44.1 kHz audio; decode_wav and resample
normalize arbitrary RIFF/WAVE input to that form, chunk slices it into
one-second windows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample as _fft_resample


class AudioError(Exception):
    """Base class for audio decode failures."""


class UnreadableFileError(AudioError):
    """File missing, truncated, or not a RIFF/WAVE container."""


class UnsupportedFormatError(AudioError):
    """Container is WAVE but codec, bit depth, or channel count is not supported."""


class EmptyAudioError(AudioError):
    """WAVE file with a zero-length data chunk."""


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio: float samples in [-1, 1] plus the sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class AudioChunk:
    """Fixed-length window cut from a recording.

    samples always holds exactly chunk_seconds * sample_rate values; windows
    extending past the end of the recording are zero-padded.
    """

    samples: np.ndarray
    source_offset: float


_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def decode_wav(path: str | Path) -> AudioBuffer:
    """Decode a RIFF/WAVE file to a mono AudioBuffer.

    Supports PCM 16-bit and IEEE float 32-bit, 1 or 2 channels. Stereo is
    mixed to mono by arithmetic mean; integer samples are scaled by 1/32768.

    Raises:
        UnreadableFileError: missing file, truncated container, or not WAVE.
        UnsupportedFormatError: codec, bit depth, or channel count outside
            the supported set.
        EmptyAudioError: the data chunk holds zero samples.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UnreadableFileError(f"cannot read {path}: {exc}") from exc

    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise UnreadableFileError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise UnreadableFileError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise UnreadableFileError(f"{path}: missing fmt or data chunk")
    if len(fmt) < 16:
        raise UnreadableFileError(f"{path}: malformed fmt chunk")

    tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 26:
        (tag,) = struct.unpack_from("<H", fmt, 24)  # SubFormat leading u16

    if channels not in (1, 2):
        raise UnsupportedFormatError(f"{path}: {channels} channels (want 1 or 2)")
    if rate <= 0:
        raise UnsupportedFormatError(f"{path}: invalid sample rate {rate}")

    if tag == _WAVE_FORMAT_PCM and bits == 16:
        frame = 2 * channels
        data = data[: len(data) - len(data) % frame]
        x = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        frame = 4 * channels
        data = data[: len(data) - len(data) % frame]
        x = np.frombuffer(data, dtype="<f4").astype(np.float32)
    else:
        raise UnsupportedFormatError(f"{path}: format tag {tag} / {bits}-bit unsupported")

    if x.size == 0:
        raise EmptyAudioError(f"{path}: zero-length data chunk")
    if channels == 2:
        x = x.reshape(-1, 2).mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise UnreadableFileError(f"{path}: non-finite sample values")
    return AudioBuffer(samples=np.ascontiguousarray(x, dtype=np.float32), sample_rate=int(rate))


def write_wav_pcm16(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float samples in [-1, 1] as a 16-bit PCM WAV file."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    data = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, _WAVE_FORMAT_PCM, 1, sample_rate, sample_rate * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(data))
    Path(path).write_bytes(header + data)


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Resample to target_rate, preserving tone frequencies.

    Output length is round(n * target / source). Same-rate input is returned
    unchanged (bit-identical samples).
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == buf.sample_rate:
        return buf
    n_out = int(round(len(buf.samples) * target_rate / buf.sample_rate))
    y = _fft_resample(buf.samples.astype(np.float64), n_out)
    return AudioBuffer(samples=y.astype(np.float32), sample_rate=target_rate)


def chunk(buf: AudioBuffer, chunk_seconds: float = 1.0, hop_seconds: float = 1.0) -> list[AudioChunk]:
    """Slice a buffer into fixed-length windows.

    Non-overlapping by default. A trailing remainder covering at least half a
    chunk is zero-padded into a final chunk; a shorter remainder is dropped.
    A recording shorter than one chunk yields exactly one zero-padded chunk.
    An empty buffer yields an empty list.
    """
    if chunk_seconds <= 0 or hop_seconds <= 0:
        raise ValueError("chunk_seconds and hop_seconds must be positive")
    x = buf.samples
    n = len(x)
    if n == 0:
        return []
    clen = int(round(chunk_seconds * buf.sample_rate))
    hop = int(round(hop_seconds * buf.sample_rate))

    def padded(start: int) -> np.ndarray:
        seg = x[start : start + clen]
        if len(seg) < clen:
            seg = np.concatenate([seg, np.zeros(clen - len(seg), dtype=x.dtype)])
        return seg

    if n < clen:
        return [AudioChunk(samples=padded(0), source_offset=0.0)]

    chunks = []
    k_max = (n - clen) // hop
    for k in range(k_max + 1):
        start = k * hop
        chunks.append(AudioChunk(samples=x[start : start + clen].copy(), source_offset=start / buf.sample_rate))
    tail_start = (k_max + 1) * hop
    remainder = n - tail_start
    if remainder * 2 >= clen:
        chunks.append(AudioChunk(samples=padded(tail_start), source_offset=tail_start / buf.sample_rate))
    return chunks
