"""Synthetic corpus: class designs, call rendering, SNR mixing, tree layout."""

import hashlib

import numpy as np
import pytest

from chirpnet.audio import AudioChunk, decode_wav
from chirpnet.dataset import load_ground_truth
from chirpnet.signal_filter import classify_chunk
from chirpnet.spectrogram import SpectrogramParams, extract, filterbank_for, hz_to_mel
from chirpnet.synth import (
    MAX_CLASSES,
    PEAK_AMPLITUDE,
    SAMPLE_RATE,
    SynthClassSpec,
    _file_rng,
    class_spec,
    generate_corpus,
    mix_at_snr,
    pink_noise,
    render_call_train,
)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_class_specs_valid_at_all_sizes():
    for n in (2, 5, 10, 32, MAX_CLASSES):
        for cid in range(n):
            spec = class_spec(cid, n)  # __post_init__ validates
            assert spec.class_id == cid


def test_class_spec_is_pure():
    assert class_spec(3, 10) == class_spec(3, 10)
    # same identity regardless of who asks, so a corpus built with another
    # seed still contains the same species
    a = class_spec(7, 12)
    b = class_spec(7, 12)
    assert a.f_start == b.f_start and a.period == b.period


def test_class_spec_direction_alternates():
    for cid in range(10):
        spec = class_spec(cid, 10)
        if cid % 2 == 0:
            assert spec.f_end > spec.f_start
        else:
            assert spec.f_end < spec.f_start


def test_class_starts_separated_on_mel_grid():
    # map sweep starts onto the 128-band analysis grid: all distinct, gap >= 2
    edges = np.linspace(hz_to_mel(300.0), hz_to_mel(15000.0), 130)[1:-1]
    bands = []
    for cid in range(10):
        m = hz_to_mel(class_spec(cid, 10).f_start)
        bands.append(int(np.argmin(np.abs(edges - m))))
    assert sorted(bands) == bands
    assert min(np.diff(bands)) >= 2


def test_classes_distinct_under_vertical_translation():
    # cues a row-roll cannot erase: direction, extent, harmonics, timing
    for n in (10, 32):
        cues = set()
        for cid in range(n):
            s = class_spec(cid, n)
            cues.add(
                (
                    s.f_end > s.f_start,
                    round(abs(hz_to_mel(s.f_end) - hz_to_mel(s.f_start)), 3),
                    s.harmonics,
                    round(s.chirp_duration, 3),
                    round(s.period, 3),
                )
            )
        assert len(cues) == n


def test_class_spec_validation():
    with pytest.raises(ValueError):
        class_spec(0, 1)
    with pytest.raises(ValueError):
        class_spec(10, 10)
    with pytest.raises(ValueError):
        class_spec(0, MAX_CLASSES + 1)
    with pytest.raises(ValueError):
        SynthClassSpec(0, 100.0, 900.0, 1, 0.2, 0.5)  # start below band
    with pytest.raises(ValueError):
        SynthClassSpec(0, 900.0, 1200.0, 4, 0.2, 0.5)
    with pytest.raises(ValueError):
        SynthClassSpec(0, 900.0, 1200.0, 1, 0.6, 0.5)  # call outlasts period
    with pytest.raises(ValueError):
        SynthClassSpec(0, 900.0, 1200.0, 1, 0.2, 0.96)


def test_render_spectral_corridor():
    spec = class_spec(2, 10)
    sig = render_call_train(spec, 2 * SAMPLE_RATE, _file_rng(0, 2, 0))
    assert np.abs(sig).max() > 0
    power = np.abs(np.fft.rfft(sig)) ** 2
    freqs = np.fft.rfftfreq(len(sig), 1.0 / SAMPLE_RATE)
    lo = 0.9 * min(spec.f_start, spec.f_end)
    hi = 1.1 * spec.harmonics * max(spec.f_start, spec.f_end)
    inside = power[(freqs >= lo) & (freqs <= hi)].sum()
    assert inside / power.sum() > 0.9


def test_render_repeats_with_period():
    spec = class_spec(0, 10)
    sig = render_call_train(spec, 3 * SAMPLE_RATE, _file_rng(0, 0, 0))
    # every one-second window holds at least one full call
    for sec in range(3):
        window = sig[sec * SAMPLE_RATE : (sec + 1) * SAMPLE_RATE]
        assert np.sqrt(np.mean(window**2)) > 0.01


def test_render_deterministic_per_rng():
    spec = class_spec(1, 10)
    a = render_call_train(spec, SAMPLE_RATE, _file_rng(5, 1, 0))
    b = render_call_train(spec, SAMPLE_RATE, _file_rng(5, 1, 0))
    c = render_call_train(spec, SAMPLE_RATE, _file_rng(6, 1, 0))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)  # onset jitter differs


def test_pink_noise_profile():
    noise = pink_noise(4 * SAMPLE_RATE, _file_rng(1, 0))
    assert len(noise) == 4 * SAMPLE_RATE
    assert np.sqrt(np.mean(noise**2)) == pytest.approx(1.0, rel=1e-9)
    power = np.abs(np.fft.rfft(noise)) ** 2
    freqs = np.fft.rfftfreq(len(noise), 1.0 / SAMPLE_RATE)
    low = power[(freqs > 100) & (freqs < 200)].mean()
    high = power[(freqs > 6400) & (freqs < 12800)].mean()
    assert low > 10 * high


def test_mix_at_snr_composition():
    rng = _file_rng(2, 0)
    spec = class_spec(0, 10)
    sig = render_call_train(spec, SAMPLE_RATE, rng)
    noise = pink_noise(SAMPLE_RATE, rng)
    out = mix_at_snr(sig, noise, 10.0)
    gain = np.sqrt(np.mean(sig**2)) / 10.0 ** (10.0 / 20.0)
    raw = sig + gain * noise
    assert np.allclose(out, raw * (PEAK_AMPLITUDE / np.abs(raw).max()))
    assert np.abs(out).max() == pytest.approx(PEAK_AMPLITUDE)


def test_mix_at_snr_noise_only():
    noise = pink_noise(SAMPLE_RATE, _file_rng(3, 0))
    out = mix_at_snr(np.zeros(SAMPLE_RATE), noise, float("-inf"))
    assert np.allclose(out, noise * (PEAK_AMPLITUDE / np.abs(noise).max()))


def test_mix_at_snr_errors():
    noise = pink_noise(1024, _file_rng(4, 0))
    with pytest.raises(ValueError):
        mix_at_snr(np.zeros(1024), noise, 10.0)
    with pytest.raises(ValueError):
        mix_at_snr(np.zeros(1024), np.zeros(1024), float("-inf"))


def test_corpus_byte_identical_across_runs(tmp_path):
    kw = dict(n_classes=2, files_per_class=3, duration_s=1.0, snr_db=10.0, seed=5)
    a = generate_corpus(out_dir=tmp_path / "a", **kw)
    b = generate_corpus(out_dir=tmp_path / "b", **kw)
    assert tree_digest(a.root) == tree_digest(b.root)
    c = generate_corpus(out_dir=tmp_path / "c", **{**kw, "seed": 6})
    assert tree_digest(a.root) != tree_digest(c.root)


def test_corpus_tree_layout(tmp_path):
    summary = generate_corpus(
        n_classes=3, files_per_class=5, duration_s=1.0, snr_db=12.0,
        seed=9, out_dir=tmp_path / "c",
    )
    assert summary.classes == ("species_00", "species_01", "species_02")
    assert summary.n_recordings == 15
    assert summary.n_noise_files == 2  # max(2, 5 // 5)
    wavs = sorted(p.name for p in (summary.root / "species_01").glob("*.wav"))
    assert wavs == [f"species_01_r{i:03d}.wav" for i in range(5)]
    assert len(list((summary.root / "noise").glob("*.wav"))) == 2

    gt = load_ground_truth(summary.ground_truth_path)
    assert len(gt.foreground) == 15
    assert gt.foreground["species_01_r000.wav".removesuffix(".wav")] == "species_01"
    # every 5th file carries one background species distinct from the fg
    for cid in range(3):
        rec = f"species_{cid:02d}_r004"
        assert len(gt.background[rec]) == 1
        assert gt.background[rec][0] != f"species_{cid:02d}"
        assert gt.background[rec][0] in summary.classes
    assert gt.background["species_00_r000"] == ()


def test_corpus_recordings_decode(tmp_path):
    summary = generate_corpus(
        n_classes=2, files_per_class=2, duration_s=1.5, snr_db=6.0,
        seed=11, out_dir=tmp_path / "c",
    )
    path = summary.root / "species_00" / "species_00_r000.wav"
    buf = decode_wav(path)
    assert buf.sample_rate == SAMPLE_RATE
    assert len(buf.samples) == int(1.5 * SAMPLE_RATE)
    assert np.abs(buf.samples).max() <= PEAK_AMPLITUDE + 1.0 / 32768


def test_noise_only_corpus_rejected_by_filter(tmp_path):
    summary = generate_corpus(
        n_classes=2, files_per_class=2, duration_s=1.0, snr_db=float("-inf"),
        seed=13, out_dir=tmp_path / "c",
    )
    params = SpectrogramParams()
    bank = filterbank_for(params)
    decisions = []
    for wav in sorted(summary.root.rglob("*.wav")):
        buf = decode_wav(wav)
        spec = extract(
            AudioChunk(samples=buf.samples, source_offset=0.0), params, bank
        )
        decisions.append(classify_chunk(spec).accepted)
    assert len(decisions) == 6
    assert not any(decisions)


def test_generate_corpus_validation(tmp_path):
    with pytest.raises(ValueError):
        generate_corpus(1, 2, 1.0, 10.0, 0, tmp_path / "x")
    with pytest.raises(ValueError):
        generate_corpus(2, 0, 1.0, 10.0, 0, tmp_path / "x")
    with pytest.raises(ValueError):
        generate_corpus(2, 2, 0.0, 10.0, 0, tmp_path / "x")
