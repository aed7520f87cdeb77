"""Release gate: ten checks, one per shipped guarantee, at pinned tolerances.

Each check is a single test so `pytest -v` reports one pass/fail line per
guarantee. The two heavyweight checks (held-out recognition quality and the
augmentation ablation) share one synthesized training corpus via a module
fixture and dominate the suite's runtime; everything else finishes in
seconds.
"""

import time

import numpy as np
import pytest

from conftest import write_banded_corpus
from chirpnet.audio import chunk, decode_wav, write_wav_pcm16
from chirpnet.cli import main
from chirpnet.config import PipelineConfig
from chirpnet.dataset import load_ground_truth, scan_corpus, split
from chirpnet.inference import ensemble, lrap, mlrap, pool_mean_exp, predict_recording
from chirpnet.model import (
    ModelConfig,
    build_baseline,
    count_params,
    load_checkpoint,
    save_checkpoint,
)
from chirpnet.nn import (
    BatchNorm2d,
    Conv2d,
    Dense,
    GlobalAvgPool,
    Identity,
    LrSchedule,
    MaxPool2x2,
    ReLU,
    cosine_lr,
    softmax_cross_entropy,
    zero_grads,
)
from chirpnet.signal_filter import classify_chunk, signal_score
from chirpnet.spectrogram import (
    SpectrogramParams,
    extract as extract_spectrogram,
    filterbank_for,
    save_bspc,
)
from chirpnet.synth import generate_corpus, pink_noise
from chirpnet.training import TrainConfig, train

H = 1e-3


# ---------------------------------------------------------------- helpers


def num_grad(f, x, h=H):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(np.asarray(a) - np.asarray(b)).max() / scale)


def layer_dx_err(layer, x, rng):
    r = rng.normal(size=layer.forward(x.copy(), train=True).shape)

    def f(xv):
        return float((layer.forward(xv, train=True) * r).sum())

    layer.forward(x.copy(), train=True)
    return rel_err(layer.backward(r), num_grad(f, x.copy()))


def param_grad_err(layer, x, param, rng):
    r = rng.normal(size=layer.forward(x.copy(), train=True).shape)

    def f(wv):
        param.value = wv.copy()
        return float((layer.forward(x.copy(), train=True) * r).sum())

    base = param.value.copy()
    zero_grads(layer.params())
    layer.forward(x.copy(), train=True)
    layer.backward(r)
    got = param.grad
    want = num_grad(f, base.copy())
    param.value = base
    return rel_err(got, want)


def brute_force_lrap(scores, labels):
    """Exhaustive rank counting, no vectorization tricks."""
    total = 0.0
    for y in labels:
        better_or_equal = sum(1 for s in scores if s >= scores[y])
        hits = sum(1 for k in labels if scores[k] >= scores[y])
        total += hits / better_or_equal
    return total / len(labels)


def held_out_quality(checkpoints, held_dir):
    """(MLRAP, top-1) of an ensemble over a synthesized wav corpus."""
    models = [load_checkpoint(p)[0] for p in checkpoints]
    cfg = PipelineConfig()
    bank = filterbank_for(cfg.spectrogram)
    truth = load_ground_truth(held_dir / "ground_truth.csv")
    ids = {n: i for i, n in enumerate(models[0].class_names)}
    wav_by_stem = {p.stem: p for p in sorted(held_dir.rglob("*.wav"))}
    scores, labels, hits = [], [], []
    for rec in sorted(truth.foreground):
        pooled = ensemble([
            predict_recording(
                m, wav_by_stem[rec], cfg.spectrogram,
                pool=cfg.pool_mode, bank=bank,
            ).pooled_scores
            for m in models
        ])
        scores.append(pooled)
        labels.append([ids[n] for n in truth.label_set(rec)])
        hits.append(int(np.argmax(pooled)) == ids[truth.foreground[rec]])
    return mlrap(scores, labels), float(np.mean(hits))


@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    """10 classes x 50 recordings at 10 dB snr, extracted, plus a held-out set."""
    t0 = time.monotonic()
    root = tmp_path_factory.mktemp("desk")
    wavs, specs, held = root / "wavs", root / "specs", root / "held"
    assert main([
        "synth", "--out", str(wavs), "--classes", "10",
        "--files-per-class", "50", "--duration", "2.0",
        "--snr", "10", "--seed", "42",
    ]) == 0
    assert main(["extract", "--in", str(wavs), "--out", str(specs)]) == 0
    assert main([
        "synth", "--out", str(held), "--classes", "10",
        "--files-per-class", "6", "--duration", "2.0",
        "--snr", "10", "--seed", "777",
    ]) == 0
    return {"specs": specs, "held": held,
            "prep_seconds": time.monotonic() - t0}


# ------------------------------------------------------------------ gate


def test_01_parameter_count():
    """Default model stores 11,454,236 elements, 11,446,172 of them trainable."""
    model = build_baseline(ModelConfig())
    assert count_params(model) == 11_454_236
    assert count_params(model, trainable_only=True) == 11_446_172


def test_02_shape_chain():
    """One 1x1x128x256 forward hits every published intermediate shape."""
    model = build_baseline(ModelConfig(), seed=0)
    shapes = model.intermediate_shapes(np.zeros((1, 1, 128, 256), np.float32))
    expected = [
        (64, 64, 128), (128, 32, 64), (256, 16, 32), (512, 8, 16),
        (1024, 4, 8), (2048, 4, 8), (2048,), (1500,),
    ]
    it = iter(shapes)
    for want in expected:
        assert want in it, f"shape {want} missing (chain: {shapes})"


def test_03_gradient_suite():
    """Finite differences (float64, h=1e-3) agree within 1e-4 for every layer."""
    rng = np.random.default_rng(7)
    errs = []

    layer = Conv2d(4, 6, dtype=np.float64, rng=rng)
    x = rng.normal(size=(2, 4, 6, 8))
    errs += [layer_dx_err(layer, x, rng),
             param_grad_err(layer, x, layer.weight, rng)]

    layer = Conv2d(4, 6, groups=2, dtype=np.float64, rng=rng)
    errs += [layer_dx_err(layer, x, rng),
             param_grad_err(layer, x, layer.weight, rng)]

    layer = Conv2d(3, 4, stride=2, dtype=np.float64, rng=rng)
    xs = rng.normal(size=(2, 3, 5, 7))
    errs += [layer_dx_err(layer, xs, rng),
             param_grad_err(layer, xs, layer.weight, rng)]

    layer = Conv2d(4, 8, kernel=1, dtype=np.float64, rng=rng)
    errs += [layer_dx_err(layer, x, rng),
             param_grad_err(layer, x, layer.weight, rng)]

    layer = BatchNorm2d(4, dtype=np.float64)
    errs += [layer_dx_err(layer, x, rng),
             param_grad_err(layer, x, layer.gamma, rng),
             param_grad_err(layer, x, layer.beta, rng)]

    x_off = x + 0.05 * np.sign(x)  # keep samples away from the ReLU kink
    errs.append(layer_dx_err(ReLU(), x_off, rng))
    errs.append(layer_dx_err(Identity(), x, rng))

    xp = (rng.permutation(np.arange(2 * 4 * 6 * 8)).reshape(2, 4, 6, 8) * 0.1)
    errs.append(layer_dx_err(MaxPool2x2(), xp.astype(np.float64), rng))
    errs.append(layer_dx_err(GlobalAvgPool(), x, rng))

    layer = Dense(7, 5, dtype=np.float64, rng=rng)
    xd = rng.normal(size=(3, 7))
    errs += [layer_dx_err(layer, xd, rng),
             param_grad_err(layer, xd, layer.weight, rng),
             param_grad_err(layer, xd, layer.bias, rng)]

    logits = rng.normal(size=(4, 6))
    labels = np.array([0, 2, 5, 3])
    _, _, got = softmax_cross_entropy(logits, labels)

    def f(lv):
        loss, _, _ = softmax_cross_entropy(lv, labels)
        return float(loss)

    errs.append(rel_err(got, num_grad(f, logits)))

    assert max(errs) < 1e-4, f"worst relative error {max(errs):.2e}"


def test_04_pooling_and_metric_oracles():
    """Hand values for mean-exp pooling; MLRAP vs brute-force rank counting."""
    assert abs(pool_mean_exp(np.zeros((3, 2)))[0]) < 1e-9
    assert abs(pool_mean_exp(np.array([[0.5]]))[0] - 1.0) < 1e-9
    assert abs(pool_mean_exp(np.array([[0.5], [1.0]]))[0] - 2.5) < 1e-9

    rng = np.random.default_rng(11)
    for _ in range(25):
        n = int(rng.integers(2, 8))
        scores = rng.integers(0, 4, size=n) / 4.0  # tie-laden
        n_labels = int(rng.integers(1, n + 1))
        labels = list(rng.choice(n, size=n_labels, replace=False))
        got = lrap(scores, labels)
        want = brute_force_lrap(list(scores), labels)
        assert abs(got - want) < 1e-9


def test_05_cosine_schedule():
    """0.001 at epoch 0, exactly half at mid-cycle, full restart at the boundary."""
    sched = LrSchedule(base_lr=0.001, cycle_epochs=10)
    assert cosine_lr(0, sched) == 0.001
    assert abs(cosine_lr(5, sched) - 0.0005) < 1e-12
    assert cosine_lr(10, sched) == 0.001


@pytest.mark.slow
def test_06_desk_scale_recognition(desk_corpus, tmp_path):
    """A quarter-width model trained 20 epochs recognizes a held-out corpus."""
    t0 = time.monotonic()
    run = tmp_path / "run"
    assert main([
        "train", "--corpus", str(desk_corpus["specs"]), "--out", str(run),
        "--set", "model.filter_multiplier=0.25",
        "--set", "train.max_epochs=20",
        "--set", "train.early_stop_patience=20",
        "--set", "train.seed=42",
    ]) == 0
    score, top1 = held_out_quality([run / "best.bclf"], desk_corpus["held"])
    wall = desk_corpus["prep_seconds"] + time.monotonic() - t0
    print(f"held-out mlrap {score:.4f}  top-1 {top1:.4f}  wall {wall:.0f}s")
    assert score >= 0.90
    assert top1 >= 0.85
    assert wall <= 1800.0


@pytest.mark.slow
def test_07_augmentation_non_inferiority(desk_corpus, tmp_path):
    """Augmented training never trails plain training by more than 0.02 MLRAP."""
    for seed in (1, 2, 3):
        by_arm = {}
        for arm, flag in (("aug", "true"), ("noaug", "false")):
            run = tmp_path / f"{arm}_{seed}"
            assert main([
                "train", "--corpus", str(desk_corpus["specs"]),
                "--out", str(run),
                "--set", "model.filter_multiplier=0.125",
                "--set", "train.max_epochs=10",
                "--set", "train.early_stop_patience=10",
                "--set", f"train.seed={seed}",
                "--set", f"train.augment={flag}",
            ]) == 0
            by_arm[arm], _ = held_out_quality(
                [run / "best.bclf"], desk_corpus["held"]
            )
        print(f"seed {seed}: aug {by_arm['aug']:.4f}  "
              f"noaug {by_arm['noaug']:.4f}")
        assert by_arm["aug"] >= by_arm["noaug"] - 0.02


def test_08_snr_filter_separation(tmp_path):
    """>=90% of noise chunks rejected, >=90% of chirp chunks kept; archetypes rank."""
    cfg = PipelineConfig()
    bank = filterbank_for(cfg.spectrogram)

    def call_chunk_verdicts(root):
        verdicts = []
        for wav in sorted(root.rglob("*.wav")):
            if wav.parent.name == "noise":
                continue
            buf = decode_wav(wav)
            for piece in chunk(buf, cfg.spectrogram.chunk_seconds,
                               cfg.spectrogram.chunk_seconds):
                spec = extract_spectrogram(piece, cfg.spectrogram, bank)
                verdicts.append(classify_chunk(spec).accepted)
        return verdicts

    generate_corpus(n_classes=2, files_per_class=25, duration_s=2.0,
                    snr_db=float("-inf"), seed=8,
                    out_dir=tmp_path / "noise_wavs")
    generate_corpus(n_classes=2, files_per_class=25, duration_s=2.0,
                    snr_db=10.0, seed=9, out_dir=tmp_path / "chirp_wavs")
    noise = call_chunk_verdicts(tmp_path / "noise_wavs")
    chirps = call_chunk_verdicts(tmp_path / "chirp_wavs")
    assert len(noise) == 100 and len(chirps) == 100
    print(f"noise rejected {noise.count(False)}/100, "
          f"chirps accepted {chirps.count(True)}/100")
    assert noise.count(False) >= 90
    assert chirps.count(True) >= 90

    # archetype ordering: clear call > call over steady noise > steady noise
    rng = np.random.default_rng(23)
    profile = np.linspace(0.7, 0.3, 128)[:, None]
    steady = np.clip(profile + rng.uniform(0.0, 0.01, (128, 256)), 0.0, 1.0)

    def with_ridge(base, col0, n_cols, row0=20):
        g = base.copy()
        for j in range(n_cols):
            r = row0 + j // 2
            g[max(r - 2, 0): r + 3, col0 + j] = 1.0
        return g

    clear = with_ridge(rng.uniform(0.0, 0.05, (128, 256)), 20, 115)
    composite = with_ridge(steady, 90, 64)
    assert signal_score(clear) > signal_score(composite) > signal_score(steady)


def test_09_determinism_and_persistence(tmp_path):
    """Same seed, same bytes: loss traces, checkpoints, spectrogram files."""
    # bit-identical loss traces across two runs of the same config
    corpus = write_banded_corpus(tmp_path / "banded", rows=64, cols=64)
    index = scan_corpus(corpus)
    cfg = TrainConfig(max_epochs=3, batch_size=4, seed=5, val_fraction=0.25,
                      snapshot_every=100, augment=False)
    traces = []
    for attempt in ("a", "b"):
        train_idx, val_idx = split(index, cfg.val_fraction, cfg.seed)
        model = build_baseline(
            ModelConfig(n_classes=2, filter_multiplier=0.0625,
                        input_rows=64, input_cols=64),
            class_names=index.classes, seed=cfg.seed,
        )
        report = train(model, train_idx, val_idx, cfg, tmp_path / attempt)
        traces.append([r.train_loss for r in report.records])
    assert traces[0] == traces[1]

    # checkpoint roundtrip reproduces forwards bit for bit
    model = build_baseline(
        ModelConfig(n_classes=3, filter_multiplier=0.0625), seed=2
    )
    rng = np.random.default_rng(0)
    batch = rng.random((2, 1, 128, 256)).astype(np.float32)
    model.forward(batch, train=True)  # move running stats off their init
    path = tmp_path / "round.bclf"
    save_checkpoint(model, path, epoch=4)
    clone, epoch = load_checkpoint(path)
    assert epoch == 4
    assert np.array_equal(model.forward(batch), clone.forward(batch))

    # spectrogram files are byte-identical across independent extractions
    params = SpectrogramParams()
    samples = 0.3 * pink_noise(int(params.sample_rate * 2.0),
                               np.random.default_rng(3))
    wav = tmp_path / "clip.wav"
    write_wav_pcm16(wav, samples.astype(np.float32), params.sample_rate)
    blobs = []
    for attempt in ("x", "y"):
        buf = decode_wav(wav)
        piece = chunk(buf, params.chunk_seconds, params.chunk_seconds)[0]
        out = tmp_path / f"{attempt}.bspc"
        save_bspc(out, extract_spectrogram(piece, params))
        blobs.append(out.read_bytes())
    assert blobs[0] == blobs[1]


def test_10_snapshot_ensemble(tmp_path, capsys):
    """30 epochs emit snapshots {10,20,30}; evaluate averages their pooled scores."""
    wavs, specs, run = tmp_path / "wavs", tmp_path / "specs", tmp_path / "run"
    assert main([
        "synth", "--out", str(wavs), "--classes", "2",
        "--files-per-class", "3", "--duration", "2.0",
        "--snr", "12", "--seed", "5",
    ]) == 0
    assert main(["extract", "--in", str(wavs), "--out", str(specs)]) == 0
    assert main([
        "train", "--corpus", str(specs), "--out", str(run),
        "--set", "model.filter_multiplier=0.0625",
        "--set", "train.max_epochs=30",
        "--set", "train.early_stop_patience=30",
        "--set", "train.snapshot_every=10",
        "--set", "train.batch_size=4",
        "--set", "train.augment=false",
    ]) == 0
    snaps = sorted(run.glob("snapshot_*.bclf"))
    assert [p.name for p in snaps] == [
        "snapshot_010.bclf", "snapshot_020.bclf", "snapshot_030.bclf",
    ]

    # the ensemble score of the three snapshots is the plain arithmetic mean
    # of their per-model pooled vectors, and evaluate reports its MLRAP
    models = [load_checkpoint(p)[0] for p in snaps]
    cfg = PipelineConfig()
    bank = filterbank_for(cfg.spectrogram)
    truth = load_ground_truth(wavs / "ground_truth.csv")
    ids = {n: i for i, n in enumerate(models[0].class_names)}
    wav_by_stem = {p.stem: p for p in sorted(wavs.rglob("*.wav"))}
    scores, labels = [], []
    for rec in sorted(truth.foreground):
        pooled = [
            predict_recording(m, wav_by_stem[rec], cfg.spectrogram,
                              pool=cfg.pool_mode, bank=bank).pooled_scores
            for m in models
        ]
        manual = np.mean(np.stack(pooled), axis=0)
        assert np.abs(ensemble(pooled) - manual).max() < 1e-9
        scores.append(manual)
        labels.append([ids[n] for n in truth.label_set(rec)])
    expected = mlrap(scores, labels)

    capsys.readouterr()
    assert main([
        "evaluate", "--corpus", str(wavs),
        "--checkpoints", *[str(p) for p in snaps],
    ]) == 0
    assert capsys.readouterr().out.strip() == f"MLRAP={expected:.4f}"
