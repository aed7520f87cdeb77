import numpy as np
import pytest

from chirpnet.spectrogram import save_bspc


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_banded_corpus(root, classes=("a", "b"), per_class=6, rows=128, cols=256,
                        noise_files=3, seed=99):
    """Tiny spectrogram corpus where each class is a bright horizontal band.

    Trivially separable; used for fast training-loop tests.
    """
    gen = np.random.default_rng(seed)
    for cid, name in enumerate(classes):
        d = root / name
        d.mkdir(parents=True)
        band = 20 + cid * (rows // max(len(classes), 2))
        for i in range(per_class):
            spec = gen.random((rows, cols), dtype=np.float64) * 0.1
            spec[band : band + 6, :] += 0.85
            save_bspc(d / f"s{i:02d}.bspc", np.clip(spec, 0, 1).astype(np.float32))
    noise_dir = root / "noise"
    noise_dir.mkdir()
    for i in range(noise_files):
        spec = gen.random((rows, cols), dtype=np.float64) * 0.2
        save_bspc(noise_dir / f"n{i:02d}.bspc", spec.astype(np.float32))
    return root


@pytest.fixture
def banded_corpus(tmp_path):
    return write_banded_corpus(tmp_path / "corpus")
