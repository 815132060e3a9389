import numpy as np
import pytest

from multipitch.spectral import SpectralConfig


@pytest.fixture(scope="session")
def default_config():
    return SpectralConfig()


@pytest.fixture(scope="session")
def toy_config():
    """Smaller grid used by training-loop tests to keep runtimes sane."""
    return SpectralConfig(hop=512, f_min=55.0, bins_total=304)


def sine(freq, seconds=1.0, sample_rate=22050, amplitude=0.8):
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    return amplitude * np.sin(2 * np.pi * freq * t)


def harmonic_tone(f0, seconds=1.0, sample_rate=22050, n_partials=6):
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    out = np.zeros_like(t)
    for p in range(1, n_partials + 1):
        if p * f0 < sample_rate / 2:
            out += np.sin(2 * np.pi * p * f0 * t) / p
    return 0.8 * out / np.abs(out).max()
