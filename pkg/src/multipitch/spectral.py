"""Harmonic variable-Q spectrograms, scale conversions, and energy targets.

The feature extractor stacks one variable-Q transform per harmonic ratio,
all sharing the same hop grid and log-frequency bin layout, so harmonic
energy lines up across the channel axis.
"""

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse

__all__ = [
    "SpectralConfig",
    "HcqtTensor",
    "SalienceGram",
    "bin_to_hz",
    "hz_to_bin",
    "amplitude_to_unit_db",
    "compute_hcqt",
    "harmonic_energy_linear",
    "harmonic_energy_target",
    "write_sfg",
    "read_sfg",
]

SFG_MAGIC = b"SFG1"


@dataclass(frozen=True)
class SpectralConfig:
    """Layout of the harmonic spectrogram stack."""

    sample_rate: int = 22050
    hop: int = 256
    f_min: float = 27.5
    bins_total: int = 440
    bins_per_semitone: int = 5
    harmonics: tuple = (0.5, 1, 2, 3, 4, 5)
    vq_offset: float = 5.0
    db_floor: float = -80.0

    def __post_init__(self):
        if self.f_min <= 0:
            raise ValueError("f_min must be positive")
        if self.hop <= 0:
            raise ValueError("hop must be positive")
        if self.bins_total <= 0 or self.bins_per_semitone <= 0:
            raise ValueError("bin counts must be positive")
        if self.db_floor >= 0:
            raise ValueError("db_floor must be negative")
        if list(self.harmonics) != sorted(self.harmonics):
            raise ValueError("harmonics must be sorted ascending")
        object.__setattr__(self, "harmonics", tuple(float(h) for h in self.harmonics))

    @property
    def bins_per_octave(self):
        return 12 * self.bins_per_semitone

    @property
    def nyquist(self):
        return self.sample_rate / 2.0


@dataclass
class HcqtTensor:
    """Stacked harmonic spectrograms: linear magnitudes and their unit-dB view.

    ``linear`` and ``unit_db`` are (n_harmonics, K, N) arrays; ``unit_db`` is
    always in [0, 1].  Grid transforms that act on ``unit_db`` directly set
    ``linear_stale`` on the copy they return.
    """

    linear: np.ndarray
    unit_db: np.ndarray
    frame_times: np.ndarray
    config: SpectralConfig = field(default_factory=SpectralConfig)
    linear_stale: bool = False

    @property
    def n_frames(self):
        return self.unit_db.shape[-1]

    def copy(self):
        return HcqtTensor(
            linear=self.linear.copy(),
            unit_db=self.unit_db.copy(),
            frame_times=self.frame_times.copy(),
            config=self.config,
            linear_stale=self.linear_stale,
        )


@dataclass
class SalienceGram:
    """A (K, N) grid of pitch-activity confidences in [0, 1]."""

    values: np.ndarray
    frame_times: np.ndarray

    @property
    def n_frames(self):
        return self.values.shape[-1]

    def copy(self):
        return SalienceGram(self.values.copy(), self.frame_times.copy())


def bin_to_hz(k, config=None):
    """Center frequency of bin ``k``: f_min * 2^(k / bins_per_octave)."""
    config = config or SpectralConfig()
    k = np.asarray(k, dtype=float)
    return config.f_min * 2.0 ** (k / config.bins_per_octave)


def hz_to_bin(f, config=None):
    """Real-valued bin index of frequency ``f``; exact inverse of bin_to_hz."""
    config = config or SpectralConfig()
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0):
        raise ValueError("frequency must be positive")
    return config.bins_per_octave * np.log2(f / config.f_min)


def amplitude_to_unit_db(linear, db_floor=-80.0):
    """Map non-negative magnitudes onto [0, 1] through max-referenced decibels.

    The reference is the maximum over the whole array (per excerpt, all
    channels jointly).  Values at the reference map to 1, values at or below
    ``db_floor`` dB relative to it map to 0, and an all-zero input maps to
    all zeros.
    """
    linear = np.asarray(linear)
    if np.any(linear < 0):
        raise ValueError("linear magnitudes must be non-negative")
    dtype = linear.dtype if linear.dtype.kind == "f" else np.float32
    ref = float(linear.max()) if linear.size else 0.0
    if ref <= 0.0:
        return np.zeros_like(linear, dtype=dtype)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(linear / ref)
    db = np.clip(db, db_floor, 0.0)
    return (db / (-db_floor) + 1.0).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# Variable-Q filterbank
# ---------------------------------------------------------------------------

def _kernel_lengths(config: SpectralConfig, harmonic: float):
    alpha = 2.0 ** (1.0 / config.bins_per_octave) - 1.0
    freqs = harmonic * bin_to_hz(np.arange(config.bins_total), config)
    bandwidths = alpha * freqs + config.vq_offset
    lengths = np.minimum(config.sample_rate / bandwidths, config.sample_rate * 16.0)
    return freqs, lengths


def _kernel_bank(config: SpectralConfig, harmonic: float, n_fft: int):
    """Sparse spectral-domain kernels for one harmonic channel.

    Rows are bins; columns are rfft bins of an ``n_fft`` rectangular frame.
    Bins whose center frequency reaches Nyquist are left as zero rows.
    """
    sr = config.sample_rate
    freqs, lengths = _kernel_lengths(config, harmonic)
    rows, cols, vals = [], [], []
    for k, (f_k, l_k) in enumerate(zip(freqs, lengths)):
        if f_k >= config.nyquist:
            continue
        length = min(max(int(round(l_k)), 4), n_fft)
        window = np.hanning(length + 2)[1:-1]  # strictly positive taper
        t = (np.arange(length) - (length - 1) / 2.0) / sr
        kernel = window * np.exp(2j * np.pi * f_k * t) / window.sum()
        buf = np.zeros(n_fft, dtype=np.complex128)
        start = n_fft // 2 - length // 2
        buf[start : start + length] = kernel
        spec = np.fft.fft(buf)[: n_fft // 2 + 1]
        keep = np.flatnonzero(np.abs(spec) >= 0.005 * np.abs(spec).max())
        rows.extend([k] * keep.size)
        cols.extend(keep.tolist())
        vals.extend(np.conj(spec[keep]).tolist())
    return scipy.sparse.csr_matrix(
        (vals, (rows, cols)),
        shape=(config.bins_total, n_fft // 2 + 1),
        dtype=np.complex128,
    )


@lru_cache(maxsize=8)
def _filterbank(config: SpectralConfig):
    """Per-channel kernel banks plus the shared frame FFT size."""
    longest = max(_kernel_lengths(config, h)[1].max() for h in config.harmonics)
    n_fft = int(2 ** np.ceil(np.log2(longest)))
    banks = [_kernel_bank(config, h, n_fft) for h in config.harmonics]
    return banks, n_fft


def compute_hcqt(audio, config=None):
    """Harmonic stack of variable-Q magnitude spectrograms.

    Channel ``h`` is a variable-Q transform whose lowest bin sits at
    ``h * f_min``; all channels share the hop grid, so the result is a
    (n_harmonics, K, N) tensor with N = ceil(len(audio) / hop).  Returns
    both the linear view and the unit-normalized decibel view.
    """
    config = config or SpectralConfig()
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    if audio.size == 0:
        raise ValueError("empty input")

    bad = [h for h in config.harmonics if h * config.f_min >= config.nyquist]
    if bad:
        raise ValueError(
            "bins exceed Nyquist for harmonic channel(s) "
            + ", ".join(str(h) for h in bad)
        )

    banks, n_fft = _filterbank(config)
    hop = config.hop
    n_frames = int(np.ceil(audio.size / hop))

    pad = n_fft // 2
    padded = np.pad(audio, (pad, pad + n_fft))
    linear = np.empty((len(config.harmonics), config.bins_total, n_frames), dtype=np.float32)

    chunk = max(1, (1 << 24) // n_fft)  # bound frame-buffer memory
    for start in range(0, n_frames, chunk):
        stop = min(start + chunk, n_frames)
        idx = np.arange(start, stop) * hop
        frames = padded[idx[:, None] + np.arange(n_fft)]
        spectra = np.fft.rfft(frames, axis=-1).T  # (n_fft//2+1, n_chunk)
        for c, bank in enumerate(banks):
            linear[c, :, start:stop] = np.abs(bank @ spectra).astype(np.float32)

    unit_db = amplitude_to_unit_db(linear, config.db_floor)
    frame_times = np.arange(n_frames) * (hop / config.sample_rate)
    return HcqtTensor(linear=linear, unit_db=unit_db, frame_times=frame_times, config=config)


def harmonic_energy_linear(hcqt: HcqtTensor):
    """Inverse-fourth-power weighted sum of the integer-harmonic channels."""
    if hcqt.linear_stale:
        raise ValueError("linear view is stale on a transformed tensor")
    harmonics = hcqt.config.harmonics
    out = np.zeros(hcqt.linear.shape[1:], dtype=np.float64)
    for h in (1, 2, 3, 4, 5):
        if float(h) not in harmonics:
            raise ValueError(f"missing harmonic channel {h}")
        out += hcqt.linear[harmonics.index(float(h))].astype(np.float64) / h**4
    return out


def harmonic_energy_target(hcqt: HcqtTensor):
    """Coarse salience pseudo-target from harmonic-weighted spectrogram energy."""
    energy = harmonic_energy_linear(hcqt)
    values = amplitude_to_unit_db(energy, hcqt.config.db_floor).astype(np.float32)
    return SalienceGram(values=values, frame_times=hcqt.frame_times.copy())


# ---------------------------------------------------------------------------
# Spectrogram dump container
# ---------------------------------------------------------------------------

def write_sfg(path, array):
    """Write a (C, K, N) float grid to the binary SFG1 container."""
    array = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    if array.ndim == 2:
        array = array[np.newaxis]
    if array.ndim != 3:
        raise ValueError("expected a (C, K, N) array")
    with open(path, "wb") as fh:
        fh.write(SFG_MAGIC)
        fh.write(struct.pack("<III", *array.shape))
        fh.write(array.astype("<f4").tobytes())


def read_sfg(path):
    """Read an SFG1 container back into a (C, K, N) float32 array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SFG_MAGIC:
            raise ValueError(f"bad magic {magic!r} at byte 0")
        dims = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    expected = dims[0] * dims[1] * dims[2]
    if data.size != expected:
        raise ValueError(f"payload holds {data.size} floats, header promises {expected}")
    return data.reshape(dims).copy()
