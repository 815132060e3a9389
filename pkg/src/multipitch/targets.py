"""Pitch annotations, binary activation grids, and blurred training targets."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .spectral import SalienceGram, SpectralConfig, hz_to_bin

__all__ = [
    "PitchAnnotation",
    "annotations_to_activations",
    "blur_target",
    "read_annotation",
    "write_annotation",
]


@dataclass
class PitchAnnotation:
    """Time-stamped lists of fundamental frequencies in Hz.

    ``times`` is strictly increasing; ``freqs[i]`` holds the F0s active at
    ``times[i]`` (empty array = silence).
    """

    times: np.ndarray
    freqs: list
    source_id: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.freqs = [np.asarray(f, dtype=float).reshape(-1) for f in self.freqs]
        if len(self.freqs) != self.times.size:
            raise ValueError("times and freqs must have equal length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("annotation times must be strictly increasing")
        for f in self.freqs:
            if np.any(f <= 0):
                raise ValueError("all F0s must be positive")

    @property
    def n_entries(self):
        return self.times.size

    def period(self):
        """Median spacing between entries (0 for fewer than two entries,
        so a lone entry only labels frames at exactly its timestamp)."""
        if self.times.size < 2:
            return 0.0
        return float(np.median(np.diff(self.times)))


def annotations_to_activations(ann: PitchAnnotation, frame_times, config=None):
    """Rasterize an annotation onto the spectrogram's bin/frame grid.

    Each frame takes the annotation entry nearest in time, provided it lies
    within half the annotation period; every F0 activates the nearest bin
    (round half up).  F0s falling more than half a semitone outside the bin
    range are dropped and reported rather than clamped.
    """
    config = config or SpectralConfig()
    frame_times = np.asarray(frame_times, dtype=float).reshape(-1)
    n_bins = config.bins_total
    grid = np.zeros((n_bins, frame_times.size), dtype=np.float32)
    if ann.n_entries == 0:
        return SalienceGram(values=grid, frame_times=frame_times.copy())

    half_period = ann.period() / 2.0
    idx = np.searchsorted(ann.times, frame_times)
    idx = np.clip(idx, 0, ann.n_entries - 1)
    prev = np.clip(idx - 1, 0, ann.n_entries - 1)
    use_prev = np.abs(ann.times[prev] - frame_times) <= np.abs(ann.times[idx] - frame_times)
    nearest = np.where(use_prev, prev, idx)

    half_semitone = config.bins_per_semitone / 2.0
    n_dropped = 0
    for n, (t, e) in enumerate(zip(frame_times, nearest)):
        if abs(ann.times[e] - t) > half_period:
            continue
        f0s = ann.freqs[e]
        if f0s.size == 0:
            continue
        bins = np.floor(hz_to_bin(f0s, config) + 0.5)  # round half up
        in_range = (bins >= -half_semitone) & (bins <= n_bins - 1 + half_semitone)
        n_dropped += int(np.count_nonzero(~in_range))
        kept = np.clip(bins[in_range], 0, n_bins - 1).astype(int)
        grid[kept, n] = 1.0
    if n_dropped:
        warnings.warn(f"{n_dropped} F0 value(s) out of bin range; dropped, not clamped")
    return SalienceGram(values=grid, frame_times=frame_times.copy())


def blur_target(target, sigma_bins=1.0):
    """Blur each frame along the bin axis with a peak-1 Gaussian kernel.

    Contributions of nearby active bins combine by elementwise maximum, so
    isolated active bins stay at full confidence and the result remains in
    [0, 1].  The kernel is truncated at +/-4 sigma.
    """
    if sigma_bins <= 0:
        raise ValueError("sigma_bins must be positive")
    wrap = isinstance(target, SalienceGram)
    values = target.values if wrap else np.asarray(target)
    if not np.isin(values, (0.0, 1.0)).all():
        raise ValueError("blur_target expects a binary grid")

    radius = int(np.ceil(4.0 * sigma_bins))
    out = np.zeros_like(values, dtype=np.float32)
    for d in range(-radius, radius + 1):
        w = np.float32(np.exp(-(d * d) / (2.0 * sigma_bins**2)))
        shifted = np.zeros_like(out)
        if d == 0:
            shifted = values.astype(np.float32)
        elif d > 0:
            shifted[d:, :] = values[:-d, :]
        else:
            shifted[:d, :] = values[-d:, :]
        np.maximum(out, shifted * w, out=out)
    if wrap:
        return SalienceGram(values=out, frame_times=target.frame_times.copy())
    return out


# ---------------------------------------------------------------------------
# Annotation file format: time_sec<TAB>f0_hz<TAB>f0_hz... (time-only = silence)
# ---------------------------------------------------------------------------

def write_annotation(path, ann: PitchAnnotation):
    with open(path, "w") as fh:
        for t, f0s in zip(ann.times, ann.freqs):
            cells = [repr(float(t))] + [repr(float(f)) for f in f0s]
            fh.write("\t".join(cells) + "\n")


def read_annotation(path, source_id=None):
    times, freqs = [], []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cells = line.split("\t")
            times.append(float(cells[0]))
            freqs.append(np.array([float(c) for c in cells[1:] if c.strip()], dtype=float))
    return PitchAnnotation(
        times=np.array(times), freqs=freqs, source_id=source_id or str(path)
    )
