"""Pitch-invariant and pitch-equivariant input transformations.

Each transform is described by a small replayable spec: sampling and
application are separate so the identical transform can be applied to a
model input and to the matching prediction grid.  Grid operations accept
numpy arrays or torch tensors of shape (K, N) or (C, K, N).
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "EqCurveSpec",
    "PercussionMixSpec",
    "GeometricSpec",
    "sample_eq_curve",
    "apply_eq",
    "sample_percussion_mix",
    "mix_percussion",
    "sample_geometric",
    "apply_geometric",
    "spec_to_record",
    "record_to_spec",
]

PITCH_SHIFT_MAX_BINS = 60  # one octave at 5 bins per semitone


@dataclass(frozen=True)
class EqCurveSpec:
    """Parabolic spectral gain curve: g[k] = max(0, 1 - 2*alpha*(k - beta)^2).

    ``alpha`` and ``beta`` are scalars, or per-frame vectors when a fresh
    curve is drawn for every frame.
    """

    alpha: object
    beta: object

    def validate(self, n_bins):
        alpha = np.asarray(self.alpha, dtype=float)
        beta = np.asarray(self.beta, dtype=float)
        lim = 1.0 / (n_bins - 1) ** 2
        if np.any(alpha < 0) or np.any(alpha > lim * (1 + 1e-12)):
            raise ValueError(f"alpha outside [0, {lim:g}]")
        if np.any(beta < 0) or np.any(beta > n_bins - 1):
            raise ValueError(f"beta outside [0, {n_bins - 1}]")


@dataclass(frozen=True)
class PercussionMixSpec:
    """Superimpose a percussion clip at waveform level with volume ``volume``."""

    volume: float
    percussion_source: str = ""

    def __post_init__(self):
        if not 0.0 <= self.volume <= 1.0:
            raise ValueError("volume must lie in [0, 1]")


@dataclass(frozen=True)
class GeometricSpec:
    """Grid-domain pitch shift, time shift, and time stretch."""

    dk: int
    dn: int
    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def validate(self, n_frames, b_oct=PITCH_SHIFT_MAX_BINS):
        if abs(self.dk) > b_oct:
            raise ValueError(f"dk outside [-{b_oct}, {b_oct}]")
        if abs(self.dn) > n_frames // 4:
            raise ValueError(f"dn outside [-{n_frames // 4}, {n_frames // 4}]")
        if not 0.5 <= self.gamma <= 2.0:
            raise ValueError("gamma outside [0.5, 2]")


def sample_eq_curve(rng, n_bins=440, per_frame=False, n_frames=None):
    """Draw a random parabolic EQ curve.

    alpha ~ U[0, 1/(K-1)^2] and beta ~ U[0, K-1].  With ``per_frame`` a
    fresh (alpha, beta) pair is drawn for every frame (requires
    ``n_frames``); otherwise one curve covers the whole excerpt.
    """
    lim = 1.0 / (n_bins - 1) ** 2
    if per_frame:
        if not n_frames:
            raise ValueError("per_frame sampling requires n_frames")
        alpha = rng.uniform(0.0, lim, size=n_frames)
        beta = rng.uniform(0.0, n_bins - 1, size=n_frames)
        return EqCurveSpec(alpha=alpha, beta=beta)
    return EqCurveSpec(alpha=float(rng.uniform(0.0, lim)), beta=float(rng.uniform(0.0, n_bins - 1)))


def eq_gain(spec: EqCurveSpec, n_bins):
    """Gain grid for an EQ spec: (K,) for scalar specs, (K, N) per-frame."""
    spec.validate(n_bins)
    alpha = np.asarray(spec.alpha, dtype=np.float32)
    beta = np.asarray(spec.beta, dtype=np.float32)
    k = np.arange(n_bins, dtype=np.float32)
    if alpha.ndim == 0:
        gain = 1.0 - 2.0 * alpha * (k - beta) ** 2
    else:
        gain = 1.0 - 2.0 * alpha[None, :] * (k[:, None] - beta[None, :]) ** 2
    return np.maximum(gain, 0.0)


def apply_eq(hcqt, spec: EqCurveSpec):
    """Multiply the EQ gain into every frame and channel of the unit-dB view.

    Returns a transformed copy; the linear view on the copy is marked stale
    since it no longer corresponds to the reshaped unit-dB values.
    """
    gain = eq_gain(spec, hcqt.unit_db.shape[-2])
    if gain.ndim == 1:
        gain = gain[:, None]
    out = hcqt.copy()
    out.unit_db = np.clip(hcqt.unit_db * gain[None, :, :], 0.0, 1.0).astype(hcqt.unit_db.dtype)
    out.linear_stale = True
    return out


def sample_percussion_mix(rng, source_ids):
    """Draw a mix volume in [0, 1] and a percussion source from the pool."""
    if not source_ids:
        raise ValueError("empty percussion pool")
    source = source_ids[int(rng.integers(len(source_ids)))]
    return PercussionMixSpec(volume=float(rng.uniform(0.0, 1.0)), percussion_source=str(source))


def mix_percussion(audio, percussion, volume, sample_rate=None, percussion_rate=None):
    """Superimpose percussion onto audio at the waveform level.

    The percussion clip is looped or truncated to the audio length; the mix
    is peak-renormalized only when it exceeds full scale.
    """
    if sample_rate is not None and percussion_rate is not None and sample_rate != percussion_rate:
        raise ValueError(f"sample-rate mismatch: {sample_rate} vs {percussion_rate}")
    audio = np.asarray(audio, dtype=np.float32).reshape(-1)
    percussion = np.asarray(percussion, dtype=np.float32).reshape(-1)
    if percussion.size == 0:
        raise ValueError("empty percussion clip")
    if percussion.size < audio.size:
        reps = int(np.ceil(audio.size / percussion.size))
        percussion = np.tile(percussion, reps)
    mix = audio + np.float32(volume) * percussion[: audio.size]
    peak = float(np.abs(mix).max()) if mix.size else 0.0
    if peak > 1.0:
        mix = mix / np.float32(peak)
    return mix


def sample_geometric(rng, n_frames, b_oct=PITCH_SHIFT_MAX_BINS):
    """Draw a random geometric transform.

    dk is uniform over integer bins in [-b_oct, b_oct], dn over
    [-N//4, N//4] frames, and gamma comes from a fair coin choosing the
    interval [0.5, 1] or [1, 2], then uniform within it.
    """
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    dk = int(rng.integers(-b_oct, b_oct + 1))
    dn = int(rng.integers(-(n_frames // 4), n_frames // 4 + 1))
    if rng.random() < 0.5:
        gamma = float(rng.uniform(0.5, 1.0))
    else:
        gamma = float(rng.uniform(1.0, 2.0))
    return GeometricSpec(dk=dk, dn=dn, gamma=gamma)


@lru_cache(maxsize=64)
def _stretch_matrix(gamma, n_frames):
    """Frame-resampling matrix S with out = grid @ S.T.

    Each input frame m lands at output position m / gamma and distributes
    its mass over a tent kernel of half-width max(1, 1/gamma) frames
    (peak 1), so speed-up relocates impulses and slow-down fills the gaps
    between relocated frames.  Anchored at frame 0; positions outside the
    grid are dropped (zero fill on the output side).
    """
    half_width = max(1.0, 1.0 / gamma)
    mat = np.zeros((n_frames, n_frames), dtype=np.float64)
    for m in range(n_frames):
        pos = m / gamma
        lo = max(int(math.ceil(pos - half_width)), 0)
        hi = min(int(math.floor(pos + half_width)), n_frames - 1)
        for j in range(lo, hi + 1):
            w = 1.0 - abs(j - pos) / half_width
            if w > 0.0:
                mat[j, m] += w
    return mat


def _shift_axis_np(grid, delta, axis):
    if delta == 0:
        return grid.copy()
    out = np.zeros_like(grid)
    src = [slice(None)] * grid.ndim
    dst = [slice(None)] * grid.ndim
    if delta > 0:
        dst[axis] = slice(delta, None)
        src[axis] = slice(None, -delta)
    else:
        dst[axis] = slice(None, delta)
        src[axis] = slice(-delta, None)
    out[tuple(dst)] = grid[tuple(src)]
    return out


def _shift_axis_torch(grid, delta, axis):
    import torch

    if delta == 0:
        return grid.clone()
    out = torch.zeros_like(grid)
    src = [slice(None)] * grid.dim()
    dst = [slice(None)] * grid.dim()
    if delta > 0:
        dst[axis] = slice(delta, None)
        src[axis] = slice(None, -delta)
    else:
        dst[axis] = slice(None, delta)
        src[axis] = slice(-delta, None)
    out[tuple(dst)] = grid[tuple(src)]
    return out


def apply_geometric(grid, spec: GeometricSpec):
    """Apply stretch-then-shift geometry to a (K, N) or (C, K, N) grid.

    Order: time-stretch by gamma, pitch shift by dk bins (zero fill), time
    shift by dn frames (zero fill).  The same spec applied to a channel
    stack shifts every channel identically.  Works on numpy arrays and on
    torch tensors (differentiably, for prediction grids).
    """
    is_numpy = isinstance(grid, np.ndarray)
    n_frames = grid.shape[-1]
    spec.validate(n_frames)
    stretch = _stretch_matrix(spec.gamma, n_frames)
    if is_numpy:
        s = stretch.astype(grid.dtype, copy=False)
        out = np.clip(grid @ s.T, 0.0, 1.0)
        out = _shift_axis_np(out, spec.dk, out.ndim - 2)
        out = _shift_axis_np(out, spec.dn, out.ndim - 1)
        return out.astype(grid.dtype, copy=False)
    import torch

    s = torch.from_numpy(stretch).to(grid.dtype)
    out = torch.clamp(grid @ s.T, 0.0, 1.0)
    out = _shift_axis_torch(out, spec.dk, out.dim() - 2)
    out = _shift_axis_torch(out, spec.dn, out.dim() - 1)
    return out


# ---------------------------------------------------------------------------
# Replayable text records
# ---------------------------------------------------------------------------

def _fmt(value):
    arr = np.asarray(value)
    if arr.ndim == 0:
        return repr(float(arr))
    return ",".join(repr(float(v)) for v in arr)


def spec_to_record(spec):
    """Render a transform spec as a single human-readable log line."""
    if isinstance(spec, EqCurveSpec):
        return f"eq alpha={_fmt(spec.alpha)} beta={_fmt(spec.beta)}"
    if isinstance(spec, PercussionMixSpec):
        return f"perc volume={spec.volume!r} source={spec.percussion_source}"
    if isinstance(spec, GeometricSpec):
        return f"geom dk={spec.dk} dn={spec.dn} gamma={spec.gamma!r}"
    raise TypeError(f"unknown transform spec {type(spec).__name__}")


def _parse_scalar_or_vector(text):
    if "," in text:
        return np.array([float(v) for v in text.split(",")])
    return float(text)


def record_to_spec(line):
    """Parse a log line written by :func:`spec_to_record`."""
    tag, *fields = line.strip().split()
    kv = dict(f.split("=", 1) for f in fields)
    if tag == "eq":
        return EqCurveSpec(
            alpha=_parse_scalar_or_vector(kv["alpha"]),
            beta=_parse_scalar_or_vector(kv["beta"]),
        )
    if tag == "perc":
        return PercussionMixSpec(volume=float(kv["volume"]), percussion_source=kv.get("source", ""))
    if tag == "geom":
        return GeometricSpec(dk=int(kv["dk"]), dn=int(kv["dn"]), gamma=float(kv["gamma"]))
    raise ValueError(f"unknown transform record tag {tag!r}")
