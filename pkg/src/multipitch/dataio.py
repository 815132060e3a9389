"""Audio and annotation ingestion, synthetic data generation, and splits.

Real corpora are ingested through WAV + tab-separated annotation files; the
synthetic generators produce the same structures with exact annotations, so
they double as test oracles.
"""

import struct
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.signal

from .spectral import SpectralConfig, amplitude_to_unit_db, bin_to_hz, compute_hcqt, HcqtTensor
from .targets import PitchAnnotation, read_annotation, write_annotation

__all__ = [
    "DataError",
    "TrackRecord",
    "Track",
    "SynthSpec",
    "SplitScheme",
    "SplitSet",
    "load_audio",
    "read_wav",
    "write_wav",
    "resample",
    "synth_track",
    "synth_percussion",
    "make_splits",
    "load_track",
    "read_manifest",
    "write_manifest",
]

ROLES = ("train-supervised", "train-ssl", "validation", "test")
ANNOTATION_PERIOD = 0.01  # synthetic annotation cadence, finer than the hop


class DataError(Exception):
    """Unreadable or inconsistent data (maps to CLI exit status 2)."""


# ---------------------------------------------------------------------------
# WAV container
# ---------------------------------------------------------------------------

def read_wav(path):
    """Parse a PCM WAV file (8/16/24-bit int or 32-bit float).

    Returns (samples, sample_rate) with samples float32 in [-1, 1], one
    column per channel.  Malformed containers raise DataError with the byte
    offset of the problem.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF":
        raise DataError(f"{path}: not a RIFF container (byte 0)")
    if raw[8:12] != b"WAVE":
        raise DataError(f"{path}: not a WAVE form (byte 8)")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_len,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + chunk_len]
        if len(body) < chunk_len:
            raise DataError(f"{path}: truncated {chunk_id!r} chunk (byte {pos})")
        if chunk_id == b"fmt ":
            if chunk_len < 16:
                raise DataError(f"{path}: fmt chunk too short (byte {pos})")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = (pos + 8, body)
        pos += 8 + chunk_len + (chunk_len & 1)
    if fmt is None:
        raise DataError(f"{path}: missing fmt chunk (scanned to byte {pos})")
    if data is None:
        raise DataError(f"{path}: missing data chunk (scanned to byte {pos})")
    audio_format, n_channels, sample_rate, _, block_align, bits = fmt
    offset, body = data
    if n_channels < 1:
        raise DataError(f"{path}: zero channels (byte {offset})")

    if audio_format == 3 and bits == 32:
        samples = np.frombuffer(body, dtype="<f4").astype(np.float32)
    elif audio_format == 1 and bits == 16:
        samples = np.frombuffer(body, dtype="<i2").astype(np.float32) / 32768.0
    elif audio_format == 1 and bits == 8:
        samples = (np.frombuffer(body, dtype=np.uint8).astype(np.float32) - 128.0) / 128.0
    elif audio_format == 1 and bits == 24:
        trimmed = body[: len(body) - len(body) % 3]
        as_bytes = np.frombuffer(trimmed, dtype=np.uint8).reshape(-1, 3)
        ints = (
            as_bytes[:, 0].astype(np.int32)
            | (as_bytes[:, 1].astype(np.int32) << 8)
            | (as_bytes[:, 2].astype(np.int32) << 16)
        )
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints.astype(np.float32) / float(1 << 23)
    else:
        raise DataError(
            f"{path}: unsupported format code {audio_format} / {bits}-bit (byte {offset})"
        )
    frames = samples.size // n_channels
    samples = samples[: frames * n_channels].reshape(frames, n_channels)
    return samples, int(sample_rate)


def write_wav(path, samples, sample_rate, bits=16):
    """Write mono or multi-channel float samples as a PCM WAV file."""
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim == 1:
        samples = samples[:, None]
    n_frames, n_channels = samples.shape
    if bits == 16:
        payload = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
        block = 2 * n_channels
        fmt_code = 1
    elif bits == 32:
        payload = samples.astype("<f4").tobytes()
        block = 4 * n_channels
        fmt_code = 3
    else:
        raise ValueError("write_wav supports 16-bit PCM or 32-bit float")
    with open(path, "wb") as fh:
        data_len = len(payload)
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 36 + data_len))
        fh.write(b"WAVE")
        fh.write(b"fmt ")
        fh.write(struct.pack("<IHHIIHH", 16, fmt_code, n_channels, sample_rate,
                             sample_rate * block, block, bits))
        fh.write(b"data")
        fh.write(struct.pack("<I", data_len))
        fh.write(payload)


def resample(samples, rate_in, rate_out):
    """Rational-rate polyphase resampling (windowed-sinc, Kaiser)."""
    if rate_in == rate_out:
        return np.asarray(samples, dtype=np.float32)
    ratio = Fraction(rate_out, rate_in).limit_denominator(1 << 16)
    out = scipy.signal.resample_poly(np.asarray(samples, dtype=np.float64),
                                     ratio.numerator, ratio.denominator)
    return out.astype(np.float32)


def load_audio(path, target_rate=22050):
    """Mono float samples at the target rate; stereo is mean-downmixed."""
    samples, rate = read_wav(path)
    mono = samples.mean(axis=1) if samples.shape[1] > 1 else samples[:, 0]
    return resample(mono, rate, target_rate)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Additive-synthesis track recipe with an exact annotation by construction.

    Voices play piecewise-constant notes drawn from the spectral bin grid;
    each voice sits in its own register stratum so concurrent notes stay at
    least a few bins apart.
    """

    n_voices: int = 2
    duration: float = 6.0
    partials: int = 8
    noise_floor: float = 1e-4
    note_low_bin: int = 60
    note_high_bin: int = 360
    note_seconds: tuple = (0.4, 1.2)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_voices <= 4:
            raise ValueError("n_voices must lie in [0, 4]")
        if self.duration <= 0:
            raise ValueError("duration must be positive")


def synth_track(spec: SynthSpec, config=None):
    """Render a polyphonic additive track and its exact pitch annotation.

    Partials p = 1..8 carry amplitude 1/p; partials at or above Nyquist are
    dropped.  The mix is peak-normalized to 0.9 and annotation rows are
    emitted every 10 ms.
    """
    config = config or SpectralConfig()
    sr = config.sample_rate
    rng = np.random.default_rng(spec.seed)
    n_samples = int(round(spec.duration * sr))
    t = np.arange(n_samples) / sr
    audio = np.zeros(n_samples, dtype=np.float64)

    # (start, end, f0) note events per voice
    events = []
    span = spec.note_high_bin - spec.note_low_bin
    for v in range(spec.n_voices):
        lo = spec.note_low_bin + (span * v) // max(spec.n_voices, 1)
        hi = spec.note_low_bin + (span * (v + 1)) // max(spec.n_voices, 1) - 3
        cursor = 0.0
        while cursor < spec.duration:
            length = float(rng.uniform(*spec.note_seconds))
            note_bin = int(rng.integers(lo, hi + 1))
            f0 = float(bin_to_hz(note_bin, config))
            start, end = cursor, min(cursor + length, spec.duration)
            events.append((start, end, f0))
            n0, n1 = int(round(start * sr)), int(round(end * sr))
            seg_t = t[n0:n1]
            seg = np.zeros(n1 - n0)
            for p in range(1, spec.partials + 1):
                freq = p * f0
                if freq >= sr / 2:
                    break
                phase = rng.uniform(0.0, 2.0 * np.pi)
                seg += np.sin(2.0 * np.pi * freq * seg_t + phase) / p
            fade = min(int(0.005 * sr), seg.size // 2)
            if fade > 0:
                ramp = np.linspace(0.0, 1.0, fade)
                seg[:fade] *= ramp
                seg[-fade:] *= ramp[::-1]
            audio[n0:n1] += seg
            cursor += length

    if spec.noise_floor > 0:
        audio += spec.noise_floor * rng.standard_normal(n_samples)
    peak = np.abs(audio).max()
    if peak > 0:
        audio *= 0.9 / peak

    times = np.arange(0.0, spec.duration, ANNOTATION_PERIOD)
    freqs = [
        np.array([f0 for s, e, f0 in events if s <= tt < e], dtype=float)
        for tt in times
    ]
    ann = PitchAnnotation(times=times, freqs=freqs, source_id=f"synth-{spec.seed}")
    return audio.astype(np.float32), ann


def synth_percussion(rng, duration, sample_rate=22050):
    """Sparse non-harmonic noise bursts standing in for a percussion corpus.

    Bursts are exponentially decaying white noise (20-80 ms decay) at 2-8
    onsets per second, low- or high-band shaped for kick/hat contrast, so no
    stable spectral peak persists.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n_samples = int(round(duration * sample_rate))
    out = np.zeros(n_samples, dtype=np.float64)
    rate = float(rng.uniform(2.0, 8.0))
    n_onsets = max(1, int(round(rate * duration)))
    onsets = np.sort(rng.uniform(0.0, duration, size=n_onsets))
    for onset in onsets:
        decay = float(rng.uniform(0.020, 0.080))
        length = min(int(5 * decay * sample_rate), n_samples)
        start = int(onset * sample_rate)
        length = min(length, n_samples - start)
        if length <= 4:
            continue
        env = np.exp(-np.arange(length) / (decay * sample_rate))
        burst = rng.standard_normal(length) * env
        if rng.random() < 0.5:  # kick: keep the low band
            b, a = scipy.signal.butter(2, 300.0 / (sample_rate / 2), btype="low")
        else:  # hat: keep the high band
            b, a = scipy.signal.butter(2, 4000.0 / (sample_rate / 2), btype="high")
        out[start : start + length] += scipy.signal.lfilter(b, a, burst)
    peak = np.abs(out).max()
    if peak > 0:
        out *= 0.8 / peak
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Track records, manifests, and splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrackRecord:
    """One dataset entry: where the audio and annotation live, plus roles."""

    id: str
    audio: object  # path string or SynthSpec
    annotation: object = None  # path string or None (synth tracks are exact)
    roles: tuple = ()
    corpus: str = ""

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(self.roles))
        for role in self.roles:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        if "train-supervised" in self.roles and self.annotation is None \
                and not isinstance(self.audio, SynthSpec):
            raise ValueError(f"track {self.id}: supervised role requires an annotation")


@dataclass
class Track:
    """Loaded audio plus annotation, with a lazily cached full-track HCQT."""

    id: str
    samples: np.ndarray
    annotation: object = None
    _hcqt_cache: dict = field(default_factory=dict, repr=False)

    def hcqt(self, config: SpectralConfig) -> HcqtTensor:
        if config not in self._hcqt_cache:
            self._hcqt_cache[config] = compute_hcqt(self.samples, config)
        return self._hcqt_cache[config]

    def excerpt(self, start_frame, n_frames, config: SpectralConfig):
        """(HcqtTensor, audio slice) for a frame-aligned excerpt.

        The linear grid is cropped from the cached full-track transform and
        re-normalized to unit dB over the excerpt; short tracks are padded
        with silent frames on the right.
        """
        full = self.hcqt(config)
        stop = start_frame + n_frames
        linear = full.linear[:, :, start_frame:stop]
        if linear.shape[-1] < n_frames:
            pad = n_frames - linear.shape[-1]
            linear = np.pad(linear, ((0, 0), (0, 0), (0, pad)))
        unit_db = amplitude_to_unit_db(linear, config.db_floor)
        frame_times = (start_frame + np.arange(n_frames)) * (config.hop / config.sample_rate)
        tensor = HcqtTensor(
            linear=linear, unit_db=unit_db, frame_times=frame_times, config=config
        )
        lo = start_frame * config.hop
        hi = min(lo + n_frames * config.hop, self.samples.size)
        audio = np.zeros(n_frames * config.hop, dtype=np.float32)
        audio[: hi - lo] = self.samples[lo:hi]
        return tensor, audio


def load_track(record: TrackRecord, config=None) -> Track:
    """Materialize a record: load or synthesize audio at the working rate."""
    config = config or SpectralConfig()
    if isinstance(record.audio, SynthSpec):
        samples, ann = synth_track(record.audio, config)
        if record.annotation is not None:
            ann = read_annotation(record.annotation, source_id=record.id)
        return Track(id=record.id, samples=samples, annotation=ann)
    try:
        samples = load_audio(record.audio, config.sample_rate)
    except FileNotFoundError as exc:
        raise DataError(f"track {record.id}: {exc}") from exc
    ann = None
    if record.annotation is not None:
        ann = read_annotation(record.annotation, source_id=record.id)
    return Track(id=record.id, samples=samples, annotation=ann)


def write_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            ann = rec.annotation if rec.annotation is not None else "-"
            fh.write(f"{rec.id}\t{rec.audio}\t{ann}\t{','.join(rec.roles)}\n")


def read_manifest(path):
    records = []
    base = Path(path).parent
    if not Path(path).exists():
        raise DataError(f"manifest {path} not found")
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cells = line.split("\t")
            if len(cells) != 4:
                raise DataError(f"{path}:{ln}: expected 4 tab-separated fields")
            track_id, audio, ann, roles = cells
            audio_path = str((base / audio)) if not Path(audio).is_absolute() else audio
            ann_path = None
            if ann != "-":
                ann_path = str((base / ann)) if not Path(ann).is_absolute() else ann
            records.append(
                TrackRecord(
                    id=track_id,
                    audio=audio_path,
                    annotation=ann_path,
                    roles=tuple(r for r in roles.split(",") if r),
                )
            )
    return records


@dataclass(frozen=True)
class SplitScheme:
    """How records map to training pools.

    kind "roles" trusts the records' own tags; "t1t2" carves ``t2_size``
    tracks out of the supervised pool and demotes them to self-supervision
    only; "cross" takes the supervised pool from ``supervised_corpus`` and
    the self-supervision pool from ``ssl_corpus``.
    """

    kind: str = "roles"
    t2_size: int = 10
    supervised_corpus: str = ""
    ssl_corpus: str = ""
    seed: int = 0


@dataclass
class SplitSet:
    train_supervised: list
    train_ssl: list
    validation: list
    test: list

    def pools(self):
        return {
            "train-supervised": self.train_supervised,
            "train-ssl": self.train_ssl,
            "validation": self.validation,
            "test": self.test,
        }


def make_splits(records, scheme: SplitScheme) -> SplitSet:
    """Deterministic, pairwise-disjoint track pools."""
    by_role = {role: [r for r in records if role in r.roles] for role in ROLES}

    if scheme.kind == "roles":
        split = SplitSet(
            train_supervised=by_role["train-supervised"],
            train_ssl=by_role["train-ssl"],
            validation=by_role["validation"],
            test=by_role["test"],
        )
    elif scheme.kind == "t1t2":
        sup = by_role["train-supervised"]
        if scheme.t2_size >= len(sup):
            raise DataError(
                f"t2_size {scheme.t2_size} must be smaller than the supervised pool ({len(sup)})"
            )
        rng = np.random.default_rng(scheme.seed)
        order = rng.permutation(len(sup))
        t2_ids = {sup[i].id for i in order[: scheme.t2_size]}
        split = SplitSet(
            train_supervised=[r for r in sup if r.id not in t2_ids],
            train_ssl=[replace(r, roles=("train-ssl",)) for r in sup if r.id in t2_ids],
            validation=by_role["validation"],
            test=by_role["test"],
        )
    elif scheme.kind == "cross":
        sup = [r for r in by_role["train-supervised"] if r.corpus == scheme.supervised_corpus]
        ssl = [r for r in records if r.corpus == scheme.ssl_corpus]
        ssl = [replace(r, roles=("train-ssl",)) for r in ssl]
        split = SplitSet(
            train_supervised=sup,
            train_ssl=ssl,
            validation=by_role["validation"],
            test=by_role["test"],
        )
    else:
        raise ValueError(f"unknown split scheme kind {scheme.kind!r}")

    seen = {}
    for pool_name, pool in split.pools().items():
        for rec in pool:
            if rec.id in seen and seen[rec.id] != pool_name:
                raise DataError(
                    f"track {rec.id} assigned to both {seen[rec.id]} and {pool_name}"
                )
            seen[rec.id] = pool_name
    return split
