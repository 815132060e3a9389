"""Salience-to-estimate conversion and frame-level multi-pitch scoring."""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .spectral import SalienceGram, SpectralConfig, amplitude_to_unit_db, bin_to_hz, HcqtTensor
from .targets import PitchAnnotation

__all__ = [
    "MultipitchEstimate",
    "MetricsReport",
    "peak_pick",
    "match_frame",
    "multipitch_metrics",
    "infer_track",
    "evaluate_dataset",
    "write_metrics",
]


@dataclass
class MultipitchEstimate:
    """Per-frame lists of estimated frequencies with their timestamps."""

    times: np.ndarray
    freqs: list

    @property
    def n_frames(self):
        return self.times.size

    def total_count(self):
        return int(sum(f.size for f in self.freqs))


@dataclass
class MetricsReport:
    """Frame-level precision/recall/F1, per track and averaged across tracks."""

    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    per_track: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)


def _f1(p, r):
    return 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0


def peak_pick(salience, threshold=0.5, config=None):
    """Select per-frame local maxima at or above the threshold.

    A bin is picked iff it meets the threshold, is strictly above its lower
    neighbor and >= its upper neighbor (missing neighbors count as -inf), so
    the leftmost bin of a plateau wins.  Picked bins map to Hz.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    config = config or SpectralConfig()
    if isinstance(salience, SalienceGram):
        values, times = salience.values, salience.frame_times
    else:
        values = np.asarray(salience)
        times = np.arange(values.shape[-1]) * (config.hop / config.sample_rate)
    below = np.full((1, values.shape[-1]), -np.inf)
    lower = np.concatenate([below, values[:-1]], axis=0)
    upper = np.concatenate([values[1:], below], axis=0)
    picked = (values >= threshold) & (values > lower) & (values >= upper)
    centers = bin_to_hz(np.arange(values.shape[0]), config)
    freqs = [centers[picked[:, n]] for n in range(values.shape[-1])]
    return MultipitchEstimate(times=np.asarray(times, dtype=float).copy(), freqs=freqs)


TOLERANCE_GUARD = 1e-3  # semitones; keeps pairs quoted *at* the boundary inside it


def match_frame(est_freqs, ref_freqs, tol_semitones=0.5):
    """Greedy one-to-one matching in ascending frequency order.

    Both lists are sorted; a pair matches when it is within the semitone
    tolerance on a log scale (with a small guard band so values quoted at
    the boundary stay inside it).  Returns the number of matched pairs.
    """
    est = np.sort(np.asarray(est_freqs, dtype=float))
    ref = np.sort(np.asarray(ref_freqs, dtype=float))
    i = j = tp = 0
    while i < est.size and j < ref.size:
        if abs(np.log2(est[i] / ref[j])) * 12.0 <= tol_semitones + TOLERANCE_GUARD:
            tp += 1
            i += 1
            j += 1
        elif est[i] < ref[j]:
            i += 1
        else:
            j += 1
    return tp


def multipitch_metrics(est: MultipitchEstimate, ref: PitchAnnotation,
                       tol_semitones=0.5) -> MetricsReport:
    """Score one track's estimates against its reference annotation.

    Estimate frames take the reference entry nearest in time (within half
    the annotation period).  Precision and recall pool true positives over
    frames; an empty denominator yields 1 when both sides are empty, else 0.
    """
    if est.n_frames == 0:
        raise ValueError("estimate has no frames")
    half_period = ref.period() / 2.0
    ref_lists = []
    overlap = False
    for t in est.times:
        if ref.n_entries == 0:
            ref_lists.append(np.empty(0))
            continue
        idx = int(np.searchsorted(ref.times, t))
        candidates = [c for c in (idx - 1, idx) if 0 <= c < ref.n_entries]
        nearest = min(candidates, key=lambda c: abs(ref.times[c] - t))
        if abs(ref.times[nearest] - t) <= half_period:
            ref_lists.append(ref.freqs[nearest])
            overlap = True
        else:
            ref_lists.append(np.empty(0))
    if ref.n_entries > 0 and not overlap:
        raise ValueError("no overlapping time support between estimate and reference")

    tp = n_est = n_ref = 0
    for e, r in zip(est.freqs, ref_lists):
        tp += match_frame(e, r, tol_semitones)
        n_est += e.size
        n_ref += r.size
    if n_est == 0 and n_ref > 0:
        warnings.warn("estimate is blank against a non-empty reference; precision set to 0")
    precision = tp / n_est if n_est else (1.0 if n_ref == 0 else 0.0)
    recall = tp / n_ref if n_ref else (1.0 if n_est == 0 else 0.0)
    return MetricsReport(precision=precision, recall=recall, f1=_f1(precision, recall))


def infer_track(model, track, config=None, tile_seconds=4.0):
    """Full-track salience by concatenating non-overlapping hop-aligned tiles."""
    config = config or SpectralConfig()
    full = track.hcqt(config)
    tile_frames = int(np.ceil(tile_seconds * config.sample_rate / config.hop))
    pieces = []
    for start in range(0, full.n_frames, tile_frames):
        stop = min(start + tile_frames, full.n_frames)
        linear = full.linear[:, :, start:stop]
        tensor = HcqtTensor(
            linear=linear,
            unit_db=amplitude_to_unit_db(linear, config.db_floor),
            frame_times=full.frame_times[start:stop],
            config=config,
        )
        pieces.append(model.predict(tensor).values)
    values = np.concatenate(pieces, axis=-1)
    return SalienceGram(values=values, frame_times=full.frame_times.copy())


def evaluate_dataset(model, tracks, config=None, threshold=0.5,
                     tol_semitones=0.5, tile_seconds=4.0) -> MetricsReport:
    """Unweighted track-mean precision/recall/F1 over a dataset."""
    report = MetricsReport()
    for track in sorted(tracks, key=lambda t: t.id):
        if track.annotation is None:
            report.skipped.append(track.id)
            warnings.warn(f"track {track.id} has no annotation; skipped")
            continue
        try:
            salience = infer_track(model, track, config, tile_seconds)
        except Exception as exc:  # unreadable/degenerate input: skip + report
            report.skipped.append(track.id)
            warnings.warn(f"track {track.id} failed: {exc}")
            continue
        est = peak_pick(salience, threshold, config)
        track_report = multipitch_metrics(est, track.annotation, tol_semitones)
        report.per_track[track.id] = (
            track_report.precision, track_report.recall, track_report.f1
        )
    if report.per_track:
        stats = np.array(list(report.per_track.values()))
        report.precision, report.recall, report.f1 = stats.mean(axis=0).tolist()
    return report


def write_metrics(report: MetricsReport, tsv_path, json_path=None):
    """Tab-separated per-track rows plus a machine-readable mirror."""
    with open(tsv_path, "w") as fh:
        fh.write("track\tP\tR\tF1\n")
        for track_id, (p, r, f1) in sorted(report.per_track.items()):
            fh.write(f"{track_id}\t{p:.4f}\t{r:.4f}\t{f1:.4f}\n")
        fh.write(f"MEAN\t{report.precision:.4f}\t{report.recall:.4f}\t{report.f1:.4f}\n")
    if json_path is not None:
        payload = {
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "per_track": {
                k: {"precision": p, "recall": r, "f1": f}
                for k, (p, r, f) in report.per_track.items()
            },
            "skipped": report.skipped,
        }
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=2)
