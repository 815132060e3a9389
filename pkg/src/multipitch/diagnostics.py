"""Prediction-density and recall trajectories across checkpoints.

Self-supervision on unlabeled pools can steer the model toward blank
salience grids on exactly those pools; this harness measures per-split
recall and prediction density over training so such collapse is visible
and mechanically detectable.
"""

from dataclasses import dataclass, field

import numpy as np

from .evaluation import infer_track, multipitch_metrics, peak_pick

__all__ = [
    "DensityRow",
    "DensityTrajectory",
    "record_checkpoint",
    "detect_degeneration",
    "write_density_tsv",
    "read_density_tsv",
    "emit_curves",
]


@dataclass(frozen=True)
class DensityRow:
    epoch: int
    split: str
    mean_salience: float
    active_bins: float
    recall: float
    f1: float


@dataclass
class DensityTrajectory:
    rows: list = field(default_factory=list)

    def splits(self):
        return sorted({r.split for r in self.rows})

    def for_split(self, split):
        rows = [r for r in self.rows if r.split == split]
        return sorted(rows, key=lambda r: r.epoch)

    def extend(self, rows):
        self.rows.extend(rows)


def record_checkpoint(model, splits, epoch, config=None, threshold=0.5,
                      tile_seconds=4.0):
    """One DensityRow per split: mean salience, per-frame active-bin count
    after peak picking, recall, and F1, all unweighted track means."""
    rows = []
    for split_name in sorted(splits):
        tracks = splits[split_name]
        if not tracks:
            raise ValueError(f"split {split_name!r} is empty")
        stats = []
        for track in sorted(tracks, key=lambda t: t.id):
            salience = infer_track(model, track, config, tile_seconds)
            est = peak_pick(salience, threshold, config)
            mean_sal = float(salience.values.mean())
            active = est.total_count() / est.n_frames
            if track.annotation is not None:
                m = multipitch_metrics(est, track.annotation)
                stats.append((mean_sal, active, m.recall, m.f1))
            else:
                stats.append((mean_sal, active, np.nan, np.nan))
        arr = np.array(stats, dtype=float)
        with np.errstate(invalid="ignore"):
            mean = np.nanmean(arr, axis=0)
        mean = np.nan_to_num(mean, nan=0.0)
        rows.append(
            DensityRow(
                epoch=int(epoch),
                split=split_name,
                mean_salience=float(mean[0]),
                active_bins=float(mean[1]),
                recall=float(mean[2]),
                f1=float(mean[3]),
            )
        )
    return rows


def detect_degeneration(traj: DensityTrajectory, window=5, drop=0.5):
    """Per-split collapse verdicts.

    A split is flagged "degenerating" when its latest recall has dropped
    below ``drop`` times its peak recall while mean salience has been
    monotone non-increasing over the trailing ``window`` checkpoints.
    Splits with fewer than ``window`` checkpoints are "indeterminate".
    """
    verdicts = {}
    for split in traj.splits():
        rows = traj.for_split(split)
        if len(rows) < window:
            verdicts[split] = {"verdict": "indeterminate", "checkpoints": len(rows)}
            continue
        recalls = np.array([r.recall for r in rows])
        saliences = np.array([r.mean_salience for r in rows[-window:]])
        peak = float(recalls.max())
        latest = float(recalls[-1])
        tail_mean = float(recalls[-window:].mean())
        salience_declining = bool(np.all(np.diff(saliences) <= 1e-9))
        flagged = peak > 0 and latest < drop * peak and salience_declining
        verdicts[split] = {
            "verdict": "degenerating" if flagged else "stable",
            "peak_recall": peak,
            "latest_recall": latest,
            "trailing_mean_recall": tail_mean,
            "salience_declining": salience_declining,
            "checkpoints": len(rows),
        }
    return verdicts


# ---------------------------------------------------------------------------
# Trajectory files and plots
# ---------------------------------------------------------------------------

DENSITY_COLUMNS = ("epoch", "split", "mean_salience", "active_bins", "recall", "f1")


def write_density_tsv(path, traj: DensityTrajectory):
    with open(path, "w") as fh:
        fh.write("\t".join(DENSITY_COLUMNS) + "\n")
        for r in sorted(traj.rows, key=lambda r: (r.epoch, r.split)):
            fh.write(
                f"{r.epoch}\t{r.split}\t{r.mean_salience:.6g}\t"
                f"{r.active_bins:.6g}\t{r.recall:.6g}\t{r.f1:.6g}\n"
            )


def read_density_tsv(path):
    traj = DensityTrajectory()
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != DENSITY_COLUMNS:
            raise ValueError(f"unexpected density columns {header}")
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            traj.rows.append(
                DensityRow(
                    epoch=int(cells[0]),
                    split=cells[1],
                    mean_salience=float(cells[2]),
                    active_bins=float(cells[3]),
                    recall=float(cells[4]),
                    f1=float(cells[5]),
                )
            )
    return traj


def emit_curves(records, out_dir, stem="density"):
    """Render F1 and mean-salience curves per split, plus the data files.

    ``records`` maps a regime label to its DensityTrajectory (a bare
    trajectory is treated as one unlabeled regime).  Returns the list of
    files written.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    if isinstance(records, DensityTrajectory):
        records = {"run": records}
    if not records or all(not t.rows for t in records.values()):
        raise ValueError("no trajectory rows to plot")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    splits = sorted({s for t in records.values() for s in t.splits()})
    for split in splits:
        fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
        for label in sorted(records):
            rows = records[label].for_split(split)
            if not rows:
                continue
            epochs = [r.epoch for r in rows]
            axes[0].plot(epochs, [r.f1 for r in rows], marker="o", label=label)
            axes[1].plot(epochs, [r.mean_salience for r in rows], marker="o", label=label)
        axes[0].set_ylabel("F1")
        axes[1].set_ylabel("mean salience")
        axes[1].set_xlabel("epoch")
        axes[0].set_title(f"split: {split}")
        axes[0].legend()
        axes[1].legend()
        fig.tight_layout()
        img = out_dir / f"{stem}_{split}.png"
        fig.savefig(img, dpi=110)
        plt.close(fig)
        written.append(str(img))
    for label in sorted(records):
        data = out_dir / f"{stem}_{label}.tsv"
        write_density_tsv(data, records[label])
        written.append(str(data))
    return written
