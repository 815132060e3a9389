"""Batch composition and the optimization loop.

An epoch draws one random excerpt from every supervised track; batches of
self-supervision-only samples are drawn from an independently cycled pool
and never contribute to the supervised term.  Checkpoints are ranked by
validation F1.
"""

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataio import DataError, synth_percussion
from .diagnostics import DensityTrajectory, record_checkpoint, write_density_tsv
from .losses import LossRegime, total_loss
from .model import ModelConfig, SalienceModel, build, load_checkpoint, save_checkpoint
from .evaluation import evaluate_dataset
from .spectral import SpectralConfig, compute_hcqt, harmonic_energy_target
from .targets import annotations_to_activations, blur_target
from .transforms import (
    mix_percussion,
    sample_eq_curve,
    sample_geometric,
    sample_percussion_mix,
    spec_to_record,
)

__all__ = [
    "TrainConfig",
    "Batch",
    "BatchSample",
    "TrainingRecord",
    "NumericalAbort",
    "compose_batch",
    "train_run",
    "finetune_run",
    "default_percussion_pool",
]


class NumericalAbort(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good checkpoint."""

    def __init__(self, epoch, last_checkpoint):
        self.epoch = epoch
        self.last_checkpoint = last_checkpoint
        where = last_checkpoint if last_checkpoint is not None else "no checkpoint saved yet"
        super().__init__(f"non-finite loss at epoch {epoch}; last good checkpoint: {where}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters and batch composition counts."""

    batch_supervised: int = 8
    batch_unsupervised: int = 0
    lr_encoder: float = 5e-4
    lr_decoder: float = 2.5e-4
    warmup_epochs: int = 100
    clip_norm: float = 1.0
    epochs: int = 2500
    excerpt_seconds: float = 4.0
    regime: LossRegime = field(default_factory=LossRegime)
    finetune: bool = False
    validation_every: int = 25
    eq_per_frame: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_supervised <= 0 and self.regime.supervised:
            raise ValueError("batch_supervised must be positive when supervision is enabled")
        if self.lr_encoder < 0 or self.lr_decoder < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs <= 0 or self.validation_every <= 0:
            raise ValueError("epochs and validation_every must be positive")


@dataclass
class BatchSample:
    """One excerpt plus everything its enabled objectives need."""

    sample_id: str
    role: str  # "supervised" or "ssl"
    hcqt: object
    audio: np.ndarray
    target: object = None  # blurred salience, supervised samples only
    eq_spec: object = None
    perc_spec: object = None
    perc_hcqt: object = None
    geo_spec: object = None
    energy_target: object = None

    def transform_records(self):
        recs = []
        for spec in (self.eq_spec, self.perc_spec, self.geo_spec):
            if spec is not None:
                recs.append(spec_to_record(spec))
        return recs


@dataclass
class Batch:
    samples: list

    def __len__(self):
        return len(self.samples)


@dataclass
class TrainingRecord:
    """Everything a run produced: checkpoints, logs, and the best epoch."""

    run_dir: object = None
    best_epoch: int = -1
    best_f1: float = -1.0
    checkpoints: dict = field(default_factory=dict)  # epoch -> path or bytes
    loss_history: list = field(default_factory=list)  # (epoch, LossReport)
    validation: list = field(default_factory=list)  # (epoch, P, R, F1)
    density: DensityTrajectory = field(default_factory=DensityTrajectory)
    finished_epochs: int = 0
    interrupted: bool = False

    def best_checkpoint(self):
        return self.checkpoints.get(self.best_epoch)


def default_percussion_pool(seed, duration, n_clips=8, sample_rate=22050):
    """Seeded pool of synthetic percussion clips keyed by source id."""
    rng = np.random.default_rng(seed)
    return {f"perc_{i:03d}": synth_percussion(rng, duration, sample_rate)
            for i in range(n_clips)}


def _excerpt_frames(config: TrainConfig, sconf: SpectralConfig):
    return int(math.ceil(config.excerpt_seconds * sconf.sample_rate / sconf.hop))


def _make_sample(track, role, config, sconf, rng, percussion_pool):
    n_frames = _excerpt_frames(config, sconf)
    total = track.hcqt(sconf).n_frames
    start = int(rng.integers(0, max(total - n_frames, 0) + 1))
    tensor, audio = track.excerpt(start, n_frames, sconf)
    sample = BatchSample(sample_id=track.id, role=role, hcqt=tensor, audio=audio)

    if role == "supervised":
        if track.annotation is None:
            raise DataError(f"track {track.id} is supervised but has no annotation")
        activations = annotations_to_activations(track.annotation, tensor.frame_times, sconf)
        sample.target = blur_target(activations)

    regime = config.regime
    if regime.invariance_timbre:
        sample.eq_spec = sample_eq_curve(
            rng, sconf.bins_total, per_frame=config.eq_per_frame, n_frames=n_frames
        )
    if regime.invariance_percussion:
        if not percussion_pool:
            raise DataError("percussion invariance enabled but the percussion pool is empty")
        sample.perc_spec = sample_percussion_mix(rng, sorted(percussion_pool))
        clip = percussion_pool[sample.perc_spec.percussion_source]
        mixed = mix_percussion(audio, clip, sample.perc_spec.volume)
        sample.perc_hcqt = compute_hcqt(mixed, sconf)
    if regime.equivariance_geometric:
        sample.geo_spec = sample_geometric(rng, n_frames)
    if regime.energy_sparsity and role != "supervised":
        sample.energy_target = harmonic_energy_target(tensor)
    return sample


def compose_batch(sup_pool, ssl_pool, config: TrainConfig, rng,
                  spectral_config=None, percussion_pool=None,
                  n_supervised=None, n_unsupervised=None) -> Batch:
    """Draw a mixed batch: supervised excerpts plus ssl-only excerpts.

    Tracks are drawn without replacement from each pool; every sample gets
    fresh transform specs for each enabled objective.
    """
    sconf = spectral_config or SpectralConfig()
    n_sup = config.batch_supervised if n_supervised is None else n_supervised
    n_ssl = config.batch_unsupervised if n_unsupervised is None else n_unsupervised
    if len(sup_pool) < n_sup:
        raise DataError(
            f"supervised pool has {len(sup_pool)} track(s); batch needs {n_sup} "
            f"(short by {n_sup - len(sup_pool)})"
        )
    if len(ssl_pool) < n_ssl:
        raise DataError(
            f"ssl pool has {len(ssl_pool)} track(s); batch needs {n_ssl} "
            f"(short by {n_ssl - len(ssl_pool)})"
        )
    samples = []
    for i in rng.choice(len(sup_pool), size=n_sup, replace=False):
        samples.append(_make_sample(sup_pool[i], "supervised", config, sconf, rng, percussion_pool))
    for i in rng.choice(len(ssl_pool), size=n_ssl, replace=False) if n_ssl else []:
        samples.append(_make_sample(ssl_pool[i], "ssl", config, sconf, rng, percussion_pool))
    return Batch(samples=samples)


class _PoolCycler:
    """Without-replacement draws that reshuffle each time the pool empties."""

    def __init__(self, pool, rng):
        self.pool = list(pool)
        self.rng = rng
        self.queue = []

    def draw(self, n):
        out = []
        while len(out) < n:
            if not self.queue:
                self.queue = list(self.rng.permutation(len(self.pool)))
            out.append(self.pool[self.queue.pop(0)])
        return out


def _save_checkpoint_anywhere(model, run_dir, epoch):
    if run_dir is not None:
        path = Path(run_dir) / "checkpoints" / f"epoch_{epoch}.mpck"
        save_checkpoint(model, path)
        return str(path)
    buf = io.BytesIO()
    save_checkpoint(model, buf)
    return buf.getvalue()


def train_run(sup_pool, ssl_pool, val_set, config: TrainConfig, out_dir=None,
              model_config=None, spectral_config=None, percussion_pool=None,
              diag_splits=None, initial_model=None) -> TrainingRecord:
    """Run the optimization loop and return the full training record.

    Per step: forward every sample, reduce the enabled objectives, clip the
    global gradient norm, and take a decoupled-weight-decay adaptive-moment
    step with separate encoder/decoder rates under linear warmup.  Every
    ``validation_every`` epochs the model is checkpointed, scored on the
    validation set, and measured by the density diagnostics.
    """
    sconf = spectral_config or SpectralConfig()
    if initial_model is not None:
        model = initial_model
        if model_config is not None and model.config != model_config:
            raise DataError("checkpoint/model-config mismatch")
    else:
        if model_config is None:
            model_config = ModelConfig(
                seed=config.seed,
                bins_total=sconf.bins_total,
                in_channels=len(sconf.harmonics),
            )
        model = build(model_config)
    if model.config.bins_total != sconf.bins_total:
        raise DataError(
            f"model expects {model.config.bins_total} bins, features provide {sconf.bins_total}"
        )

    regime = config.regime
    if regime.supervised and not sup_pool:
        raise DataError("supervised training requested but the supervised pool is empty")
    if config.batch_unsupervised > 0 and not ssl_pool:
        raise DataError("batch_unsupervised > 0 but the ssl pool is empty")
    if regime.invariance_percussion and percussion_pool is None:
        percussion_pool = default_percussion_pool(
            config.seed + 0x9E37, config.excerpt_seconds, sample_rate=sconf.sample_rate
        )

    rate_scale = 0.2 if config.finetune else 1.0
    optimizer = torch.optim.AdamW(
        [
            {"params": list(model.encoder_parameters()), "lr": config.lr_encoder * rate_scale},
            {"params": list(model.decoder_parameters()), "lr": config.lr_decoder * rate_scale},
        ],
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=1e-2,
    )
    base_lrs = [g["lr"] for g in optimizer.param_groups]

    record = TrainingRecord(run_dir=out_dir)
    loss_fh = validation_fh = transforms_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out_dir / "log").mkdir(parents=True, exist_ok=True)
        loss_fh = open(out_dir / "log" / "losses.tsv", "w")
        validation_fh = open(out_dir / "log" / "validation.tsv", "w")
        validation_fh.write("epoch\tP\tR\tF1\n")
        transforms_fh = open(out_dir / "log" / "transforms.log", "w")

    if diag_splits is None:
        diag_splits = {"val": val_set} if val_set else {}
    rng = np.random.default_rng(config.seed)
    ssl_cycler = _PoolCycler(ssl_pool, rng) if config.batch_unsupervised > 0 else None
    last_checkpoint = None

    def checkpoint_and_measure(epoch):
        nonlocal last_checkpoint
        ref = _save_checkpoint_anywhere(model, record.run_dir, epoch)
        record.checkpoints[epoch] = ref
        last_checkpoint = ref
        if val_set:
            rep = evaluate_dataset(model, val_set, sconf, tile_seconds=config.excerpt_seconds)
            record.validation.append((epoch, rep.precision, rep.recall, rep.f1))
            if validation_fh:
                validation_fh.write(
                    f"{epoch}\t{rep.precision:.4f}\t{rep.recall:.4f}\t{rep.f1:.4f}\n"
                )
                validation_fh.flush()
        if diag_splits:
            rows = record_checkpoint(
                model, diag_splits, epoch, sconf, tile_seconds=config.excerpt_seconds
            )
            record.density.extend(rows)

    try:
        for epoch in range(1, config.epochs + 1):
            if config.finetune or config.warmup_epochs <= 0:
                warm = 1.0
            else:
                warm = min(1.0, epoch / config.warmup_epochs)
            for group, base in zip(optimizer.param_groups, base_lrs):
                group["lr"] = base * warm

            order = rng.permutation(len(sup_pool)) if sup_pool else np.array([], dtype=int)
            step = max(config.batch_supervised, 1)
            chunks = [order[i : i + step] for i in range(0, len(order), step)] or [order]
            epoch_reports = []
            for chunk in chunks:
                sup_tracks = [sup_pool[i] for i in chunk]
                ssl_tracks = ssl_cycler.draw(config.batch_unsupervised) if ssl_cycler else []
                batch = compose_batch(
                    sup_tracks, ssl_tracks, config, rng,
                    spectral_config=sconf, percussion_pool=percussion_pool,
                    n_supervised=len(sup_tracks), n_unsupervised=len(ssl_tracks),
                )
                report = total_loss(batch, model, regime)
                if not math.isfinite(report.total):
                    raise NumericalAbort(epoch, last_checkpoint)
                optimizer.zero_grad()
                report.total_tensor.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
                optimizer.step()
                epoch_reports.append(report)
                if transforms_fh:
                    for s in batch.samples:
                        for rec in s.transform_records():
                            transforms_fh.write(f"{epoch}\t{s.sample_id}\t{rec}\n")

            mean_report = _mean_reports(epoch_reports)
            record.loss_history.append((epoch, mean_report))
            if loss_fh:
                for term, value in mean_report.enabled_rows():
                    loss_fh.write(f"{epoch}\t{term}\t{value:.6g}\n")
                loss_fh.flush()

            record.finished_epochs = epoch
            if epoch % config.validation_every == 0 or epoch == config.epochs:
                checkpoint_and_measure(epoch)
    except KeyboardInterrupt:
        record.interrupted = True
        checkpoint_and_measure(record.finished_epochs or 1)
    finally:
        for fh in (loss_fh, validation_fh, transforms_fh):
            if fh and not fh.closed:
                fh.close()

    if record.validation:
        best = max(record.validation, key=lambda row: (row[3], -row[0]))
        record.best_epoch, record.best_f1 = best[0], best[3]
    if record.run_dir is not None and record.density.rows:
        write_density_tsv(Path(record.run_dir) / "log" / "density.tsv", record.density)
    return record


def _mean_reports(reports):
    from .losses import LossReport, TERM_NAMES

    mean = LossReport()
    for term in TERM_NAMES + ("total",):
        vals = [getattr(r, term) for r in reports if term == "total" or r.counts.get(term)]
        if vals:
            setattr(mean, term, float(np.mean(vals)))
            if term != "total":
                mean.counts[term] = sum(r.counts.get(term, 0) for r in reports)
    return mean


def finetune_run(init_checkpoint, sup_pool, ssl_pool, val_set, config: TrainConfig,
                 **kwargs) -> TrainingRecord:
    """Resume from a checkpoint at one fifth the learning rate, no warmup."""
    if isinstance(init_checkpoint, bytes):
        model = load_checkpoint(io.BytesIO(init_checkpoint))
    else:
        model = load_checkpoint(init_checkpoint)
    mconf = kwargs.pop("model_config", None)
    if mconf is not None and mconf != model.config:
        raise DataError("checkpoint/config mismatch")
    config = replace(config, finetune=True)
    return train_run(
        sup_pool, ssl_pool, val_set, config,
        initial_model=model, model_config=model.config, **kwargs,
    )
