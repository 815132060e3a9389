"""Command-line entry point: train, finetune, eval, infer, transform, synth, plot.

Configuration is a flat key = value text file whose keys mirror the
TrainConfig / SpectralConfig / ModelConfig field names; ``--set key=value``
overrides individual keys.  Exit status: 0 success, 1 usage error, 2 data
error, 3 numerical abort.
"""

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .dataio import (
    DataError,
    SplitScheme,
    SynthSpec,
    TrackRecord,
    load_track,
    make_splits,
    read_manifest,
    synth_track,
    write_manifest,
    write_wav,
)
from .diagnostics import emit_curves, read_density_tsv
from .evaluation import evaluate_dataset, infer_track, peak_pick, write_metrics
from .losses import LossRegime
from .model import ModelConfig, load_checkpoint
from .spectral import SpectralConfig, compute_hcqt, write_sfg
from .targets import PitchAnnotation, write_annotation
from .train import NumericalAbort, TrainConfig, finetune_run, train_run
from .transforms import (
    apply_eq,
    apply_geometric,
    sample_eq_curve,
    sample_geometric,
    spec_to_record,
)

__all__ = ["main", "run"]


class UsageError(Exception):
    """Bad flags or config keys (maps to exit status 1)."""


RUN_KEYS = {
    "manifest": str,
    "split_scheme": str,
    "split_seed": int,
    "t2_size": int,
    "supervised_corpus": str,
    "ssl_corpus": str,
    "init_checkpoint": str,
    "checkpoint": str,
    "threshold": float,
}

_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_SPECTRAL_KEYS = {f.name: f for f in fields(SpectralConfig)}
_MODEL_KEYS = {f.name: f for f in fields(ModelConfig) if f.name != "seed"}


def _parse_value(key, text):
    text = text.strip()
    if key == "regime":
        return LossRegime.from_string(text)
    if key in ("harmonics",):
        return tuple(float(v) for v in text.split(","))
    if key in ("dilation_schedule", "freq_stride"):
        parts = [int(v) for v in text.split(",")]
        return parts[0] if len(parts) == 1 and key == "freq_stride" else tuple(parts)
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def parse_config_text(lines, source="<config>"):
    """Flat ``key = value`` pairs; '#' starts a comment."""
    out = {}
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{ln}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def resolve_configs(pairs):
    """Split flat key/value strings into the three config objects + run keys.

    The flat ``seed`` sets TrainConfig.seed and seeds the model;
    ``model_seed`` overrides the model seed independently.
    """
    train_kw, spectral_kw, model_kw, run_kw = {}, {}, {}, {}
    for key, text in pairs.items():
        if key == "model_seed":
            model_kw["seed"] = int(text)
        elif key in _TRAIN_KEYS:
            train_kw[key] = _parse_value(key, text)
        elif key in _SPECTRAL_KEYS:
            spectral_kw[key] = _parse_value(key, text)
        elif key in _MODEL_KEYS:
            model_kw[key] = _parse_value(key, text)
        elif key in RUN_KEYS:
            run_kw[key] = RUN_KEYS[key](text)
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        spectral = SpectralConfig(**spectral_kw)
        train = TrainConfig(**train_kw)
        model_kw.setdefault("seed", train.seed)
        model_kw.setdefault("bins_total", spectral.bins_total)
        model_kw.setdefault("in_channels", len(spectral.harmonics))
        model = ModelConfig(**model_kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return train, spectral, model, run_kw


def _resolved_lines(train, spectral, model, run_kw, extra=()):
    lines = []
    for cfg in (train, spectral, model):
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            if f.name == "regime":
                value = value.to_string()
            elif isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            name = "model_seed" if (cfg is model and f.name == "seed") else f.name
            lines.append(f"{name} = {value}")
    for key in sorted(run_kw):
        lines.append(f"{key} = {run_kw[key]}")
    lines.extend(extra)
    return lines


def _write_run_manifest(out_dir, lines):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _load_pools(run_kw, spectral):
    if "manifest" not in run_kw:
        raise UsageError("config must name a dataset manifest")
    records = read_manifest(run_kw["manifest"])
    scheme = SplitScheme(
        kind=run_kw.get("split_scheme", "roles"),
        t2_size=run_kw.get("t2_size", 10),
        supervised_corpus=run_kw.get("supervised_corpus", ""),
        ssl_corpus=run_kw.get("ssl_corpus", ""),
        seed=run_kw.get("split_seed", 0),
    )
    split = make_splits(records, scheme)
    pools = {
        name: [load_track(rec, spectral) for rec in recs]
        for name, recs in split.pools().items()
    }
    return pools


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_train(args, finetune=False):
    pairs = _collect_pairs(args)
    train, spectral, model_cfg, run_kw = resolve_configs(pairs)
    pools = _load_pools(run_kw, spectral)
    out_dir = Path(args.out)
    lines = _resolved_lines(train, spectral, model_cfg, run_kw,
                            extra=[f"command = {'finetune' if finetune else 'train'}"])
    _write_run_manifest(out_dir, lines)

    diag = {"val": pools["validation"]} if pools["validation"] else {}
    ssl_with_refs = [t for t in pools["train-ssl"] if t.annotation is not None]
    if ssl_with_refs:
        diag["ssl"] = ssl_with_refs

    if finetune:
        if "init_checkpoint" not in run_kw:
            raise UsageError("finetune requires init_checkpoint")
        record = finetune_run(
            run_kw["init_checkpoint"],
            pools["train-supervised"], pools["train-ssl"], pools["validation"],
            train, out_dir=out_dir, spectral_config=spectral, diag_splits=diag or None,
        )
    else:
        record = train_run(
            pools["train-supervised"], pools["train-ssl"], pools["validation"],
            train, out_dir=out_dir, model_config=model_cfg, spectral_config=spectral,
            diag_splits=diag or None,
        )
    print(f"best epoch {record.best_epoch} F1 {record.best_f1:.4f} run {out_dir}")
    return 0


def _cmd_eval(args):
    pairs = _collect_pairs(args)
    train, spectral, _, run_kw = resolve_configs(pairs)
    if "checkpoint" not in run_kw:
        raise UsageError("eval requires checkpoint")
    pools = _load_pools(run_kw, spectral)
    tracks = pools["test"] or pools["validation"]
    if not tracks:
        raise DataError("manifest provides no test or validation tracks")
    model = load_checkpoint(run_kw["checkpoint"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate_dataset(
        model, tracks, spectral,
        threshold=run_kw.get("threshold", 0.5),
        tile_seconds=train.excerpt_seconds,
    )
    write_metrics(report, out_dir / "metrics.tsv", out_dir / "metrics.json")
    print(f"P {report.precision:.4f} R {report.recall:.4f} F1 {report.f1:.4f}")
    return 0


def _cmd_infer(args):
    pairs = _collect_pairs(args)
    train, spectral, _, run_kw = resolve_configs(pairs)
    if "checkpoint" not in run_kw:
        raise UsageError("infer requires checkpoint")
    model = load_checkpoint(run_kw["checkpoint"])
    from .dataio import Track, load_audio

    samples = load_audio(args.audio, spectral.sample_rate)
    track = Track(id=Path(args.audio).stem, samples=samples)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    salience = infer_track(model, track, spectral, tile_seconds=train.excerpt_seconds)
    estimate = peak_pick(salience, run_kw.get("threshold", 0.5), spectral)
    write_sfg(out_dir / "salience.sfg", salience.values[np.newaxis])
    write_annotation(
        out_dir / "estimates.tsv",
        PitchAnnotation(times=estimate.times, freqs=estimate.freqs, source_id=track.id),
    )
    print(f"wrote {out_dir / 'salience.sfg'} and {out_dir / 'estimates.tsv'}")
    return 0


def _cmd_transform(args):
    pairs = _collect_pairs(args)
    _, spectral, _, _ = resolve_configs(pairs)
    from .dataio import load_audio

    samples = load_audio(args.audio, spectral.sample_rate)
    hcqt = compute_hcqt(samples, spectral)
    rng = np.random.default_rng(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind == "eq":
        spec = sample_eq_curve(rng, spectral.bins_total)
        after = apply_eq(hcqt, spec).unit_db
    else:
        spec = sample_geometric(rng, hcqt.n_frames)
        after = apply_geometric(hcqt.unit_db, spec)
    write_sfg(out_dir / "before.sfg", hcqt.unit_db)
    write_sfg(out_dir / "after.sfg", after)
    (out_dir / "transform.log").write_text(spec_to_record(spec) + "\n")
    print(f"applied {spec_to_record(spec)}")
    return 0


def _cmd_synth(args):
    out_dir = Path(args.out)
    specs = []
    if args.specfile:
        for ln, raw in enumerate(Path(args.specfile).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            cells = line.split()
            if len(cells) < 2:
                raise UsageError(f"{args.specfile}:{ln}: expected 'id roles k=v...'")
            track_id, roles = cells[0], tuple(cells[1].split(","))
            kw = {}
            for cell in cells[2:]:
                key, value = cell.split("=", 1)
                kw[key] = _parse_value(key, value)
            specs.append((track_id, roles, SynthSpec(**kw)))
    else:
        pairs = dict(kv.split("=", 1) for kv in args.set or [])
        count = int(pairs.get("count", 10))
        duration = float(pairs.get("duration", 6.0))
        roles = tuple(pairs.get("roles", "train-supervised").split(","))
        base_seed = int(pairs.get("seed", args.seed or 0))
        for i in range(count):
            spec = SynthSpec(
                n_voices=1 + (i % 4), duration=duration, seed=base_seed + i
            )
            specs.append((f"synth_{i:03d}", roles, spec))
    if not specs:
        raise UsageError("nothing to synthesize")

    out_dir.mkdir(parents=True, exist_ok=True)
    spectral = SpectralConfig()
    records = []
    for track_id, roles, spec in specs:
        audio, ann = synth_track(spec, spectral)
        wav = out_dir / f"{track_id}.wav"
        annotation = out_dir / f"{track_id}.f0.tsv"
        write_wav(wav, audio, spectral.sample_rate)
        write_annotation(annotation, ann)
        records.append(
            TrackRecord(id=track_id, audio=wav.name, annotation=annotation.name, roles=roles)
        )
    write_manifest(out_dir / "manifest.tsv", records)
    print(f"wrote {len(records)} tracks + manifest to {out_dir}")
    return 0


def _cmd_plot(args):
    trajectories = {}
    for item in args.density:
        if "=" in item and not Path(item).exists():
            label, path = item.split("=", 1)
        else:
            label, path = Path(item).stem, item
        trajectories[label] = read_density_tsv(path)
    files = emit_curves(trajectories, args.out)
    print("\n".join(files))
    return 0


# ---------------------------------------------------------------------------
# Argument plumbing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _collect_pairs(args):
    pairs = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        pairs.update(parse_config_text(path.read_text().splitlines(), str(path)))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    return pairs


def _add_common(parser):
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("--out", default="run", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the seed")
    parser.add_argument("--workers", type=int, default=1,
                        help="worker count (evaluation parallelism)")


def build_parser():
    parser = _Parser(prog="multipitch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train", "finetune"):
        p = sub.add_parser(name)
        _add_common(p)

    p = sub.add_parser("eval")
    _add_common(p)

    p = sub.add_parser("infer")
    p.add_argument("audio", help="input WAV file")
    _add_common(p)

    p = sub.add_parser("transform")
    p.add_argument("audio", help="input WAV file")
    p.add_argument("--kind", choices=("eq", "geom"), default="geom")
    _add_common(p)

    p = sub.add_parser("synth")
    p.add_argument("specfile", nargs="?", help="synthesis spec manifest")
    _add_common(p)

    p = sub.add_parser("plot")
    p.add_argument("density", nargs="+", help="density TSV files (label=path accepted)")
    _add_common(p)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "finetune":
            return _cmd_train(args, finetune=True)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "infer":
            return _cmd_infer(args)
        if args.command == "transform":
            return _cmd_transform(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "plot":
            return _cmd_plot(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(run())
