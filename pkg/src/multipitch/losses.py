"""Training objectives: supervised BCE plus the self-supervised terms.

All terms share the same normalization (element sum divided by the frame
count) so they operate on comparable numerical scales and can be summed
with unit weights.  Functions accept numpy arrays or torch tensors and
return 0-dim torch tensors so they can sit inside an autograd graph.
"""

from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .spectral import HcqtTensor, SalienceGram
from .transforms import EqCurveSpec, GeometricSpec, PercussionMixSpec, apply_eq, apply_geometric

__all__ = [
    "LossRegime",
    "LossReport",
    "bce_grid",
    "supervised_loss",
    "invariance_loss",
    "equivariance_loss",
    "energy_loss",
    "sparsity_loss",
    "total_loss",
]

BCE_EPS = 1e-7

TERM_NAMES = (
    "supervised",
    "invariance_timbre",
    "invariance_percussion",
    "equivariance_geometric",
    "energy",
    "sparsity",
)


@dataclass(frozen=True)
class LossRegime:
    """Which objectives participate in a training run.

    ``energy_sparsity`` couples the energy-target and sparsity terms; they
    only ever apply to samples without ground truth.  With
    ``symmetric_gradients`` the prediction on the untransformed input is
    not treated as a constant target (ablation flag; default keeps the
    stop-gradient).
    """

    supervised: bool = True
    invariance_timbre: bool = False
    invariance_percussion: bool = False
    equivariance_geometric: bool = False
    energy_sparsity: bool = False
    symmetric_gradients: bool = False

    @classmethod
    def supervised_only(cls):
        return cls()

    @classmethod
    def reference(cls, **overrides):
        """Supervised plus all invariance/equivariance objectives."""
        kwargs = dict(
            supervised=True,
            invariance_timbre=True,
            invariance_percussion=True,
            equivariance_geometric=True,
        )
        kwargs.update(overrides)
        return cls(**kwargs)

    @classmethod
    def reference_with_energy(cls, **overrides):
        return cls.reference(energy_sparsity=True, **overrides)

    @classmethod
    def from_name(cls, name):
        presets = {
            "supervised": cls.supervised_only(),
            "ref": cls.reference(),
            "total": cls.reference(),
            "total_eg": cls.reference_with_energy(),
        }
        if name not in presets:
            raise ValueError(f"unknown regime {name!r}; choose from {sorted(presets)}")
        return presets[name]

    @classmethod
    def from_string(cls, text):
        """Parse a preset name or a '+'-joined list of flag names."""
        text = text.strip()
        try:
            return cls.from_name(text)
        except ValueError:
            pass
        flags = {}
        for token in text.split("+"):
            token = token.strip()
            if token not in {f.name for f in fields(cls)}:
                raise ValueError(f"unknown regime flag {token!r}")
            flags[token] = True
        if "supervised" not in flags:
            flags["supervised"] = False
        return cls(**flags)

    def to_string(self):
        enabled = [f.name for f in fields(self) if getattr(self, f.name)]
        return "+".join(enabled) if enabled else "none"


@dataclass
class LossReport:
    """Per-term batch averages plus the number of samples behind each term."""

    supervised: float = 0.0
    invariance_timbre: float = 0.0
    invariance_percussion: float = 0.0
    equivariance_geometric: float = 0.0
    energy: float = 0.0
    sparsity: float = 0.0
    total: float = 0.0
    counts: dict = field(default_factory=dict)
    total_tensor: object = None  # live graph node when produced by total_loss

    def enabled_rows(self):
        """(term, value) pairs for every term that saw at least one sample."""
        rows = [(t, getattr(self, t)) for t in TERM_NAMES if self.counts.get(t)]
        rows.append(("total", self.total))
        return rows


def _as_tensor(grid):
    if isinstance(grid, SalienceGram):
        grid = grid.values
    if isinstance(grid, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(grid))
    return grid


def bce_grid(pred, target, eps=BCE_EPS):
    """Binary cross-entropy summed over bins, averaged over frames.

    The prediction is clamped to [eps, 1 - eps] so the result stays finite
    at saturation.  Note the normalization: element sum divided by the
    frame count only.
    """
    p = _as_tensor(pred)
    t = _as_tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    if t.dtype != p.dtype:
        t = t.to(p.dtype)
    n_frames = p.shape[-1]
    p = p.clamp(eps, 1.0 - eps)
    cell = -t * torch.log(p) - (1.0 - t) * torch.log1p(-p)
    return cell.sum() / n_frames


def supervised_loss(pred, blurred_target):
    """BCE against the blurred ground-truth salience grid."""
    if blurred_target is None:
        raise ValueError("supervised loss requires a target")
    return bce_grid(pred, blurred_target)


def _model_input(hcqt: HcqtTensor, dtype):
    return torch.from_numpy(np.ascontiguousarray(hcqt.unit_db)).to(dtype)


def invariance_loss(model, x: HcqtTensor, t_iv, x_transformed=None, y_hat=None,
                    symmetric=False):
    """Prediction on a pitch-invariant transform vs the clean prediction.

    ``t_iv`` is an EQ-curve spec (applied to the grid here) or a percussion
    mix spec, in which case ``x_transformed`` must carry the HCQT computed
    from the mixed waveform.  The clean prediction acts as a constant
    target unless ``symmetric``.
    """
    dtype = next(model.parameters()).dtype
    if y_hat is None:
        y_hat = model(_model_input(x, dtype))
    if isinstance(t_iv, EqCurveSpec):
        x_t = apply_eq(x, t_iv)
    elif isinstance(t_iv, PercussionMixSpec):
        if x_transformed is None:
            raise ValueError("percussion invariance requires the mixed-waveform HCQT")
        x_t = x_transformed
    else:
        raise TypeError(f"unsupported invariance transform {type(t_iv).__name__}")
    pred_t = model(_model_input(x_t, dtype))
    target = y_hat if symmetric else y_hat.detach()
    return bce_grid(pred_t, target)


def equivariance_loss(model, x: HcqtTensor, t_ev: GeometricSpec, y_hat=None,
                      symmetric=False):
    """Prediction on a transformed input vs the identically transformed prediction."""
    dtype = next(model.parameters()).dtype
    if y_hat is None:
        y_hat = model(_model_input(x, dtype))
    x_t = apply_geometric(x.unit_db, t_ev)
    pred_t = model(torch.from_numpy(np.ascontiguousarray(x_t)).to(dtype))
    target = y_hat if symmetric else y_hat.detach()
    target = apply_geometric(target, t_ev)
    return bce_grid(pred_t, target)


def energy_loss(pred, energy_target):
    """BCE against the harmonic-weighted energy pseudo-target."""
    return bce_grid(pred, energy_target)


def sparsity_loss(pred):
    """Mean-per-frame L1 mass of the prediction."""
    p = _as_tensor(pred)
    return p.abs().sum() / p.shape[-1]


# ---------------------------------------------------------------------------
# Batch-level reduction
# ---------------------------------------------------------------------------

def _stack_forward(model, tensors):
    """Forward a list of equally-shaped (C, K, N) tensors as one batch."""
    if not tensors:
        return []
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) == 1:
        out = model(torch.stack(tensors))
        return list(out)
    return [model(t) for t in tensors]


def total_loss(batch, model, regime: LossRegime) -> LossReport:
    """Evaluate every enabled objective over one batch.

    The supervised term averages over supervised samples only; invariance
    and equivariance terms average over all samples; the energy/sparsity
    pair averages over samples without ground truth.  The returned report
    carries float values plus the live total in ``total_tensor``.
    """
    samples = list(batch.samples)
    if not samples:
        raise ValueError("empty batch")
    dtype = next(model.parameters()).dtype
    sup = [s for s in samples if s.role == "supervised"]
    ssl = [s for s in samples if s.role != "supervised"]
    if regime.supervised and not sup:
        raise ValueError("regime enables the supervised loss but batch has no supervised samples")

    inputs = [_model_input(s.hcqt, dtype) for s in samples]
    y_hat = _stack_forward(model, inputs)

    report = LossReport()
    terms = []

    if regime.supervised:
        vals = [
            supervised_loss(y, s.target)
            for s, y in zip(samples, y_hat)
            if s.role == "supervised"
        ]
        term = torch.stack(vals).mean()
        report.supervised = term.item()
        report.counts["supervised"] = len(vals)
        terms.append(term)

    if regime.invariance_timbre:
        transformed = []
        for s in samples:
            if s.eq_spec is None:
                raise ValueError(f"sample {s.sample_id} missing an EQ spec")
            transformed.append(_model_input(apply_eq(s.hcqt, s.eq_spec), dtype))
        preds = _stack_forward(model, transformed)
        vals = [
            bce_grid(p, y if regime.symmetric_gradients else y.detach())
            for p, y in zip(preds, y_hat)
        ]
        term = torch.stack(vals).mean()
        report.invariance_timbre = term.item()
        report.counts["invariance_timbre"] = len(vals)
        terms.append(term)

    if regime.invariance_percussion:
        transformed = []
        for s in samples:
            if s.perc_hcqt is None:
                raise ValueError(f"sample {s.sample_id} missing a percussion-mixed HCQT")
            transformed.append(_model_input(s.perc_hcqt, dtype))
        preds = _stack_forward(model, transformed)
        vals = [
            bce_grid(p, y if regime.symmetric_gradients else y.detach())
            for p, y in zip(preds, y_hat)
        ]
        term = torch.stack(vals).mean()
        report.invariance_percussion = term.item()
        report.counts["invariance_percussion"] = len(vals)
        terms.append(term)

    if regime.equivariance_geometric:
        transformed, targets = [], []
        for s, y in zip(samples, y_hat):
            if s.geo_spec is None:
                raise ValueError(f"sample {s.sample_id} missing a geometric spec")
            x_t = apply_geometric(s.hcqt.unit_db, s.geo_spec)
            transformed.append(torch.from_numpy(np.ascontiguousarray(x_t)).to(dtype))
            base = y if regime.symmetric_gradients else y.detach()
            targets.append(apply_geometric(base, s.geo_spec))
        preds = _stack_forward(model, transformed)
        vals = [bce_grid(p, t) for p, t in zip(preds, targets)]
        term = torch.stack(vals).mean()
        report.equivariance_geometric = term.item()
        report.counts["equivariance_geometric"] = len(vals)
        terms.append(term)

    if regime.energy_sparsity and ssl:
        e_vals, s_vals = [], []
        for s, y in zip(samples, y_hat):
            if s.role == "supervised":
                continue
            if s.energy_target is None:
                raise ValueError(f"sample {s.sample_id} missing an energy target")
            e_vals.append(energy_loss(y, s.energy_target))
            s_vals.append(sparsity_loss(y))
        e_term = torch.stack(e_vals).mean()
        s_term = torch.stack(s_vals).mean()
        report.energy = e_term.item()
        report.sparsity = s_term.item()
        report.counts["energy"] = len(e_vals)
        report.counts["sparsity"] = len(s_vals)
        terms.extend([e_term, s_term])

    total = terms[0] if len(terms) == 1 else torch.stack(terms).sum()
    report.total = total.item()
    report.total_tensor = total
    return report
