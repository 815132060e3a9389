"""Fully convolutional 2-D encoder-decoder mapping HCQT stacks to salience.

The network is stride-1 along time (fully convolutional, so any frame count
works) and resamples only the frequency axis.  Normalization acts per
position over channels, which keeps the model exactly translation-covariant
along both axes away from boundary padding.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .spectral import HcqtTensor, SalienceGram

__all__ = [
    "ModelConfig",
    "SalienceModel",
    "build",
    "forward",
    "backward",
    "save_checkpoint",
    "load_checkpoint",
]

MPCK_MAGIC = b"MPCK"
MPCK_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``freq_stride`` is one int applied to every block, a per-block tuple, or
    None to derive the deepest stride-2 schedule whose product divides
    ``bins_total`` (trailing blocks fall back to stride 1).  The product
    must divide ``bins_total`` so the decoder mirrors the encoder exactly.
    """

    n_blocks: int = 4
    base_filters: int = 8
    dilation_schedule: tuple = (1, 2)
    freq_stride: object = None
    layernorm_enabled: bool = True
    in_channels: int = 6
    bins_total: int = 440
    seed: int = 0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        object.__setattr__(self, "dilation_schedule", tuple(int(d) for d in self.dilation_schedule))
        strides = self.freq_stride
        if strides is None:
            strides = [2] * self.n_blocks
            for i in reversed(range(self.n_blocks)):
                if self.bins_total % int(np.prod(strides)) == 0:
                    break
                strides[i] = 1
            strides = tuple(strides)
        elif isinstance(strides, (int, np.integer)):
            strides = (int(strides),) * self.n_blocks
        else:
            strides = tuple(int(s) for s in strides)
        if len(strides) != self.n_blocks:
            raise ValueError("freq_stride tuple must have one entry per block")
        object.__setattr__(self, "freq_stride", strides)
        prod = int(np.prod(strides))
        if self.bins_total % prod != 0:
            raise ValueError(
                f"bins_total={self.bins_total} not divisible by stride product {prod}"
            )

    @classmethod
    def paper(cls, **overrides):
        """Four blocks at doubled filter widths on the full 440-bin grid."""
        kwargs = dict(n_blocks=4, base_filters=16, freq_stride=(2, 2, 2, 1))
        kwargs.update(overrides)
        return cls(**kwargs)


class ChannelNorm(nn.Module):
    """Layer normalization per frame over the channel and bin axes.

    Statistics never pool across time, so the network stays exactly
    translation-covariant along the frame axis; gains and offsets are
    per channel.
    """

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mu = x.mean(dim=(1, 2), keepdim=True)
        var = x.var(dim=(1, 2), keepdim=True, unbiased=False)
        xhat = (x - mu) / torch.sqrt(var + self.eps)
        return xhat * self.weight[:, None, None] + self.bias[:, None, None]


def _norm(channels, enabled):
    return ChannelNorm(channels) if enabled else nn.Identity()


class ResidualConvs(nn.Module):
    """Stack of time-dilated 3x3 convolutions with residual connections.

    Smooth activations keep the whole network C-infinity, so parameter
    gradients are verifiable against central finite differences.
    """

    def __init__(self, channels, dilations):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=(1, d), dilation=(1, d))
            for d in dilations
        )

    def forward(self, x):
        for conv in self.convs:
            x = x + torch.nn.functional.silu(conv(x))
        return x


class SalienceModel(nn.Module):
    """Encoder-decoder predicting a (K, N) salience grid from (C, K, N) input."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        base = config.base_filters
        dil = config.dilation_schedule
        ln = config.layernorm_enabled

        self.enc_initial = nn.Conv2d(config.in_channels, base, 3, padding=1)
        self.enc_initial_norm = _norm(base, ln)
        enc_blocks = []
        for b, stride in enumerate(config.freq_stride):
            c = base * 2**b
            enc_blocks.append(
                nn.ModuleDict(
                    {
                        "res": ResidualConvs(c, dil),
                        "down": nn.Conv2d(c, 2 * c, 3, stride=(stride, 1), padding=1),
                        "norm": _norm(2 * c, ln),
                    }
                )
            )
        self.enc_blocks = nn.ModuleList(enc_blocks)

        top = base * 2**config.n_blocks
        self.latent = nn.Conv2d(top, top, 3, padding=1)
        self.latent_norm = _norm(top, ln)

        self.dec_initial = nn.Conv2d(top, top, 3, padding=1)
        self.dec_initial_norm = _norm(top, ln)
        dec_blocks = []
        for b in reversed(range(config.n_blocks)):
            stride = config.freq_stride[b]
            c = base * 2**b
            dec_blocks.append(
                nn.ModuleDict(
                    {
                        "up": nn.ConvTranspose2d(
                            2 * c, c, 3, stride=(stride, 1), padding=1,
                            output_padding=(stride - 1, 0),
                        ),
                        "norm": _norm(c, ln),
                        "res": ResidualConvs(c, dil),
                    }
                )
            )
        self.dec_blocks = nn.ModuleList(dec_blocks)
        self.head = nn.Conv2d(base, 1, 3, padding=1)

        self._init_parameters()

    def _init_parameters(self):
        gen = torch.Generator().manual_seed(self.config.seed)
        for name, p in self.named_parameters():
            if p.dim() >= 2:  # conv / transposed-conv kernels
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                if isinstance(self.get_submodule(name.rsplit(".", 1)[0]), nn.ConvTranspose2d):
                    fan_in = p.shape[0] * p.shape[2] * p.shape[3]
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=gen) / fan_in**0.5)
            elif name.endswith("weight"):  # norm gains
                with torch.no_grad():
                    p.fill_(1.0)
            else:
                with torch.no_grad():
                    p.zero_()

    def forward(self, x):
        """(B, C, K, N) or (C, K, N) tensor -> (B, K, N) or (K, N) salience."""
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        if x.shape[-2] != self.config.bins_total:
            raise ValueError(
                f"input has {x.shape[-2]} bins, model expects {self.config.bins_total}"
            )
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"input has {x.shape[1]} channels, model expects {self.config.in_channels}"
            )
        h = self.enc_initial_norm(self.enc_initial(x))
        for block in self.enc_blocks:
            h = block["res"](h)
            h = block["norm"](block["down"](h))
        h = self.latent_norm(self.latent(h))
        h = self.dec_initial_norm(self.dec_initial(h))
        for block in self.dec_blocks:
            h = block["norm"](block["up"](h))
            h = block["res"](h)
        out = torch.sigmoid(self.head(h))[:, 0]
        return out[0] if squeeze else out

    def predict(self, hcqt: HcqtTensor) -> SalienceGram:
        """Inference on an HCQT stack, returning a numpy salience grid."""
        dtype = next(self.parameters()).dtype
        x = torch.from_numpy(np.ascontiguousarray(hcqt.unit_db)).to(dtype)
        with torch.no_grad():
            out = self.forward(x)
        return SalienceGram(
            values=out.numpy().astype(np.float32), frame_times=hcqt.frame_times.copy()
        )

    # -- parameter bookkeeping -------------------------------------------

    def encoder_parameters(self):
        """Initial conv, encoder blocks, and the latent stage."""
        mods = [self.enc_initial, self.enc_initial_norm, self.enc_blocks,
                self.latent, self.latent_norm]
        for m in mods:
            yield from m.parameters()

    def decoder_parameters(self):
        mods = [self.dec_initial, self.dec_initial_norm, self.dec_blocks, self.head]
        for m in mods:
            yield from m.parameters()

    @property
    def receptive_radius_frames(self):
        """Half-width (in frames) of the output's dependence on the input."""
        per_block = sum(self.config.dilation_schedule) + 1
        return 2 + 2 * self.config.n_blocks * per_block + 2

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


def build(config: ModelConfig) -> SalienceModel:
    """Construct a model with seed-deterministic fan-in-scaled initialization."""
    return SalienceModel(config)


def forward(model: SalienceModel, hcqt: HcqtTensor) -> SalienceGram:
    return model.predict(hcqt)


def backward(model: SalienceModel, loss):
    """Reverse-mode gradients of a scalar loss for every model parameter.

    A loss that is constant with respect to the parameters (detached, or
    never touched them) yields all-zero gradients.  Raises if no forward
    pass produced a loss tensor at all.
    """
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise ValueError("no forward result: loss must be a scalar tensor")
    params = dict(model.named_parameters())
    if loss.grad_fn is None:
        return {name: torch.zeros_like(p) for name, p in params.items()}
    grads = torch.autograd.grad(
        loss, list(params.values()), retain_graph=True, allow_unused=True
    )
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }


# ---------------------------------------------------------------------------
# Checkpoint container (bitwise save/load round trip)
# ---------------------------------------------------------------------------

def _write_mpck(fh, model):
    cfg_bytes = json.dumps(asdict(model.config)).encode()
    fh.write(MPCK_MAGIC)
    fh.write(struct.pack("<I", MPCK_VERSION))
    fh.write(struct.pack("<I", len(cfg_bytes)))
    fh.write(cfg_bytes)
    state = model.state_dict()
    fh.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        data = tensor.detach().to(torch.float32).contiguous().numpy()
        name_b = name.encode()
        fh.write(struct.pack("<I", len(name_b)))
        fh.write(name_b)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(data.astype("<f4").tobytes())


def save_checkpoint(model: SalienceModel, path):
    """Write the model (config + float32 parameters) to a path or file object."""
    if hasattr(path, "write"):
        _write_mpck(path, model)
        return
    with open(path, "wb") as fh:
        _write_mpck(fh, model)


def _read_mpck(fh):
    magic = fh.read(4)
    if magic != MPCK_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != MPCK_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", fh.read(4))
    cfg = json.loads(fh.read(cfg_len).decode())
    cfg["dilation_schedule"] = tuple(cfg["dilation_schedule"])
    if isinstance(cfg["freq_stride"], list):
        cfg["freq_stride"] = tuple(cfg["freq_stride"])
    model = SalienceModel(ModelConfig(**cfg))
    (n_params,) = struct.unpack("<I", fh.read(4))
    state = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<I", fh.read(4))
        name = fh.read(name_len).decode()
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(data.copy())
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
    model.load_state_dict(state)
    return model


def load_checkpoint(path) -> SalienceModel:
    """Rebuild a model from a path or file object; bitwise round trip."""
    if hasattr(path, "read"):
        return _read_mpck(path)
    with open(path, "rb") as fh:
        return _read_mpck(fh)
