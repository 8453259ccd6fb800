"""Encoder / decoder assembly and the real <-> complex channel interface.

Symbol layout: a ``B x T x H/4 x W/4`` encoder output is flattened per image in
C-order (channel, row, column) and consecutive real pairs become
``real + 1j * imag``. ``complex_to_real`` undoes this exactly.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import torch
from torch import Tensor, nn

from sijscc.model_blocks import ESA_CHANNELS, GDN, IRAB, ACmix
from sijscc.errors import CheckpointError, ConfigurationError, ContractViolation, DegenerateInputError, ShapeError

CONDITIONING_MODES = ("none", "decoder_only", "both")
# positions (1-based) of the IRABs on each side that an AF module follows
AF_AFTER_IRAB = (2, 4)


@dataclass(frozen=True)
class ModelConfig:
    N: int = 192
    T: int = 16
    encoder_expansions: tuple[int, ...] = (2, 4, 4, 4, 4)
    heads: int = 4
    acmix_kernel: int = 3
    input_channels: int = 3
    af_reduction: int = 16

    def __post_init__(self):
        object.__setattr__(self, "encoder_expansions", tuple(int(x) for x in self.encoder_expansions))
        self.validate()

    def validate(self) -> None:
        if self.N < ESA_CHANNELS:
            raise ConfigurationError(f"N must be >= {ESA_CHANNELS}, got {self.N}")
        if self.T < 1 or self.input_channels < 1:
            raise ConfigurationError("T and input_channels must be positive")
        if len(self.encoder_expansions) < 2:
            raise ConfigurationError("need at least two IRAB blocks (one per resolution)")
        if any(x < 1 for x in self.encoder_expansions):
            raise ConfigurationError(f"expansion factors must be >= 1: {self.encoder_expansions}")
        if self.heads < 1 or self.T % self.heads:
            raise ConfigurationError(f"T={self.T} is not divisible by heads={self.heads}")
        if self.acmix_kernel < 1 or self.acmix_kernel % 2 == 0:
            raise ConfigurationError(f"acmix_kernel must be odd, got {self.acmix_kernel}")
        if self.af_reduction < 1:
            raise ConfigurationError("af_reduction must be positive")

    @property
    def ratio(self) -> float:
        """Bandwidth compression ratio k/n."""
        return self.T / (32 * self.input_channels)

    def num_symbols(self, height: int, width: int) -> int:
        check_divisible(height, width)
        return height * width * self.T // 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_expansions"] = list(self.encoder_expansions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def check_divisible(height: int, width: int) -> None:
    if height % 4 or width % 4 or height < 4 or width < 4:
        raise ShapeError(f"image size {height}x{width} is not a positive multiple of 4 per side")


def real_to_complex(f: Tensor) -> Tensor:
    """Pair consecutive reals into complex symbols.

    A 1-D tensor is paired as a whole; higher-rank tensors are flattened per
    leading (batch) index and return ``B x k``.
    """
    flat = f.reshape(-1) if f.dim() == 1 else f.reshape(f.shape[0], -1)
    if flat.shape[-1] % 2:
        raise ShapeError(f"cannot pair an odd number of reals ({flat.shape[-1]})")
    return torch.view_as_complex(flat.reshape(*flat.shape[:-1], -1, 2).contiguous())


def complex_to_real(z: Tensor, shape: Sequence[int] | None = None) -> Tensor:
    flat = torch.view_as_real(z).reshape(*z.shape[:-1], -1)
    return flat if shape is None else flat.reshape(shape)


def average_power(z: Tensor) -> Tensor:
    """Mean squared magnitude over the last dimension."""
    return z.abs().pow(2).mean(dim=-1)


def power_normalize(z: Tensor) -> Tensor:
    """Scale every symbol vector (last dimension) to unit average power.

    Computed in double precision, so normalizing an already unit-power
    complex64 vector returns it unchanged to within float32 rounding.
    """
    wide = z.to(torch.complex128) if z.dtype == torch.complex64 else z
    power = average_power(wide)
    if bool((power <= 0).any()):
        raise DegenerateInputError("cannot normalize an all-zero symbol vector")
    return (wide / power.sqrt().unsqueeze(-1)).to(z.dtype)


class _Path(nn.Sequential):
    """Sequential stack that hands the channel SNR to SNR-aware layers."""

    def forward(self, x: Tensor, snr_db: Tensor | None = None) -> Tensor:
        for layer in self:
            if getattr(layer, "snr_aware", False):
                if snr_db is None:
                    raise ContractViolation("SNR-conditioned model called without snr_db")
                x = layer(x, snr_db)
            else:
                x = layer(x)
        return x


class SIJSCC(nn.Module):
    """Encoder f, decoder g and the glue between them and the channel.

    Encoder: conv3x3/2 -> GDN -> IRAB(X0) -> conv3x3/2 -> GDN -> IRAB(X1..)
    -> IRAB(X_last, N->T) -> ACmix(T). The decoder mirrors it with IGDN and
    transposed convs and ends in a 1x1 projection to the image channels.
    """

    def __init__(self, config: ModelConfig, conditioning: str = "none"):
        super().__init__()
        if conditioning not in CONDITIONING_MODES:
            raise ConfigurationError(f"unknown conditioning mode {conditioning!r}; expected one of {CONDITIONING_MODES}")
        self.config = config
        self.conditioning = conditioning
        n, t, c, xs = config.N, config.T, config.input_channels, config.encoder_expansions

        enc: list[tuple[str, nn.Module]] = [
            ("conv1", nn.Conv2d(c, n, 3, stride=2, padding=1)),
            ("gdn1", GDN(n)),
            ("irab1", IRAB(n, n, xs[0])),
            ("conv2", nn.Conv2d(n, n, 3, stride=2, padding=1)),
            ("gdn2", GDN(n)),
        ]
        for i, x in enumerate(xs[1:], start=2):
            enc.append((f"irab{i}", IRAB(n, t if i == len(xs) else n, x)))
        enc.append(("acmix", ACmix(t, config.heads, config.acmix_kernel)))

        dec: list[tuple[str, nn.Module]] = [("acmix", ACmix(t, config.heads, config.acmix_kernel))]
        rev = xs[::-1]
        for i, x in enumerate(rev[:-1], start=1):
            dec.append((f"irab{i}", IRAB(t if i == 1 else n, n, x)))
        dec += [
            ("igdn1", GDN(n, inverse=True)),
            ("deconv1", nn.ConvTranspose2d(n, n, 3, stride=2, padding=1, output_padding=1)),
            (f"irab{len(xs)}", IRAB(n, n, rev[-1])),
            ("igdn2", GDN(n, inverse=True)),
            ("deconv2", nn.ConvTranspose2d(n, n, 3, stride=2, padding=1, output_padding=1)),
            ("head", nn.Conv2d(n, c, 1)),
        ]

        # AF modules are created after every base layer so the base weights of a
        # conditioned model match the unconditioned one for the same seed.
        if conditioning == "both":
            enc = _insert_af(enc, n, config.af_reduction)
        if conditioning in ("both", "decoder_only"):
            dec = _insert_af(dec, n, config.af_reduction)
        self.encoder = _Path(OrderedDict(enc))
        self.decoder = _Path(OrderedDict(dec))

    # -- channel-facing API -------------------------------------------------

    def _check_image(self, x: Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected B x {self.config.input_channels} x H x W images, got {tuple(x.shape)}")
        check_divisible(x.shape[-2], x.shape[-1])

    def encode_features(self, x: Tensor, snr_db: Tensor | None = None) -> Tensor:
        self._check_image(x)
        return self.encoder(x, snr_db)

    def encode(self, x: Tensor, snr_db: Tensor | None = None) -> Tensor:
        """Map ``B x c x H x W`` images in [0, 1] to ``B x k`` unit-power complex symbols."""
        self._check_image(x)
        if bool((x < 0).any() or (x > 1).any()):
            raise ContractViolation("pixel values must lie in [0, 1]")
        return power_normalize(real_to_complex(self.encoder(x, snr_db)))

    def feature_shape(self, height: int, width: int) -> tuple[int, int, int]:
        check_divisible(height, width)
        return self.config.T, height // 4, width // 4

    def decode_raw(self, zhat: Tensor, height: int, width: int, snr_db: Tensor | None = None) -> Tensor:
        """Unclamped reconstruction; used by the training loss."""
        shape = self.feature_shape(height, width)
        if zhat.dim() == 1:
            zhat = zhat.unsqueeze(0)
        k = self.config.num_symbols(height, width)
        if zhat.shape[-1] != k:
            raise ShapeError(f"{zhat.shape[-1]} symbols received, {height}x{width} needs k={k}")
        f = complex_to_real(zhat, (zhat.shape[0], *shape))
        return self.decoder(f, snr_db)

    def decode(self, zhat: Tensor, height: int, width: int, snr_db: Tensor | None = None) -> Tensor:
        return self.decode_raw(zhat, height, width, snr_db).clamp(0.0, 1.0)

    def forward(
        self,
        x: Tensor,
        channel: Callable[[Tensor], Tensor] | None = None,
        snr_db: Tensor | None = None,
    ) -> Tensor:
        """Unclamped end-to-end pass; ``channel=None`` is the noiseless autoencoder."""
        f = self.encode_features(x, snr_db)
        z = power_normalize(real_to_complex(f))
        zhat = z if channel is None else channel(z)
        return self.decoder(complex_to_real(zhat, f.shape), snr_db)

    def iter_blocks(self) -> Iterator[tuple[str, nn.Module]]:
        for side in ("encoder", "decoder"):
            for name, layer in getattr(self, side).named_children():
                yield f"{side}.{name}", layer


def _insert_af(layers: list[tuple[str, nn.Module]], channels: int, reduction: int) -> list[tuple[str, nn.Module]]:
    from sijscc.snr_conditioning import AFModule

    out, seen = [], 0
    for name, layer in layers:
        out.append((name, layer))
        if isinstance(layer, IRAB):
            seen += 1
            if seen in AF_AFTER_IRAB:
                out.append((f"af{seen}", AFModule(channels, reduction)))
    return out


def build_model(config: ModelConfig, seed: int = 0, conditioning: str = "none") -> SIJSCC:
    """Deterministically initialized model; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SIJSCC(config, conditioning)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# -- symbol files -------------------------------------------------------------

SYMBOL_MAGIC = b"SJSC"
SYMBOL_VERSION = 1
_HEADER = struct.Struct("<4sHQHIIf")


@dataclass
class SymbolFrame:
    """One transmitted image: ``k`` complex symbols plus what the receiver needs to decode."""

    symbols: Tensor
    T: int
    height: int
    width: int
    snr_db: float = math.nan
    extra: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return int(self.symbols.numel())

    @property
    def power(self) -> float:
        return float(average_power(self.symbols.reshape(-1)))


def write_symbols(path: str | Path, frame: SymbolFrame) -> None:
    z = frame.symbols.detach().reshape(-1).to(torch.complex64)
    header = _HEADER.pack(SYMBOL_MAGIC, SYMBOL_VERSION, z.numel(), frame.T, frame.height, frame.width, frame.snr_db)
    payload = torch.view_as_real(z).numpy().astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_symbols(path: str | Path) -> SymbolFrame:
    import numpy as np

    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated symbol file")
    magic, version, k, t, h, w, snr = _HEADER.unpack_from(raw)
    if magic != SYMBOL_MAGIC:
        raise CheckpointError(f"{path}: not a symbol file (magic {magic!r})")
    if version != SYMBOL_VERSION:
        raise CheckpointError(f"{path}: unsupported symbol file version {version}")
    body = raw[_HEADER.size :]
    if len(body) != 8 * k:
        raise CheckpointError(f"{path}: expected {k} symbols, found {len(body) // 8}")
    pairs = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(k, 2)
    z = torch.view_as_complex(torch.from_numpy(pairs.copy()))
    return SymbolFrame(z, t, h, w, float(snr))
