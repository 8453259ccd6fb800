"""Simulated transmission media: AWGN, flat Rayleigh and flat Rician fading.

SNR is ``10 * log10(P_signal / sigma2)`` with ``P_signal = 1`` (the codec
normalizes every symbol vector), so ``sigma2`` is the complex noise variance
per symbol and each real component gets ``sigma2 / 2``.

Every call draws from its own generator derived from ``(seed, nonce)``; the
same pair always reproduces the same noise, different pairs give independent
streams.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor

from sijscc.codec import average_power
from sijscc.errors import ConfigurationError, ContractViolation

CHANNEL_KINDS = ("awgn", "rayleigh", "rician")
# tolerated deviation of the per-vector input power from 1
POWER_TOLERANCE = 1e-3


@dataclass(frozen=True)
class ChannelSpec:
    kind: str = "awgn"
    snr_db: float = 10.0
    rician_k: float = 0.0
    seed: int = 0
    # zero-forcing equalization with the true fading coefficient (perfect CSI)
    equalize: bool = True

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ConfigurationError(f"unknown channel kind {self.kind!r}; expected one of {CHANNEL_KINDS}")
        if not math.isfinite(self.snr_db):
            raise ConfigurationError(f"snr_db must be finite, got {self.snr_db}")
        if not self.rician_k >= 0:
            raise ConfigurationError(f"rician_k must be >= 0, got {self.rician_k}")

    def to_dict(self) -> dict:
        return asdict(self)


def snr_to_sigma2(snr_db: float | Tensor) -> float | Tensor:
    """Complex noise variance per symbol for a unit-power signal."""
    if isinstance(snr_db, Tensor):
        return torch.pow(10.0, -snr_db / 10.0)
    return 10.0 ** (-snr_db / 10.0)


def make_generator(*key: int) -> torch.Generator:
    """Torch generator seeded from an integer key, e.g. ``(seed, nonce)``."""
    state = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key]).generate_state(1, np.uint64)[0]
    g = torch.Generator()
    g.manual_seed(int(state))
    return g


def complex_gaussian(shape, generator: torch.Generator, dtype=torch.complex64) -> Tensor:
    """CN(0, 1) samples drawn in float32: real and imaginary parts each N(0, 1/2)."""
    pairs = torch.randn(*shape, 2, generator=generator, dtype=torch.float32) * math.sqrt(0.5)
    return torch.view_as_complex(pairs).to(dtype)


def add_awgn(z: Tensor, sigma2: float | Tensor, generator: torch.Generator) -> Tensor:
    """``z + omega`` with ``omega ~ CN(0, sigma2)``; a tensor ``sigma2`` broadcasts per row."""
    noise = complex_gaussian(z.shape, generator, z.dtype)
    if isinstance(sigma2, Tensor):
        scale = sigma2.to(z.real.dtype).sqrt().reshape(*sigma2.shape, *([1] * (z.dim() - sigma2.dim())))
    else:
        scale = math.sqrt(sigma2)
    return z + noise * scale


def _check_power(z: Tensor) -> None:
    power = average_power(z.detach())
    if bool(((power - 1).abs() > POWER_TOLERANCE).any()):
        raise ContractViolation(f"channel input must have unit average power, got {power.flatten()[:4].tolist()}")


def transmit_awgn(z: Tensor, spec: ChannelSpec, nonce: int = 0) -> Tensor:
    _check_power(z)
    return add_awgn(z, snr_to_sigma2(spec.snr_db), make_generator(spec.seed, nonce))


def fading_coefficients(n: int, spec: ChannelSpec, generator: torch.Generator) -> Tensor:
    """One flat-fading coefficient per symbol vector, ``E|h|^2 = 1``."""
    scatter = complex_gaussian((n,), generator)
    if spec.kind == "rayleigh":
        return scatter
    if spec.kind == "rician":
        k = spec.rician_k
        if math.isinf(k):
            return torch.ones(n, dtype=torch.complex64)
        return math.sqrt(k / (k + 1)) + math.sqrt(1 / (k + 1)) * scatter
    raise ConfigurationError(f"{spec.kind!r} is not a fading channel")


def transmit_fading(z: Tensor, spec: ChannelSpec, nonce: int = 0) -> tuple[Tensor, Tensor]:
    """``zhat = h * z + omega`` with one ``h`` per vector (last dimension).

    Returns ``(zhat, h)``; ``h`` has one entry per vector so the receiver can
    equalize with :func:`equalize`.
    """
    _check_power(z)
    g = make_generator(spec.seed, nonce)
    rows = tuple(z.shape[:-1])
    h = fading_coefficients(int(np.prod(rows, dtype=np.int64)), spec, g).to(z.dtype).reshape(rows)
    zhat = add_awgn(h.unsqueeze(-1) * z, snr_to_sigma2(spec.snr_db), g)
    return zhat, h


def equalize(zhat: Tensor, h: Tensor) -> Tensor:
    """Zero-forcing equalization with known per-vector coefficients."""
    return zhat / h.unsqueeze(-1)


def transmit(z: Tensor, spec: ChannelSpec, nonce: int = 0) -> Tensor:
    """Channel as seen by the decoder (fading is equalized when ``spec.equalize``)."""
    if spec.kind == "awgn":
        return transmit_awgn(z, spec, nonce)
    zhat, h = transmit_fading(z, spec, nonce)
    return equalize(zhat, h) if spec.equalize else zhat


def empirical_snr_db(z: Tensor, zhat: Tensor) -> float:
    """Measured ``10 log10(P_signal / P_noise)`` over all symbols."""
    signal = float(z.abs().pow(2).double().mean())
    noise = float((zhat - z).abs().pow(2).double().mean())
    return 10.0 * math.log10(signal / noise)
