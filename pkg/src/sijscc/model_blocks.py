"""Neural building blocks of the codec: GDN/IGDN, ESA, IRAB and ACmix.

All blocks map ``B x C x H x W`` feature maps to ``B x C_out x H x W`` and keep
the spatial size. They are ordinary :class:`torch.nn.Module` objects so they
can be traced, checkpointed and gradient-checked in float64.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from sijscc.errors import ConfigurationError, DegenerateInputError, ShapeError

# ESA always squeezes features to this many channels before downsampling.
ESA_CHANNELS = 16
# Smallest spatial side the ESA mask path accepts (stride-2 conv + 7/3 max-pool).
ESA_MIN_SIZE = 4

_REPARAM_OFFSET = 2.0**-18
_PEDESTAL = _REPARAM_OFFSET**2


def _check_channels(x: Tensor, expected: int, who: str) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{who}: expected a rank-4 tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ConfigurationError(f"{who}: input has {x.shape[1]} channels, block expects {expected}")


class GDN(nn.Module):
    """Generalized divisive normalization (``inverse=True`` gives IGDN).

    ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j**2)`` per pixel, or the
    product instead of the quotient for IGDN.

    ``beta`` and ``gamma`` are stored as unconstrained reals ``p`` and mapped
    through ``max(p, bound)**2 - pedestal``, which keeps ``beta >= beta_min``
    and ``gamma >= 0`` without projecting after every optimizer step.
    """

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = 1e-6, gamma_init: float = 0.1):
        super().__init__()
        if channels < 1:
            raise ConfigurationError(f"GDN needs at least one channel, got {channels}")
        if beta_min <= 0:
            raise ConfigurationError(f"beta_min must be positive, got {beta_min}")
        self.channels = channels
        self.inverse = inverse
        self.beta_min = float(beta_min)
        self._beta_bound = math.sqrt(self.beta_min + _PEDESTAL)
        self._gamma_bound = _REPARAM_OFFSET
        self.beta = nn.Parameter(torch.sqrt(torch.ones(channels) + _PEDESTAL))
        self.gamma = nn.Parameter(torch.sqrt(gamma_init * torch.eye(channels) + _PEDESTAL))

    @property
    def effective_beta(self) -> Tensor:
        return self.beta.clamp(min=self._beta_bound).pow(2) - _PEDESTAL

    @property
    def effective_gamma(self) -> Tensor:
        return self.gamma.clamp(min=self._gamma_bound).pow(2) - _PEDESTAL

    @torch.no_grad()
    def set_effective(self, beta: Tensor | float, gamma: Tensor | float) -> None:
        """Set the raw parameters so that the effective ``beta``/``gamma`` equal the given values."""
        beta = torch.as_tensor(beta, dtype=self.beta.dtype).expand(self.channels)
        gamma = torch.as_tensor(gamma, dtype=self.gamma.dtype).expand(self.channels, self.channels)
        if (beta < self.beta_min).any() or (gamma < 0).any():
            raise ConfigurationError("GDN requires beta >= beta_min and gamma >= 0")
        self.beta.copy_(torch.sqrt(beta + _PEDESTAL))
        self.gamma.copy_(torch.sqrt(gamma + _PEDESTAL))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "GDN")
        gamma = self.effective_gamma.reshape(self.channels, self.channels, 1, 1)
        norm = F.conv2d(x * x, gamma, self.effective_beta)
        if self.inverse:
            return x * torch.sqrt(norm)
        return x * torch.rsqrt(norm)

    def extra_repr(self) -> str:
        return f"{self.channels}, inverse={self.inverse}, beta_min={self.beta_min}"


class ESA(nn.Module):
    """Enhanced spatial attention: ``x * sigmoid(mask(x))``.

    The mask path squeezes to 16 channels, downsamples with a stride-2 conv and
    a 7x7/3 max-pool, runs one 3x3 conv at the reduced resolution, then
    upsamples bilinearly and restores the channel count.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.reduce = nn.Conv2d(channels, ESA_CHANNELS, 1)
        self.down = nn.Conv2d(ESA_CHANNELS, ESA_CHANNELS, 3, stride=2, padding=1)
        self.body = nn.Conv2d(ESA_CHANNELS, ESA_CHANNELS, 3, padding=1)
        self.restore = nn.Conv2d(ESA_CHANNELS, channels, 1)

    def mask(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "ESA")
        h, w = x.shape[-2:]
        if h < ESA_MIN_SIZE or w < ESA_MIN_SIZE:
            raise DegenerateInputError(f"ESA needs at least {ESA_MIN_SIZE}x{ESA_MIN_SIZE} inputs, got {h}x{w}")
        m = self.down(self.reduce(x))
        m = F.max_pool2d(m, kernel_size=7, stride=3, padding=3)
        m = self.body(m)
        m = F.interpolate(m, size=(h, w), mode="bilinear", align_corners=False)
        return torch.sigmoid(self.restore(m))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.mask(x)


class IRAB(nn.Module):
    """Inverted residual attention bottleneck.

    branch = mix(restore(gelu(expand(gelu(dense3x3(x)))))), weighted by ESA and
    added to the skip path. The skip is the identity when ``in_channels ==
    out_channels`` and a 1x1 projection otherwise.
    """

    def __init__(self, in_channels: int, out_channels: int | None = None, expansion: int = 4):
        super().__init__()
        out_channels = in_channels if out_channels is None else out_channels
        if expansion < 1:
            raise ConfigurationError(f"IRAB expansion must be >= 1, got {expansion}")
        if in_channels < 1 or out_channels < 1:
            raise ConfigurationError("IRAB channel counts must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.expansion = expansion
        hidden = expansion * in_channels
        self.dense = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.expand = nn.Conv2d(in_channels, hidden, 1)
        self.restore = nn.Conv2d(hidden, out_channels, 1)
        self.mix = nn.Conv2d(out_channels, out_channels, 1)
        self.esa = ESA(out_channels)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else None

    def branch(self, x: Tensor) -> Tensor:
        y = F.gelu(self.dense(x))
        y = F.gelu(self.expand(y))
        return self.mix(self.restore(y))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.in_channels, "IRAB")
        residual = x if self.skip is None else self.skip(x)
        return residual + self.esa(self.branch(x))

    def extra_repr(self) -> str:
        return f"{self.in_channels} -> {self.out_channels}, X={self.expansion}"


def _shift_kernels(channels: int, kernel: int) -> Tensor:
    # one-hot k x k kernels, one per shift direction, repeated for every channel
    k2 = kernel * kernel
    weight = torch.zeros(k2, kernel, kernel)
    for i in range(k2):
        weight[i, i // kernel, i % kernel] = 1.0
    return weight.unsqueeze(0).repeat(channels, 1, 1, 1)


class ACmix(nn.Module):
    """Convolution / self-attention hybrid sharing one set of 1x1 projections.

    Output is ``alpha * F_att(x) + beta * F_conv(x)``:

    * ``F_att``: global multi-head scaled dot-product attention over all
      ``H*W`` positions, heads concatenated and projected by ``proj_out``.
    * ``F_conv``: the stacked q/k/v maps of every head are mixed by
      ``conv_fc`` into ``kernel**2`` maps per channel, which a depthwise conv
      with fixed one-hot kernels shifts and sums (the shift-and-aggregate form
      of a ``kernel x kernel`` convolution).
    """

    # query rows per chunk in the attention product; bounds peak memory on large maps
    query_chunk = 4096

    def __init__(self, channels: int, heads: int = 4, kernel: int = 3):
        super().__init__()
        if heads < 1 or channels % heads:
            raise ConfigurationError(f"ACmix: {channels} channels not divisible into {heads} heads")
        if kernel < 1 or kernel % 2 == 0:
            raise ConfigurationError(f"ACmix kernel must be odd and positive, got {kernel}")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.kernel = kernel
        self.proj_q = nn.Conv2d(channels, channels, 1)
        self.proj_k = nn.Conv2d(channels, channels, 1)
        self.proj_v = nn.Conv2d(channels, channels, 1)
        self.proj_out = nn.Conv2d(channels, channels, 1)
        self.conv_fc = nn.Conv2d(3 * heads, kernel * kernel * heads, 1, bias=False)
        self.register_buffer("shift_weight", _shift_kernels(channels, kernel), persistent=False)
        self.alpha = nn.Parameter(torch.tensor(1.0))
        self.beta = nn.Parameter(torch.tensor(1.0))

    def _project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        _check_channels(x, self.channels, "ACmix")
        return self.proj_q(x), self.proj_k(x), self.proj_v(x)

    def _heads(self, t: Tensor) -> Tensor:
        b, _, h, w = t.shape
        return t.reshape(b, self.heads, self.head_dim, h * w)

    def attention_weights(self, x: Tensor) -> Tensor:
        """Softmax attention matrix of shape ``B x heads x HW x HW`` (rows are queries)."""
        q, k, _ = self._project(x)
        q, k = self._heads(q), self._heads(k)
        scores = q.transpose(-2, -1) @ k / math.sqrt(self.head_dim)
        return scores.softmax(dim=-1)

    def attention_path(self, x: Tensor) -> Tensor:
        q, k, v = self._project(x)
        return self._attend(q, k, v)

    def conv_path(self, x: Tensor) -> Tensor:
        q, k, v = self._project(x)
        return self._convolve(q, k, v)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        b, c, h, w = q.shape
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        qt = q.transpose(-2, -1) / math.sqrt(self.head_dim)
        chunks = []
        for start in range(0, h * w, self.query_chunk):
            attn = (qt[:, :, start : start + self.query_chunk] @ k).softmax(dim=-1)
            chunks.append(attn @ v.transpose(-2, -1))
        out = torch.cat(chunks, dim=2).transpose(-2, -1).reshape(b, c, h, w)
        return self.proj_out(out)

    def _convolve(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        b, c, h, w = q.shape
        stacked = torch.cat([self._heads(q), self._heads(k), self._heads(v)], dim=1)
        maps = self.conv_fc(stacked)  # B x (k^2 * heads) x head_dim x HW
        k2 = self.kernel * self.kernel
        maps = maps.reshape(b, k2, self.heads, self.head_dim, h, w)
        maps = maps.permute(0, 2, 3, 1, 4, 5).reshape(b, c * k2, h, w)
        return F.conv2d(maps, self.shift_weight.to(maps.dtype), padding=self.kernel // 2, groups=c)

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = self._project(x)
        return self.alpha * self._attend(q, k, v) + self.beta * self._convolve(q, k, v)

    def extra_repr(self) -> str:
        return f"{self.channels}, heads={self.heads}, kernel={self.kernel}"
