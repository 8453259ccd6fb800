"""Parameter and multiply-accumulate accounting.

Two independent routes produce a :class:`ComplexityReport`:

* :func:`count_complexity` works from a :class:`ModelConfig` with closed-form
  per-layer formulas and never builds a network.
* :func:`trace_complexity` builds nothing either, but walks an existing model:
  parameters by enumeration, MACs from forward hooks on a probe input.

Counting conventions: a (transposed) convolution costs
``C_in/groups * C_out * k*k * H_out * W_out`` MACs, a linear layer
``in * out``, GDN its 1x1 normalization conv ``C*C*H*W``; global attention
adds ``L*L*C`` for the scores and again for the aggregation (``L = H*W``).
Biases, activations, pooling, interpolation and elementwise products are free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from sijscc.model_blocks import ESA_CHANNELS, GDN, ACmix
from sijscc.codec import AF_AFTER_IRAB, SIJSCC, ModelConfig, check_divisible

# published reference values: N -> (params in millions, GMACs at 768x512)
REFERENCE_COMPLEXITY = {
    64: (0.87, 48.10),
    96: (1.85, 104.26),
    128: (3.21, 182.05),
    160: (4.96, 281.49),
    192: (7.09, 402.57),
    256: (12.49, 709.66),
}


@dataclass
class LayerCost:
    name: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    height: int
    width: int
    per_layer: list[LayerCost] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(layer.params for layer in self.per_layer)

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.per_layer)

    def as_dict(self) -> dict[str, tuple[int, int]]:
        return {layer.name: (layer.params, layer.macs) for layer in self.per_layer}

    def format_table(self) -> str:
        width = max([len(layer.name) for layer in self.per_layer] + [5])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'MACs':>16}"]
        for layer in self.per_layer:
            lines.append(f"{layer.name:<{width}}  {layer.params:>12,}  {layer.macs:>16,}")
        lines.append(f"{'total':<{width}}  {self.params:>12,}  {self.macs:>16,}")
        return "\n".join(lines)


# -- analytic route -----------------------------------------------------------


def _conv(name, cin, cout, k, h, w, bias=True, groups=1) -> LayerCost:
    per_out = cin // groups * k * k
    return LayerCost(name, per_out * cout + (cout if bias else 0), per_out * cout * h * w)


def _gdn(name, c, h, w) -> LayerCost:
    return LayerCost(name, c + c * c, c * c * h * w)


def _linear(name, fin, fout) -> LayerCost:
    return LayerCost(name, fin * fout + fout, fin * fout)


def esa_costs(prefix: str, c: int, h: int, w: int) -> list[LayerCost]:
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    hp, wp = (h2 - 1) // 3 + 1, (w2 - 1) // 3 + 1  # max-pool 7, stride 3, padding 3
    f = ESA_CHANNELS
    return [
        _conv(f"{prefix}.reduce", c, f, 1, h, w),
        _conv(f"{prefix}.down", f, f, 3, h2, w2),
        _conv(f"{prefix}.body", f, f, 3, hp, wp),
        _conv(f"{prefix}.restore", f, c, 1, h, w),
    ]


def irab_costs(prefix: str, cin: int, cout: int, x: int, h: int, w: int) -> list[LayerCost]:
    costs = [
        _conv(f"{prefix}.dense", cin, cin, 3, h, w),
        _conv(f"{prefix}.expand", cin, x * cin, 1, h, w),
        _conv(f"{prefix}.restore", x * cin, cout, 1, h, w),
        _conv(f"{prefix}.mix", cout, cout, 1, h, w),
        *esa_costs(f"{prefix}.esa", cout, h, w),
    ]
    if cin != cout:
        costs.append(_conv(f"{prefix}.skip", cin, cout, 1, h, w))
    return costs


def acmix_costs(prefix: str, c: int, heads: int, k: int, h: int, w: int) -> list[LayerCost]:
    length = h * w
    d = c // heads
    k2 = k * k
    costs = [_conv(f"{prefix}.proj_{p}", c, c, 1, h, w) for p in ("q", "k", "v")]
    # the block itself: alpha/beta, attention products and the fixed-shift depthwise conv
    costs.append(LayerCost(prefix, 2, 2 * length * length * c + c * k2 * k2 * length))
    costs.append(_conv(f"{prefix}.proj_out", c, c, 1, h, w))
    costs.append(_conv(f"{prefix}.conv_fc", 3 * heads, k2 * heads, 1, d, length, bias=False))
    return costs


def af_costs(prefix: str, c: int, reduction: int) -> list[LayerCost]:
    hidden = max(1, c // reduction)
    return [_linear(f"{prefix}.fc1", c + 1, hidden), _linear(f"{prefix}.fc2", hidden, c)]


def count_complexity(config: ModelConfig, height: int, width: int, conditioning: str = "none") -> ComplexityReport:
    """Closed-form per-layer parameter and MAC counts of the model for one ``height x width`` image."""
    check_divisible(height, width)
    n, t, c, xs = config.N, config.T, config.input_channels, config.encoder_expansions
    h2, w2, h4, w4 = height // 2, width // 2, height // 4, width // 4
    r = config.af_reduction
    enc_af = conditioning == "both"
    dec_af = conditioning in ("both", "decoder_only")

    def maybe_af(side: str, seen: int, enabled: bool) -> list[LayerCost]:
        return af_costs(f"{side}.af{seen}", n, r) if enabled and seen in AF_AFTER_IRAB else []

    rep = ComplexityReport(height, width)
    layers = rep.per_layer
    e = "encoder"
    layers += [_conv(f"{e}.conv1", c, n, 3, h2, w2), _gdn(f"{e}.gdn1", n, h2, w2)]
    layers += irab_costs(f"{e}.irab1", n, n, xs[0], h2, w2) + maybe_af(e, 1, enc_af)
    layers += [_conv(f"{e}.conv2", n, n, 3, h4, w4), _gdn(f"{e}.gdn2", n, h4, w4)]
    for i, x in enumerate(xs[1:], start=2):
        layers += irab_costs(f"{e}.irab{i}", n, t if i == len(xs) else n, x, h4, w4) + maybe_af(e, i, enc_af)
    layers += acmix_costs(f"{e}.acmix", t, config.heads, config.acmix_kernel, h4, w4)

    d = "decoder"
    layers += acmix_costs(f"{d}.acmix", t, config.heads, config.acmix_kernel, h4, w4)
    rev = xs[::-1]
    for i, x in enumerate(rev[:-1], start=1):
        layers += irab_costs(f"{d}.irab{i}", t if i == 1 else n, n, x, h4, w4) + maybe_af(d, i, dec_af)
    layers += [_gdn(f"{d}.igdn1", n, h4, w4), _conv(f"{d}.deconv1", n, n, 3, h2, w2)]
    last = len(xs)
    layers += irab_costs(f"{d}.irab{last}", n, n, rev[-1], h2, w2) + maybe_af(d, last, dec_af)
    layers += [_gdn(f"{d}.igdn2", n, h2, w2), _conv(f"{d}.deconv2", n, n, 3, height, width)]
    layers.append(_conv(f"{d}.head", n, c, 1, height, width))
    return rep


# -- traced route -------------------------------------------------------------


def _own_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters(recurse=False) if p.requires_grad)


def _hook_macs(module: nn.Module, inputs, output) -> int:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        groups = module.groups
        k = math.prod(module.kernel_size)
        per_out = module.in_channels // groups * k
        return per_out * output.numel() // output.shape[0]
    if isinstance(module, nn.Linear):
        return module.in_features * output.numel() // output.shape[0]
    if isinstance(module, GDN):
        return module.channels * output.numel() // output.shape[0]
    if isinstance(module, ACmix):
        x = inputs[0]
        length = x.shape[-2] * x.shape[-1]
        k2 = module.kernel**2
        return 2 * length * length * module.channels + module.channels * k2 * k2 * length
    return 0


@torch.no_grad()
def trace_complexity(model: SIJSCC, height: int, width: int) -> ComplexityReport:
    """Per-module costs measured on ``model`` with a forward pass over one probe image."""
    check_divisible(height, width)
    macs: dict[str, int] = {}
    handles = []
    for name, module in model.named_modules():
        if _own_params(module) or isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear, GDN, ACmix)):

            def hook(mod, inp, out, name=name):
                macs[name] = macs.get(name, 0) + _hook_macs(mod, inp, out)

            handles.append(module.register_forward_hook(hook))
    was_training = model.training
    model.eval()
    try:
        x = torch.full((1, model.config.input_channels, height, width), 0.5)
        snr = torch.zeros(1) if model.conditioning != "none" else None
        model(x, None, snr)
    finally:
        for handle in handles:
            handle.remove()
        model.train(was_training)
    rep = ComplexityReport(height, width)
    for name, module in model.named_modules():
        if name in macs or _own_params(module):
            rep.per_layer.append(LayerCost(name, _own_params(module), macs.get(name, 0)))
    return rep


def reference_deviation(config: ModelConfig, report: ComplexityReport) -> dict | None:
    """Relative deviation of a report from the reference row with the same ``N`` (768x512 for MACs)."""
    if config.N not in REFERENCE_COMPLEXITY or config.T != 16:
        return None
    ref_params, ref_gmacs = REFERENCE_COMPLEXITY[config.N]
    out = {"reference_params_M": ref_params, "params_deviation": report.params / (ref_params * 1e6) - 1}
    if (report.height, report.width) in ((512, 768), (768, 512)):
        out["reference_GMACs"] = ref_gmacs
        out["macs_deviation"] = report.macs / (ref_gmacs * 1e9) - 1
    return out
