import pytest
import torch
from torch import nn

from sijscc import ModelConfig, build_model
from sijscc.codec import count_parameters
from sijscc.complexity import (
    REFERENCE_COMPLEXITY,
    _conv,
    count_complexity,
    reference_deviation,
    trace_complexity,
)
from sijscc.errors import ShapeError


def test_single_conv_hand_count():
    assert _conv("c", 3, 192, 3, 1, 1).params == 5376
    conv = nn.Conv2d(3, 192, 3, stride=2, padding=1)
    assert sum(p.numel() for p in conv.parameters()) == 5376
    assert _conv("c", 3, 192, 3, 384, 256).macs == 3 * 192 * 9 * 384 * 256


@pytest.mark.parametrize("n", [64, 96, 128, 160, 192, 256])
def test_params_within_reference_band(n):
    ref, _ = REFERENCE_COMPLEXITY[n]
    report = count_complexity(ModelConfig(N=n, T=16), 512, 768)
    assert abs(report.params / (ref * 1e6) - 1) <= 0.15


def test_macs_n192_within_reference_band():
    report = count_complexity(ModelConfig(N=192, T=16), 512, 768)
    dev = reference_deviation(ModelConfig(N=192, T=16), report)
    assert abs(dev["macs_deviation"]) <= 0.15
    assert dev["reference_GMACs"] == 402.57


def test_params_do_not_depend_on_resolution():
    cfg = ModelConfig(N=64)
    assert count_complexity(cfg, 64, 64).params == count_complexity(cfg, 512, 768).params


@pytest.mark.parametrize(
    "cfg,mode,h,w",
    [
        (ModelConfig(N=16, T=8, heads=2), "none", 16, 24),
        (ModelConfig(N=32, T=16), "none", 32, 32),
        (ModelConfig(N=32, T=16), "both", 16, 16),
        (ModelConfig(N=24, T=16, heads=4), "decoder_only", 24, 16),
    ],
)
def test_analytic_equals_traced(cfg, mode, h, w):
    model = build_model(cfg, 0, conditioning=mode)
    analytic = count_complexity(cfg, h, w, conditioning=mode)
    traced = trace_complexity(model, h, w)
    assert analytic.params == traced.params == count_parameters(model)
    assert analytic.macs == traced.macs
    assert analytic.as_dict() == traced.as_dict()


def test_per_layer_entries_sum_to_totals():
    rep = count_complexity(ModelConfig(N=64), 64, 64)
    assert sum(p for p, _ in rep.as_dict().values()) == rep.params
    assert sum(m for _, m in rep.as_dict().values()) == rep.macs
    table = rep.format_table()
    assert table.splitlines()[-1].split()[0] == "total"
    assert f"{rep.params:,}" in table


def test_conditioning_adds_only_af_parameters():
    cfg = ModelConfig(N=32)
    base = count_complexity(cfg, 32, 32).params
    dec = count_complexity(cfg, 32, 32, "decoder_only").params
    both = count_complexity(cfg, 32, 32, "both").params
    assert base < dec < both
    assert both - dec == dec - base


def test_trace_leaves_model_state_untouched():
    model = build_model(ModelConfig(N=16, T=8, heads=2), 0).train()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    trace_complexity(model, 16, 16)
    assert model.training
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert not any(m._forward_hooks for m in model.modules())


def test_reference_deviation_only_for_known_rows():
    assert reference_deviation(ModelConfig(N=48), count_complexity(ModelConfig(N=48), 32, 32)) is None
    dev = reference_deviation(ModelConfig(N=64), count_complexity(ModelConfig(N=64), 64, 64))
    assert "macs_deviation" not in dev and "params_deviation" in dev


def test_indivisible_size():
    with pytest.raises(ShapeError):
        count_complexity(ModelConfig(), 510, 768)
