"""Acceptance gate: one or more tests per criterion, summarized at the end of the run.

Criteria 7 to 9 train real models and are marked ``slow``; deselect them with
``-m "not slow"`` for a quick pass.
"""

import copy
import dataclasses
import json
import math
from fractions import Fraction

import pytest
import torch
from fdcheck import module_gradient_errors

from sijscc import ACmix, AFModule, ESA, GDN, IRAB, ModelConfig, build_model
from sijscc.channel import ChannelSpec, empirical_snr_db, transmit_awgn
from sijscc.cli import main
from sijscc.codec import power_normalize, read_symbols
from sijscc.complexity import REFERENCE_COMPLEXITY, count_complexity, reference_deviation
from sijscc.snr_conditioning import build_conditioned_model
from sijscc.evaluation import psnr, snr_sweep, ssim
from sijscc.sample_data import HELDOUT_SOURCES, write_patches, write_split
from sijscc.training import (
    PatchDataset,
    TrainConfig,
    Trainer,
    charbonnier_loss,
    file_sha256,
    ingest_dataset,
    load_checkpoint,
    save_checkpoint,
    to_unit,
    train,
)

criterion = pytest.mark.criterion
SWEEP = [1.0, 4.0, 7.0, 13.0, 19.0]


# -- 1 ------------------------------------------------------------------------


@criterion(1, "complexity anchors within 15% of the reference parameter and MAC counts")
def test_criterion_1_complexity_anchors():
    for n in (64, 96, 128, 192):
        cfg = ModelConfig(N=n, T=16)
        report = count_complexity(cfg, 512, 768)
        dev = reference_deviation(cfg, report)
        print(f"N={n}: params {report.params / 1e6:.3f} M vs {REFERENCE_COMPLEXITY[n][0]} M ({dev['params_deviation']:+.1%})")
        assert abs(dev["params_deviation"]) <= 0.15
    cfg = ModelConfig(N=192, T=16)
    report = count_complexity(cfg, 512, 768)
    dev = reference_deviation(cfg, report)
    print(f"N=192: MACs {report.macs / 1e9:.2f} G vs 402.57 G ({dev['macs_deviation']:+.1%})")
    print(report.format_table())
    assert abs(dev["macs_deviation"]) <= 0.15


# -- 2 ------------------------------------------------------------------------


@criterion(2, "measured k/n equals T/96 exactly")
@pytest.mark.parametrize("T", [8, 16])
@pytest.mark.parametrize("h,w,k8", [(128, 128, 4096), (512, 768, 98304)])
def test_criterion_2_rate_identity(T, h, w, k8):
    model = build_model(ModelConfig(N=16, T=T, heads=4), 0).eval()
    with torch.no_grad():
        z = model.encode(torch.rand(1, 3, h, w, generator=torch.Generator().manual_seed(0)))
    k, n = z.shape[-1], 3 * h * w
    assert k == k8 * T // 8
    assert Fraction(k, n) == Fraction(T, 96)


# -- 3 ------------------------------------------------------------------------


@criterion(3, "AWGN empirical SNR within 0.1 dB and noise mean below 5e-3 over 1e6 symbols")
@pytest.mark.parametrize("snr", [-5.0, 0.0, 10.0, 20.0])
def test_criterion_3_channel_statistics(snr):
    g = torch.Generator().manual_seed(123)
    z = power_normalize(torch.randn(1, 10**6, dtype=torch.complex64, generator=g))
    zhat = transmit_awgn(z, ChannelSpec(snr_db=snr, seed=42))
    noise = (zhat - z).reshape(-1)
    measured = empirical_snr_db(z, zhat)
    print(f"target {snr} dB, measured {measured:.4f} dB")
    assert abs(measured - snr) < 0.1
    assert abs(noise.real.double().mean().item()) < 5e-3
    assert abs(noise.imag.double().mean().item()) < 5e-3


# -- 4 ------------------------------------------------------------------------


def _gradient_cases(seed):
    g = torch.Generator().manual_seed(seed)
    size = 5 + seed % 3

    def rand(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    gdn = [GDN(4, inverse=inv) for inv in (False, True)]
    for block in gdn:
        # strictly inside the parameter floors, where the reparameterization is smooth
        block.set_effective(torch.rand(4, generator=g) + 0.2, torch.rand(4, 4, generator=g) * 0.5 + 0.05)
    acmix = ACmix(8, heads=2)
    with torch.no_grad():
        acmix.alpha.uniform_(0.5, 1.5, generator=g)
        acmix.beta.uniform_(0.5, 1.5, generator=g)
    return {
        "GDN": (gdn[0], (rand(1, 4, 3, 3),)),
        "IGDN": (gdn[1], (rand(1, 4, 3, 3),)),
        "ESA": (ESA(8), (rand(1, 8, 8, 8),)),
        "IRAB": (IRAB(8, expansion=2), (rand(1, 8, size + 1, size + 1),)),
        "ACmix": (acmix, (rand(1, 8, size, size),)),
        "AF": (AFModule(16, reduction=4), (rand(2, 16, 4, 4), (rand(2) * 10).clone())),
    }


@criterion(4, "finite-difference gradient checks for every block across 5 seeds")
@pytest.mark.parametrize("seed", range(5))
def test_criterion_4_gradients(seed):
    torch.manual_seed(seed)
    worst = {}
    for name, (module, inputs) in _gradient_cases(seed).items():
        errors = module_gradient_errors(module, inputs, seed)
        worst[name] = max(errors.values())
    print({k: f"{v:.2e}" for k, v in worst.items()})
    assert max(worst.values()) < 1e-4, worst


# -- 5 ------------------------------------------------------------------------


@criterion(5, "metric oracles: PSNR, SSIM and Charbonnier hand cases")
def test_criterion_5_metric_oracles():
    assert psnr(torch.zeros(3, 8, 8), torch.ones(3, 8, 8)) == 0.0
    assert psnr(torch.zeros(3, 8, 8), torch.full((3, 8, 8), 255.0), max_val=255.0) == 0.0
    g = torch.Generator().manual_seed(0)
    x = torch.rand(3, 32, 32, generator=g, dtype=torch.float64)
    y = (x + 0.05 * torch.randn(3, 32, 32, generator=g, dtype=torch.float64)).clamp(0, 1)
    for s in (255.0, 1e-2, 7.5):
        assert abs(psnr(x, y) - psnr(x * s, y * s, max_val=s)) < 1e-9
    assert ssim(x, x) == 1.0
    a, b = torch.full((1, 16, 16), 0.25), torch.full((1, 16, 16), 0.75)
    formula = (2 * 0.25 * 0.75 + 1e-4) / (0.25**2 + 0.75**2 + 1e-4)
    assert abs(ssim(a, b) - formula) < 1e-9
    for eps in (1e-6, 1e-3, 0.25):
        for dtype in (torch.float32, torch.float64):
            z = torch.rand(2, 3, 4, 4, dtype=dtype)
            # exact in the working precision: the correctly rounded sqrt(eps)
            assert torch.equal(charbonnier_loss(z, z.clone(), eps), torch.tensor(math.sqrt(eps), dtype=dtype))


@criterion(5, "metric oracles: PSNR, SSIM and Charbonnier hand cases")
@pytest.mark.xfail(
    strict=True,
    reason="the stated constant-pair value 0.6002 disagrees with its own formula, which evaluates to 0.600064",
)
def test_criterion_5_ssim_constant_pair_literal_value():
    a, b = torch.full((1, 16, 16), 0.25), torch.full((1, 16, 16), 0.75)
    assert abs(ssim(a, b) - 0.6002) <= 1e-4


# -- 6 ------------------------------------------------------------------------


@criterion(6, "noiseless pipeline is deterministic and bit-reproducible")
def test_criterion_6_noiseless_autoencoder():
    cfg = ModelConfig(N=32, T=16)
    x = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    outs = []
    for _ in range(2):
        model = build_model(cfg, 5).eval()
        with torch.no_grad():
            outs += [model(x), model(x.clone()), model.decode_raw(model.encode(x), 32, 32)]
            outs.append(model(x, lambda z: transmit_awgn(z, ChannelSpec(snr_db=400.0))))
    assert all(torch.equal(outs[0], o) for o in outs[1:])


# -- 7 / 8 --------------------------------------------------------------------

DESK = ModelConfig(N=64, T=16)


@pytest.fixture(scope="module")
def desk_train(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    write_patches(root / "train8", 8, 64, seed=0)
    data = ingest_dataset(root / "train8", 64, seed=0, batch_size=8)
    return root, data, torch.stack([to_unit(im) for im in data.images])


def _overfit(data, images, noiseless, target):
    cfg = TrainConfig(
        crop=64, batch=8, lr=3e-4, snr_low=10.0, snr_high=10.0, max_steps=20000, eval_every=250,
        val_patches=8, plateau_patience=4, noiseless=noiseless, target_psnr=target,
    )
    # validating on the training images themselves; the gate below re-measures independently
    return train(build_model(DESK, 0), data, cfg, val_images=images)


@pytest.fixture(scope="module")
def overfit_noisy(desk_train):
    _, data, images = desk_train
    return _overfit(data, images, noiseless=False, target=30.3)


@pytest.mark.slow
@criterion(7, "overfit at 10 dB reaches 30 dB and noiseless reaches 35 dB on 8 training images")
def test_criterion_7_overfit_noisy(overfit_noisy, desk_train):
    _, _, images = desk_train
    ckpt = overfit_noisy
    rec = snr_sweep(ckpt.model, list(images), [10.0], seed=2024)[0]
    print(f"10 dB: {rec.psnr_db:.2f} dB after {ckpt.step} steps")
    assert ckpt.step <= 20000
    assert rec.psnr_db >= 30.0


@pytest.mark.slow
@criterion(7, "overfit at 10 dB reaches 30 dB and noiseless reaches 35 dB on 8 training images")
def test_criterion_7_overfit_noiseless(desk_train):
    _, data, images = desk_train
    ckpt = _overfit(data, images, noiseless=True, target=35.3)
    model = ckpt.model.eval()
    with torch.no_grad():
        out = model(images)
    values = [psnr(images[i], out[i]) for i in range(len(images))]
    mean = sum(values) / len(values)
    print(f"noiseless: {mean:.2f} dB after {ckpt.step} steps")
    assert ckpt.step <= 20000
    assert mean >= 35.0



@pytest.mark.slow
@criterion(8, "retrained over -5..20 dB: PSNR non-decreasing over 1..19 dB on held-out patches, 19 vs 1 dB gap >= 2 dB")
def test_criterion_8_graceful_degradation(overfit_noisy, tmp_path):
    # held out: crops of the right quarter of each photograph, which training never sees
    write_split(tmp_path / "train", tmp_path / "held", 32, 64, seed=99)
    pool = ingest_dataset(tmp_path / "train", 64, seed=1, batch_size=8)
    cfg = dataclasses.replace(
        overfit_noisy.train_config, snr_low=-5.0, snr_high=20.0, target_psnr=None, seed=1, max_steps=3000
    )
    trainer = Trainer(copy.deepcopy(overfit_noisy.model), pool, cfg)
    # constant rate, then two annealing phases
    for lr, steps in ((3e-4, 2000), (1e-4, 500), (3e-5, 500)):
        trainer.lr = lr
        trainer.run(steps=steps)
    records = snr_sweep(trainer.model, tmp_path / "held", SWEEP, seed=0)
    curve = [r.psnr_db for r in records]
    print("held-out PSNR by SNR:", {s: round(p, 2) for s, p in zip(SWEEP, curve)})
    assert records[0].n_images == 32
    assert all(b >= a for a, b in zip(curve, curve[1:])), curve
    assert curve[-1] - curve[0] >= 2.0, curve


# -- 9 ------------------------------------------------------------------------


@pytest.mark.slow
@criterion(9, "ablation arms share seeds, emit a three-curve comparison, mode none equals the base model")
def test_criterion_9_ablation_harness(tmp_path, capsys):
    write_patches(tmp_path / "train", 8, 64, seed=0)
    write_patches(tmp_path / "eval", 8, 32, seed=5, sources=HELDOUT_SOURCES)
    config = tmp_path / "ablate.yaml"
    config.write_text(
        f"""
model: {{N: 32, T: 16}}
train: {{crop: 32, batch: 4, lr: 3.0e-4, max_steps: 300, eval_every: 100, val_patches: 4, seed: 3}}
channel: {{seed: 11}}
paths: {{train_data: {tmp_path / 'train'}, eval_data: {tmp_path / 'eval'}, out_dir: {tmp_path / 'out'}}}
ablate: {{modes: [both, decoder_only, none], snrs: [-5, 0, 5, 10, 15, 20]}}
"""
    )
    assert main(["ablate", str(config)]) == 0
    out = tmp_path / "out"
    rows = (out / "comparison.csv").read_text().splitlines()
    assert rows[0] == "mode,snr_db,psnr_db,ssim" and len(rows) == 1 + 3 * 6
    curves = json.loads((out / "comparison.png.json").read_text())["curves"]
    assert list(curves) == ["both", "decoder_only", "none"]
    assert (out / "comparison.png").read_bytes()[:4] == b"\x89PNG"

    # the unconditioned arm is exactly a plain training run of the base model
    cfg = TrainConfig(crop=32, batch=4, lr=3e-4, max_steps=300, eval_every=100, val_patches=4, seed=3)
    plain = train(build_model(ModelConfig(N=32, T=16), 3), ingest_dataset(tmp_path / "train", 32, 3, 4), cfg)
    arm = load_checkpoint(out / "ablation" / "none.ckpt").model.state_dict()
    assert all(torch.equal(arm[k], v) for k, v in plain.model.state_dict().items())
    init = build_conditioned_model(ModelConfig(N=32, T=16), "none", 3).state_dict()
    fresh = build_model(ModelConfig(N=32, T=16), 3).state_dict()
    assert list(init) == list(fresh) and all(torch.equal(init[k], fresh[k]) for k in fresh)

    # reported, not gated: the SNR side information is not expected to help much
    gains = json.loads((out / "ablation_summary.json").read_text())["gain_over_none"]
    for label, s in gains.items():
        print(f"{label}: largest gain over none {s['max_gain_db']:+.3f} dB")


# -- 10 -----------------------------------------------------------------------


@criterion(10, "symbol-file and checkpoint round trips reproduce outputs bit-exactly")
def test_criterion_10_file_round_trips(tmp_path, patches):
    from PIL import Image

    cfg = TrainConfig(crop=32, batch=2, lr=1e-3, max_steps=5, eval_every=5, val_patches=2)
    data = PatchDataset(patches(4, 40, seed=1), crop=32, seed=0, batch_size=2)
    ckpt = train(build_conditioned_model(ModelConfig(N=16, T=8, heads=2), "both", 0), data, cfg)
    path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path)
    assert file_sha256(save_checkpoint(loaded, tmp_path / "again.ckpt")) == file_sha256(path)
    images = [p.float() / 255 for p in patches(3, 32, seed=9)]
    assert snr_sweep(ckpt.model, images, SWEEP, seed=4) == snr_sweep(loaded.model, images, SWEEP, seed=4)

    Image.fromarray(patches(1, 48, seed=3)[0].permute(1, 2, 0).numpy()).save(tmp_path / "img.png")
    out = ["--out-dir", str(tmp_path / "o")]
    assert main(["transmit", str(path), str(tmp_path / "img.png"), "--snr", "6", *out]) == 0
    assert main(["receive", str(path), str(tmp_path / "o" / "img.sjsc"), "--output", "rx.png", *out]) == 0
    tx = Image.open(tmp_path / "o" / "img_recon.png").tobytes()
    assert tx == Image.open(tmp_path / "o" / "rx.png").tobytes()
    first = (tmp_path / "o" / "img.sjsc").read_bytes()
    assert main(["transmit", str(path), str(tmp_path / "img.png"), "--snr", "6", *out]) == 0
    assert (tmp_path / "o" / "img.sjsc").read_bytes() == first
    assert read_symbols(tmp_path / "o" / "img.sjsc").snr_db == 6.0
