"""SNR-conditioning ablation: AF channel-attention blocks and the three-arm harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from sijscc.errors import ConfigurationError, ShapeError


class AFModule(nn.Module):
    """Attention-feature block: channel scales from pooled features and the channel SNR.

    ``s = sigmoid(fc2(relu(fc1([mean_hw(x), snr_db]))))`` and the output is
    ``x * s`` broadcast over the spatial dimensions.
    """

    snr_aware = True

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < 1 or reduction < 1:
            raise ConfigurationError("AF channels and reduction must be positive")
        self.channels = channels
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels + 1, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def scales(self, x: Tensor, snr_db: Tensor | float) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ConfigurationError(f"AF expects {self.channels} channels, got shape {tuple(x.shape)}")
        snr = torch.as_tensor(snr_db, dtype=x.dtype, device=x.device).reshape(-1)
        if snr.numel() == 1:
            snr = snr.expand(x.shape[0])
        if snr.numel() != x.shape[0]:
            raise ShapeError(f"{snr.numel()} SNR values for a batch of {x.shape[0]}")
        context = torch.cat([x.mean(dim=(2, 3)), snr.unsqueeze(1)], dim=1)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(context))))

    def forward(self, x: Tensor, snr_db: Tensor | float) -> Tensor:
        return x * self.scales(x, snr_db)[:, :, None, None]


def build_conditioned_model(config, mode: str = "none", seed: int = 0):
    """Base model plus AF blocks after the 2nd and 4th IRAB of the conditioned side(s).

    ``mode="none"`` returns exactly :func:`sijscc.codec.build_model` for the same seed.
    """
    from sijscc.codec import CONDITIONING_MODES, build_model

    if mode not in CONDITIONING_MODES:
        raise ConfigurationError(f"unknown conditioning mode {mode!r}; expected one of {CONDITIONING_MODES}")
    return build_model(config, seed, conditioning=mode)


COMPARISON_COLUMNS = ("mode", "snr_db", "psnr_db", "ssim")


@dataclass
class AblationResult:
    records: dict[str, list] = field(default_factory=dict)
    checkpoints: dict[str, object] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [
            {"mode": label, "snr_db": r.snr_db, "psnr_db": r.psnr_db, "ssim": r.ssim}
            for label, recs in self.records.items()
            for r in recs
        ]

    def write_csv(self, path: str | Path) -> Path:
        from sijscc.evaluation import _fmt

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COMPARISON_COLUMNS)
            for row in self.rows():
                w.writerow([_fmt(row[c]) for c in COMPARISON_COLUMNS])
        return path

    def plot(self, path: str | Path, metadata: dict | None = None) -> Path:
        from sijscc.evaluation import plot_curves

        curves = {label: [(r.snr_db, r.psnr_db) for r in recs] for label, recs in self.records.items()}
        return plot_curves(curves, path, "SNR side information: encoder+decoder / decoder only / none", metadata=metadata)

    def summary(self) -> dict:
        """Largest PSNR gain of each conditioned arm over the unconditioned one, per SNR."""
        base = {r.snr_db: r.psnr_db for r in self.records.get("none", [])}
        out = {}
        for label, recs in self.records.items():
            if label == "none" or not base:
                continue
            gains = {r.snr_db: r.psnr_db - base[r.snr_db] for r in recs if r.snr_db in base}
            out[label] = {"gain_db_by_snr": gains, "max_gain_db": max(gains.values()) if gains else None}
        return out


def mismatch_label(mode: str, snr_db: float) -> str:
    return f"{mode}/mismatch@{snr_db:g}dB"


def ablation_run(
    modes,
    train_cfg,
    eval_snrs,
    model_config,
    train_data,
    eval_images,
    val_images=None,
    mismatch_snr_db: float | None = None,
    eval_seed: int = 0,
    log_every: int = 0,
) -> AblationResult:
    """Train and sweep one model per conditioning mode under identical data, schedule and seeds.

    Conditioned arms see the true per-example SNR during training and
    evaluation. With ``mismatch_snr_db`` each conditioned arm is swept a second
    time while being told that constant SNR; those records carry a
    ``mode/mismatch@...`` label.
    """
    from sijscc.evaluation import load_eval_images, snr_sweep
    from sijscc.training import train

    images = load_eval_images(eval_images)
    result = AblationResult()
    for mode in modes:
        model = build_conditioned_model(model_config, mode, train_cfg.seed)
        ckpt = train(model, train_data, train_cfg, val_images, log_every=log_every)
        result.checkpoints[mode] = ckpt
        result.records[mode] = snr_sweep(ckpt.model, images, eval_snrs, seed=eval_seed, label=mode)
        if mismatch_snr_db is not None and mode != "none":
            label = mismatch_label(mode, mismatch_snr_db)
            result.records[label] = snr_sweep(
                ckpt.model, images, eval_snrs, seed=eval_seed, model_snr_db=mismatch_snr_db, label=label
            )
    return result
