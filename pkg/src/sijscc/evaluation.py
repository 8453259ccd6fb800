"""Quality metrics, SNR sweeps and metric files.

Images are ``[0, 1]`` floats. PSNR of an exact reconstruction is reported as
``math.inf`` (written as ``inf`` in CSV/JSON), never as a division by zero.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from sijscc.channel import ChannelSpec, transmit
from sijscc.codec import SIJSCC
from sijscc.errors import DegenerateInputError, IngestionError, ShapeError
from sijscc.training import center_crop_multiple, load_folder, to_unit

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

CSV_COLUMNS = ("dataset_id", "snr_db", "ratio", "psnr_db", "ssim", "n_images")


def _same_shape(x: Tensor, xhat: Tensor) -> None:
    if x.shape != xhat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(xhat.shape)}")


def mse(x: Tensor, xhat: Tensor) -> float:
    _same_shape(x, xhat)
    return float((x.double() - xhat.double()).pow(2).mean())


def psnr(x: Tensor, xhat: Tensor, max_val: float = 1.0) -> float:
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    err = mse(x, xhat)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / err)


def _gaussian_window(size: int, sigma: float) -> Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _as_4d(x: Tensor) -> Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    if x.dim() == 4:
        return x
    raise ShapeError(f"expected a 2-, 3- or 4-D image tensor, got {x.dim()}-D")


def ssim_map(x: Tensor, xhat: Tensor, data_range: float = 1.0) -> Tensor:
    """Local SSIM over every valid 11x11 Gaussian window (sigma 1.5), per channel."""
    _same_shape(x, xhat)
    a, b = _as_4d(x).double(), _as_4d(xhat).double()
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DegenerateInputError(f"image {tuple(a.shape[-2:])} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c = a.shape[1]
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def blur(t):
        return F.conv2d(t, win, groups=c)

    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(x: Tensor, xhat: Tensor, data_range: float = 1.0) -> float:
    """Mean SSIM over windows, channels and batch."""
    return float(ssim_map(x, xhat, data_range).mean())


# -- sweeps -------------------------------------------------------------------


@dataclass
class MetricsRecord:
    dataset_id: str
    snr_db: float
    ratio: str
    psnr_db: float
    ssim: float
    n_images: int
    # ablation arm / mismatch label; not part of the metrics CSV
    label: str = ""

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


def ratio_string(model: SIJSCC) -> str:
    return str(Fraction(model.config.T, 32 * model.config.input_channels))


def load_eval_images(source: str | Path | Sequence[Tensor]) -> list[Tensor]:
    """Float ``3 x H x W`` images, center-cropped to multiples of 4."""
    if isinstance(source, (str, Path)):
        _, images = load_folder(source, min_size=4)
        images = [to_unit(im) for im in images]
    else:
        images = [im if im.is_floating_point() else to_unit(im) for im in source]
    if not images:
        raise IngestionError("empty evaluation set")
    return [center_crop_multiple(im, 4) for im in images]


def noise_nonce(image_index: int, snr_db: float) -> int:
    """Noise stream id for one (image, SNR) pair, independent of sweep order."""
    return (image_index << 32) | zlib.crc32(f"{float(snr_db):.6f}".encode())


def _groups(images: list[Tensor], batch_size: int) -> Iterable[list[int]]:
    group: list[int] = []
    for i, im in enumerate(images):
        if group and (im.shape != images[group[0]].shape or len(group) == batch_size):
            yield group
            group = []
        group.append(i)
    if group:
        yield group


@torch.no_grad()
def evaluate_images(
    model: SIJSCC,
    images: list[Tensor],
    snr_db: float,
    kind: str = "awgn",
    seed: int = 0,
    rician_k: float = 0.0,
    model_snr_db: float | None = None,
    batch_size: int = 8,
) -> tuple[list[float], list[float]]:
    """Per-image PSNR and SSIM after transmission at ``snr_db``.

    Conditioned models receive ``model_snr_db`` (defaults to the true SNR).
    """
    model.eval()
    told = snr_db if model_snr_db is None else model_snr_db
    psnrs, ssims = [], []
    for group in _groups(images, batch_size):
        x = torch.stack([images[i] for i in group])
        h, w = x.shape[-2:]
        cond = torch.full((len(group),), float(told)) if model.conditioning != "none" else None
        z = model.encode(x, cond)
        rows = []
        for j, i in enumerate(group):
            spec = ChannelSpec(kind, float(snr_db), rician_k, seed)
            rows.append(transmit(z[j : j + 1], spec, noise_nonce(i, snr_db)))
        xhat = model.decode(torch.cat(rows), h, w, cond)
        for j in range(len(group)):
            psnrs.append(psnr(x[j], xhat[j]))
            ssims.append(ssim(x[j], xhat[j]))
    return psnrs, ssims


def snr_sweep(
    model: SIJSCC,
    dataset: str | Path | Sequence[Tensor],
    snrs: Sequence[float],
    kind: str = "awgn",
    seed: int = 0,
    dataset_id: str = "",
    rician_k: float = 0.0,
    model_snr_db: float | None = None,
    label: str = "",
    batch_size: int = 8,
) -> list[MetricsRecord]:
    """Average PSNR/SSIM per SNR point; noise is fixed per (image, SNR) pair."""
    if not snrs:
        return []
    images = load_eval_images(dataset)
    if not dataset_id:
        dataset_id = Path(dataset).name if isinstance(dataset, (str, Path)) else "images"
    records = []
    for snr in snrs:
        p, s = evaluate_images(model, images, snr, kind, seed, rician_k, model_snr_db, batch_size)
        records.append(
            MetricsRecord(dataset_id, float(snr), ratio_string(model), sum(p) / len(p), sum(s) / len(s), len(p), label)
        )
    return records


# -- files --------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6f}"
    return v


def write_metrics_csv(records: Sequence[MetricsRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([_fmt(r.row()[c]) for c in CSV_COLUMNS])
    return path


def read_metrics_csv(path: str | Path) -> list[MetricsRecord]:
    with Path(path).open(newline="") as fh:
        return [
            MetricsRecord(
                row["dataset_id"], float(row["snr_db"]), row["ratio"], float(row["psnr_db"]), float(row["ssim"]),
                int(row["n_images"]),
            )
            for row in csv.DictReader(fh)
        ]


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def write_metrics_json(records: Sequence[MetricsRecord], path: str | Path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"metadata": metadata or {}, "records": [asdict(r) for r in records]}
    path.write_text(json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n")
    return path


def plot_curves(
    curves: dict[str, list[tuple[float, float]]],
    path: str | Path,
    title: str = "",
    ylabel: str = "PSNR (dB)",
    metadata: dict | None = None,
) -> Path:
    """Render named (snr_db, value) curves to an image file with a JSON sidecar."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for name, pts in curves.items():
        pts = sorted(pts)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(_json_safe({"curves": curves, "metadata": metadata or {}}), indent=2, sort_keys=True) + "\n")
    return path


def plot_psnr_vs_snr(records: Sequence[MetricsRecord], path: str | Path, metadata: dict | None = None) -> Path:
    """One curve per compression ratio (and dataset, when several are present)."""
    curves: dict[str, list[tuple[float, float]]] = {}
    datasets = {r.dataset_id for r in records}
    for r in records:
        name = f"ratio {r.ratio}" + (f" ({r.dataset_id})" if len(datasets) > 1 else "")
        curves.setdefault(name, []).append((r.snr_db, r.psnr_db))
    return plot_curves(curves, path, "PSNR vs channel SNR", metadata=metadata)
