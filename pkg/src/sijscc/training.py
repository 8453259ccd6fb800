"""Training: patch ingestion, Charbonnier loss, Lion, SNR-randomized loop, checkpoints.

All randomness is counter-based: the batch, the per-example SNR draws and the
channel noise of step ``s`` come from generators keyed on ``(seed, s, stream)``.
A run can therefore be stopped and resumed from a checkpoint without storing
generator state, and the resumed trajectory is bit-identical.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import pickle
import zipfile
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch import Tensor
from torch.optim import Optimizer

from sijscc.channel import add_awgn, make_generator, snr_to_sigma2
from sijscc.codec import SIJSCC, ModelConfig, build_model
from sijscc.errors import CheckpointError, ConfigurationError, IngestionError, ShapeError, TrainingDiverged

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm", ".webp"}
CHECKPOINT_VERSION = 1

# generator streams per training step
_STREAM_BATCH, _STREAM_SNR, _STREAM_NOISE = 0, 1, 2


@dataclass
class TrainConfig:
    crop: int = 128
    batch: int = 112
    lr: float = 1e-4
    lr_decay: float = 0.8
    plateau_patience: int = 5
    snr_low: float = -5.0
    snr_high: float = 20.0
    charbonnier_eps: float = 1e-6
    lion_beta1: float = 0.9
    lion_beta2: float = 0.99
    weight_decay: float = 1e-2
    max_steps: int = 1000
    seed: int = 0
    eval_every: int = 100
    # validation patches drawn once from the validation (or training) set
    val_patches: int = 16
    # ω = 0: train the plain autoencoder
    noiseless: bool = False
    # optional early stop once validation PSNR (dB) reaches this value
    target_psnr: float | None = None
    # stop when plateau decay has pushed lr below this
    min_lr: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.snr_low > self.snr_high:
            raise ConfigurationError(f"snr_low ({self.snr_low}) exceeds snr_high ({self.snr_high})")
        if self.crop < 4 or self.crop % 4:
            raise ConfigurationError(f"crop must be a positive multiple of 4, got {self.crop}")
        if not 0 < self.lr_decay < 1:
            raise ConfigurationError(f"lr_decay must lie in (0, 1), got {self.lr_decay}")
        for name in ("batch", "plateau_patience", "eval_every", "val_patches"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.lr <= 0 or self.charbonnier_eps <= 0:
            raise ConfigurationError("lr and charbonnier_eps must be positive")
        if self.max_steps < 0 or self.weight_decay < 0:
            raise ConfigurationError("max_steps and weight_decay must be non-negative")
        if not (0 <= self.lion_beta1 < 1 and 0 <= self.lion_beta2 < 1):
            raise ConfigurationError("Lion betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """Small-batch settings for single-machine runs."""
    base = dict(crop=64, batch=16, lr=2e-4, eval_every=100, max_steps=2000)
    base.update(overrides)
    return TrainConfig(**base)


# -- loss and optimizer -------------------------------------------------------


def charbonnier_loss(x: Tensor, xhat: Tensor, eps: float = 1e-6) -> Tensor:
    """Mean of ``sqrt((x - xhat)**2 + eps)`` over every element.

    Evaluated as ``sqrt(eps) + mean(d**2 / (sqrt(d**2 + eps) + sqrt(eps)))``,
    the same quantity without cancellation, so a zero residual gives exactly
    ``sqrt(eps)``.
    """
    if x.shape != xhat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(xhat.shape)}")
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    root = math.sqrt(eps)
    d2 = (x - xhat).pow(2)
    return root + (d2 / (torch.sqrt(d2 + eps) + root)).mean()


@torch.no_grad()
def lion_update(
    param: Tensor, grad: Tensor, momentum: Tensor, lr: float, beta1: float, beta2: float, weight_decay: float
) -> None:
    """One in-place Lion update of ``param`` and its ``momentum`` buffer."""
    update = torch.sign(momentum * beta1 + grad * (1 - beta1))
    param.sub_(lr * (update + weight_decay * param))
    momentum.mul_(beta2).add_(grad, alpha=1 - beta2)


class Lion(Optimizer):
    """Sign-momentum optimizer with decoupled weight decay.

    The only state is one momentum buffer per parameter. A non-finite gradient
    raises :class:`TrainingDiverged` before any parameter is touched.
    """

    def __init__(self, params, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.99), weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigurationError(f"invalid learning rate {lr}")
        super().__init__(params, dict(lr=lr, betas=tuple(betas), weight_decay=weight_decay))
        self.steps = 0

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        live = [p for group in self.param_groups for p in group["params"] if p.grad is not None]
        if live and not bool(torch.stack([torch.isfinite(p.grad).all() for p in live]).all()):
            raise TrainingDiverged(self.steps, "gradient")
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if "momentum" not in state:
                    state["momentum"] = torch.zeros_like(p)
                lion_update(p, p.grad, state["momentum"], group["lr"], beta1, beta2, group["weight_decay"])
        self.steps += 1
        return loss


# -- SNR schedule -------------------------------------------------------------


def sample_training_snr(cfg: TrainConfig, generator: torch.Generator, n: int = 1) -> Tensor:
    """``n`` per-example SNRs (dB), uniform on ``[snr_low, snr_high]``."""
    u = torch.rand(n, generator=generator, dtype=torch.float64)
    return (cfg.snr_low + (cfg.snr_high - cfg.snr_low) * u).to(torch.float32)


# -- data ---------------------------------------------------------------------


def list_images(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def load_image(path: str | Path) -> Tensor:
    """RGB image as a ``3 x H x W`` uint8 tensor."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()


def to_unit(img: Tensor) -> Tensor:
    return img.to(torch.float32) / 255.0


def center_crop_multiple(img: Tensor, multiple: int = 4) -> Tensor:
    """Center-crop the last two dims down to multiples of ``multiple``."""
    h, w = img.shape[-2:]
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise ShapeError(f"image {h}x{w} is smaller than {multiple}x{multiple}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[..., top : top + nh, left : left + nw]


def load_folder(root: str | Path, min_size: int = 1) -> tuple[list[Path], list[Tensor]]:
    """Decode every image under ``root``; undecodable or too-small files are skipped with a warning."""
    paths, images = [], []
    for path in list_images(root):
        try:
            img = load_image(path)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        if min(img.shape[-2:]) < min_size:
            log.warning("skipping %s: %dx%d is smaller than %d", path, img.shape[1], img.shape[2], min_size)
            continue
        paths.append(path)
        images.append(img)
    if not images:
        raise IngestionError(f"no usable images under {root}")
    return paths, images


class PatchDataset:
    """Random ``crop x crop`` patches from an image folder, in a seed-determined order.

    Samples are consumed epoch by epoch: every epoch visits each image once in
    a permuted order, with fresh crop offsets. Batch ``s`` is a pure function
    of ``(seed, s)``.
    """

    def __init__(self, images: list[Tensor], crop: int, seed: int = 0, batch_size: int = 16):
        if not images:
            raise IngestionError("empty image list")
        small = [tuple(im.shape[-2:]) for im in images if min(im.shape[-2:]) < crop]
        if small:
            raise ShapeError(f"images {small[:3]} are smaller than the {crop}x{crop} crop")
        self.images = images
        self.crop = crop
        self.seed = seed
        self.batch_size = batch_size

    @classmethod
    def from_folder(cls, root: str | Path, crop: int, seed: int = 0, batch_size: int = 16) -> "PatchDataset":
        try:
            _, images = load_folder(root, min_size=crop)
        except IngestionError as exc:
            raise IngestionError(f"{root}: no image of at least {crop}x{crop} ({exc})") from exc
        return cls(images, crop, seed, batch_size)

    def __len__(self) -> int:
        return len(self.images)

    @lru_cache(maxsize=8)
    def _epoch(self, epoch: int) -> tuple[Tensor, Tensor, Tensor]:
        g = make_generator(self.seed, epoch, _STREAM_BATCH)
        order = torch.randperm(len(self.images), generator=g)
        u = torch.rand(len(self.images), 2, generator=g, dtype=torch.float64)
        tops, lefts = [], []
        for i, idx in enumerate(order.tolist()):
            h, w = self.images[idx].shape[-2:]
            tops.append(int(u[i, 0] * (h - self.crop + 1)))
            lefts.append(int(u[i, 1] * (w - self.crop + 1)))
        return order, torch.tensor(tops), torch.tensor(lefts)

    def sample(self, index: int) -> Tensor:
        epoch, pos = divmod(index, len(self.images))
        order, tops, lefts = self._epoch(epoch)
        img = self.images[int(order[pos])]
        t, l = int(tops[pos]), int(lefts[pos])
        return img[:, t : t + self.crop, l : l + self.crop]

    def batch(self, step: int) -> Tensor:
        start = step * self.batch_size
        return to_unit(torch.stack([self.sample(start + j) for j in range(self.batch_size)]))

    def iter_batches(self, start: int = 0) -> Iterator[Tensor]:
        step = start
        while True:
            yield self.batch(step)
            step += 1

    __iter__ = iter_batches

    def fixed_patches(self, n: int, seed: int) -> Tensor:
        """``n`` patches independent of the training order (validation use)."""
        held = PatchDataset(self.images, self.crop, seed=seed, batch_size=n)
        return held.batch(0)


def ingest_dataset(root: str | Path, crop: int, seed: int = 0, batch_size: int = 16) -> PatchDataset:
    return PatchDataset.from_folder(root, crop, seed, batch_size)


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    model: SIJSCC
    train_config: TrainConfig
    step: int = 0
    best_val_loss: float = math.inf
    momentum: dict[str, Tensor] = field(default_factory=dict)
    lr: float | None = None
    plateau_count: int = 0
    history: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    @property
    def rng_state(self) -> bytes:
        # counter-based streams: (seed, step) is the whole generator state
        return json.dumps({"seed": self.train_config.seed, "step": self.step}).encode()


def _tensor_bytes(tensors: dict[str, Tensor]) -> bytes:
    buf = io.BytesIO()
    torch.save({k: v.detach().cpu().clone() for k, v in tensors.items()}, buf)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write a zip archive: ``meta.json`` plus ``weights.pt`` and ``momentum.pt`` tensor maps."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "sijscc-checkpoint",
        "format_version": CHECKPOINT_VERSION,
        "model_config": ckpt.model.config.to_dict(),
        "conditioning": ckpt.model.conditioning,
        "train_config": ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "best_val_loss": ckpt.best_val_loss if math.isfinite(ckpt.best_val_loss) else None,
        "lr": ckpt.lr,
        "plateau_count": ckpt.plateau_count,
        "rng_state": ckpt.rng_state.decode(),
        "history": ckpt.history,
        "metrics": ckpt.metrics,
    }
    members = {
        "meta.json": json.dumps(meta, indent=2, sort_keys=True).encode(),
        "weights.pt": _tensor_bytes(ckpt.model.state_dict()),
        "momentum.pt": _tensor_bytes(ckpt.momentum),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, data in members.items():
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if not isinstance(meta, dict) or meta.get("format") != "sijscc-checkpoint":
                raise CheckpointError(f"{path}: not a checkpoint archive")
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: checkpoint format v{meta.get('format_version')}, expected v{CHECKPOINT_VERSION}")
            weights = torch.load(io.BytesIO(zf.read("weights.pt")), weights_only=True)
            momentum = torch.load(io.BytesIO(zf.read("momentum.pt")), weights_only=True)
    except CheckpointError:
        raise
    except (OSError, KeyError, EOFError, ValueError, zipfile.BadZipFile, RuntimeError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    try:
        config = ModelConfig.from_dict(meta["model_config"])
        model = SIJSCC(config, meta.get("conditioning", "none"))
        model.load_state_dict(weights)
        train_cfg = TrainConfig.from_dict(meta["train_config"])
    except (ConfigurationError, RuntimeError, TypeError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not match the model definition ({exc})") from exc
    best = meta.get("best_val_loss")
    return Checkpoint(
        model=model,
        train_config=train_cfg,
        step=meta["step"],
        best_val_loss=math.inf if best is None else best,
        momentum=momentum,
        lr=meta.get("lr"),
        plateau_count=meta.get("plateau_count", 0),
        history=meta.get("history", []),
        metrics=meta.get("metrics", {}),
    )


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- training loop ------------------------------------------------------------


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


class Trainer:
    """Owns the model, optimizer and plateau schedule of one run.

    ``val_images`` is a fixed tensor of validation patches; each evaluation
    uses the same noise draw so validation loss is comparable across steps.
    """

    def __init__(self, model: SIJSCC, data: PatchDataset, cfg: TrainConfig, val_images: Tensor | None = None):
        self.model = model
        self.cfg = cfg
        if data.batch_size != cfg.batch or data.crop != cfg.crop:
            data = PatchDataset(data.images, cfg.crop, data.seed, cfg.batch)
        self.data = data
        self.val_images = val_images if val_images is not None else data.fixed_patches(cfg.val_patches, cfg.seed + 7919)
        self.optimizer = Lion(
            model.parameters(), lr=cfg.lr, betas=(cfg.lion_beta1, cfg.lion_beta2), weight_decay=cfg.weight_decay
        )
        self.step = 0
        self.best_val_loss = math.inf
        self.best_state: dict[str, Tensor] | None = None
        self.best_step = 0
        self.plateau_count = 0
        self.history: list[dict] = []
        self.last_val: dict = {}

    @property
    def conditioned(self) -> bool:
        return self.model.conditioning != "none"

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    @lr.setter
    def lr(self, value: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = value

    def _forward(self, x: Tensor, snr: Tensor | None, noise_gen: torch.Generator | None) -> Tensor:
        if self.cfg.noiseless:
            return self.model(x, None, snr if self.conditioned else None)
        sigma2 = snr_to_sigma2(snr)
        channel = lambda z: add_awgn(z, sigma2, noise_gen)  # noqa: E731
        return self.model(x, channel, snr if self.conditioned else None)

    def train_step(self) -> float:
        s = self.step
        x = self.data.batch(s)
        snr = sample_training_snr(self.cfg, make_generator(self.cfg.seed, s, _STREAM_SNR), x.shape[0])
        self.model.train()
        xhat = self._forward(x, snr, make_generator(self.cfg.seed, s, _STREAM_NOISE))
        loss = charbonnier_loss(x, xhat, self.cfg.charbonnier_eps)
        if not torch.isfinite(loss):
            raise TrainingDiverged(s)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.steps = s
        self.optimizer.step()
        self.step = s + 1
        return loss.item()

    @torch.no_grad()
    def validate(self) -> dict:
        self.model.eval()
        x = self.val_images
        g = make_generator(self.cfg.seed, 2**31, _STREAM_SNR)
        snr = sample_training_snr(self.cfg, g, x.shape[0])
        xhat = self._forward(x, snr, make_generator(self.cfg.seed, 2**31, _STREAM_NOISE))
        loss = float(charbonnier_loss(x, xhat, self.cfg.charbonnier_eps))
        mse = float((xhat.clamp(0, 1) - x).pow(2).mean())
        return {"val_loss": loss, "val_psnr": psnr_from_mse(mse)}

    def _after_eval(self, val: dict) -> bool:
        """Update best weights and the plateau schedule; return True to stop."""
        self.last_val = val
        if val["val_loss"] < self.best_val_loss:
            self.best_val_loss = val["val_loss"]
            self.best_state = copy.deepcopy(self.model.state_dict())
            self.best_step = self.step
            self.plateau_count = 0
        else:
            self.plateau_count += 1
            if self.plateau_count >= self.cfg.plateau_patience:
                self.lr = self.lr * self.cfg.lr_decay
                self.plateau_count = 0
                log.info("step %d: validation plateau, lr -> %.3g", self.step, self.lr)
        if self.cfg.target_psnr is not None and val["val_psnr"] >= self.cfg.target_psnr:
            return True
        return self.lr < self.cfg.min_lr

    def run(self, steps: int | None = None, log_every: int = 0) -> "Trainer":
        """Train until ``max_steps`` (or ``steps`` more steps), evaluating every ``eval_every``."""
        end = self.cfg.max_steps if steps is None else min(self.cfg.max_steps, self.step + steps)
        running = []
        while self.step < end:
            try:
                loss = self.train_step()
            except TrainingDiverged as exc:
                exc.checkpoint = self.best_checkpoint()
                raise
            running.append(loss)
            if self.step % self.cfg.eval_every == 0 or self.step == end:
                val = self.validate()
                entry = {"step": self.step, "train_loss": float(np.mean(running)), "lr": self.lr, **val}
                self.history.append(entry)
                running = []
                if log_every:
                    log.info("step %(step)d loss %(train_loss).5f val %(val_loss).5f psnr %(val_psnr).2f", entry)
                if self._after_eval(val):
                    break
        return self

    # -- checkpoint views --

    def _momentum(self) -> dict[str, Tensor]:
        names = {id(p): n for n, p in self.model.named_parameters()}
        return {names[id(p)]: s["momentum"] for p, s in self.optimizer.state.items() if "momentum" in s}

    def checkpoint(self) -> Checkpoint:
        """Current state, sufficient to resume bit-identically."""
        return Checkpoint(
            model=self.model,
            train_config=self.cfg,
            step=self.step,
            best_val_loss=self.best_val_loss,
            momentum=self._momentum(),
            lr=self.lr,
            plateau_count=self.plateau_count,
            history=list(self.history),
            metrics=dict(self.last_val),
        )

    def best_checkpoint(self) -> Checkpoint:
        """Weights at the best validation loss (the current weights before any evaluation)."""
        model = copy.deepcopy(self.model)
        if self.best_state is not None:
            model.load_state_dict(self.best_state)
        ckpt = self.checkpoint()
        ckpt.model = model
        ckpt.step = self.best_step if self.best_state is not None else self.step
        ckpt.metrics = {"best_step": ckpt.step, **dict(self.last_val)}
        return ckpt

    @classmethod
    def resume(cls, ckpt: Checkpoint, data: PatchDataset, val_images: Tensor | None = None) -> "Trainer":
        trainer = cls(ckpt.model, data, ckpt.train_config, val_images)
        trainer.step = ckpt.step
        trainer.best_val_loss = ckpt.best_val_loss
        trainer.plateau_count = ckpt.plateau_count
        trainer.history = list(ckpt.history)
        if ckpt.lr is not None:
            trainer.lr = ckpt.lr
        params = dict(ckpt.model.named_parameters())
        for name, m in ckpt.momentum.items():
            trainer.optimizer.state[params[name]]["momentum"] = m.clone()
        return trainer


def train(
    model: SIJSCC, data: PatchDataset, cfg: TrainConfig, val_images: Tensor | None = None, log_every: int = 0
) -> Checkpoint:
    """Train ``model`` in place and return the checkpoint at the best validation loss."""
    trainer = Trainer(model, data, cfg, val_images)
    if cfg.max_steps == 0:
        return trainer.checkpoint()
    trainer.run(log_every=log_every)
    return trainer.best_checkpoint()


def init_checkpoint(config: ModelConfig, cfg: TrainConfig, conditioning: str = "none") -> Checkpoint:
    return Checkpoint(model=build_model(config, cfg.seed, conditioning), train_config=cfg)

