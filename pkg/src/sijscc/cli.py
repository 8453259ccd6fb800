"""Command-line entry point: ``sijscc <command> ...``.

Exit codes: 0 success, 2 user or configuration error, 3 training divergence,
4 checkpoint (or symbol file) incompatibility. Every file a command writes is
placed under the run's output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from sijscc.channel import ChannelSpec, transmit
from sijscc.codec import SymbolFrame, read_symbols, write_symbols
from sijscc.complexity import count_complexity, reference_deviation, trace_complexity
from sijscc.config import RunConfig, load_run_config
from sijscc.errors import (
    CheckpointError,
    ConfigurationError,
    DegenerateInputError,
    IngestionError,
    ShapeError,
    TrainingDiverged,
)

log = logging.getLogger("sijscc")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4

CHECKPOINT_NAME = "checkpoint.ckpt"
LAST_NAME = "last.ckpt"
LOSS_LOG_NAME = "loss_log.csv"


# -- helpers ------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None), getattr(args, "set", None) or [])
    cfg.out_dir_flag = getattr(args, "out_dir", None)
    return cfg


def _out_file(cfg: RunConfig, name: str) -> Path:
    """``name`` resolved inside the output directory; anything escaping it is refused."""
    out = cfg.out_dir.resolve()
    path = (out / name).resolve()
    if path != out and out not in path.parents:
        raise ConfigurationError(f"{name}: output files must stay inside out_dir ({out})")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_model_checkpoint(path: str):
    from sijscc.training import load_checkpoint

    if not Path(path).is_file():
        raise ConfigurationError(f"checkpoint: {path} does not exist")
    return load_checkpoint(path)


def _parse_snrs(text: str | None, default: list[float]) -> list[float]:
    if text is None:
        return [float(s) for s in default]
    try:
        return [float(s) for s in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigurationError(f"--snrs: {exc}") from exc


def _read_image(path: str) -> torch.Tensor:
    from PIL import UnidentifiedImageError

    from sijscc.training import center_crop_multiple, load_image, to_unit

    try:
        img = load_image(path)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ConfigurationError(f"{path}: cannot decode image ({exc})") from exc
    return center_crop_multiple(to_unit(img), 4)


def _save_image(x: torch.Tensor, path: Path) -> None:
    arr = (x.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(np.ascontiguousarray(arr)).save(path)


def _write_json(path: Path, doc: dict) -> None:
    from sijscc.evaluation import _json_safe

    path.write_text(json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n")


def _write_loss_log(history: list[dict], path: Path) -> None:
    cols = ("step", "train_loss", "val_loss", "val_psnr", "lr")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for entry in history:
            w.writerow([entry.get(c, "") for c in cols])


def _snr_tensor(model, snr_db: float):
    return torch.full((1,), float(snr_db)) if model.conditioning != "none" else None


# -- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    from sijscc.training import (
        PatchDataset,
        Trainer,
        file_sha256,
        ingest_dataset,
        init_checkpoint,
        load_checkpoint,
        load_folder,
        save_checkpoint,
    )

    cfg = _config(args)
    cfg.require_paths("train_data", *(["val_data"] if cfg.paths.val_data else []))
    tc = cfg.train
    data = ingest_dataset(cfg.paths.train_data, tc.crop, tc.seed, tc.batch)
    val = None
    if cfg.paths.val_data:
        _, raw = load_folder(cfg.paths.val_data, min_size=tc.crop)
        val = PatchDataset(raw, tc.crop, tc.seed, tc.batch).fixed_patches(tc.val_patches, tc.seed)

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        ckpt.train_config = tc
        trainer = Trainer.resume(ckpt, data, val)
    else:
        conditioning = args.conditioning or "none"
        trainer = Trainer(init_checkpoint(cfg.model, tc, conditioning).model, data, tc, val)

    best_path, last_path = _out_file(cfg, CHECKPOINT_NAME), _out_file(cfg, LAST_NAME)
    started = time.time()
    status = EXIT_OK
    try:
        trainer.run(log_every=1)
        best = trainer.best_checkpoint() if trainer.history else trainer.checkpoint()
    except TrainingDiverged as exc:
        log.error("training diverged at step %d (%s); keeping the last good checkpoint", exc.step, exc.what)
        best = exc.checkpoint
        status = EXIT_DIVERGED
    save_checkpoint(best, best_path)
    if status == EXIT_OK:
        save_checkpoint(trainer.checkpoint(), last_path)
    _write_loss_log(trainer.history, _out_file(cfg, LOSS_LOG_NAME))
    _write_json(
        _out_file(cfg, "train_run.json"),
        {
            "config": cfg.to_dict(),
            "steps": trainer.step,
            "best_step": best.step,
            "checkpoint_sha256": file_sha256(best_path),
            "diverged": status == EXIT_DIVERGED,
            "wall_clock_seconds": time.time() - started,
        },
    )
    print(f"checkpoint: {best_path} (step {best.step})")
    if trainer.last_val:
        print(f"validation PSNR: {trainer.last_val['val_psnr']:.2f} dB at step {trainer.step}")
    return status


def cmd_eval(args) -> int:
    from sijscc.evaluation import plot_psnr_vs_snr, snr_sweep, write_metrics_csv, write_metrics_json
    from sijscc.training import file_sha256

    cfg = _config(args)
    if args.data:
        cfg.paths.eval_data = args.data
    snrs = _parse_snrs(args.snrs, cfg.eval.snrs)
    if not snrs:
        raise ConfigurationError("eval.snrs: the SNR list is empty")
    cfg.require_paths("eval_data")
    ckpt = _load_model_checkpoint(args.checkpoint)
    ch = cfg.channel
    records = snr_sweep(
        ckpt.model,
        cfg.paths.eval_data,
        snrs,
        kind=ch.kind,
        seed=ch.seed,
        dataset_id=cfg.eval.dataset_id or Path(cfg.paths.eval_data).name,
        rician_k=ch.rician_k,
        batch_size=cfg.eval.batch_size,
    )
    meta = {
        "checkpoint_sha256": file_sha256(args.checkpoint),
        "model_config": ckpt.model.config.to_dict(),
        "conditioning": ckpt.model.conditioning,
        "channel": ch.to_dict(),
        "snrs": snrs,
    }
    write_metrics_csv(records, _out_file(cfg, "metrics.csv"))
    write_metrics_json(records, _out_file(cfg, "metrics.json"), meta)
    plot_psnr_vs_snr(records, _out_file(cfg, "psnr_vs_snr.png"), meta)
    print(f"{'snr_db':>7}  {'psnr_db':>8}  {'ssim':>7}  n")
    for r in records:
        print(f"{r.snr_db:>7.2f}  {r.psnr_db:>8.3f}  {r.ssim:>7.4f}  {r.n_images}")
    return EXIT_OK


def cmd_transmit(args) -> int:
    from sijscc.evaluation import psnr, ratio_string

    cfg = _config(args)
    ckpt = _load_model_checkpoint(args.checkpoint)
    model = ckpt.model.eval()
    x = _read_image(args.image)[None]
    h, w = x.shape[-2:]
    snr = cfg.channel.snr_db if args.snr is None else args.snr
    spec = ChannelSpec(cfg.channel.kind, snr, cfg.channel.rician_k, cfg.channel.seed, cfg.channel.equalize)
    stem = Path(args.image).stem
    sym_path = _out_file(cfg, args.symbols or f"{stem}.sjsc")
    img_path = _out_file(cfg, args.output or f"{stem}_recon.png")
    with torch.no_grad():
        z = model.encode(x, _snr_tensor(model, snr))
        zhat = transmit(z, spec, nonce=0)
        write_symbols(sym_path, SymbolFrame(zhat[0], model.config.T, h, w, snr))
        # decode what the file holds, so receive reproduces this image exactly
        frame = read_symbols(sym_path)
        xhat = model.decode(frame.symbols[None], h, w, _snr_tensor(model, frame.snr_db))
    _save_image(xhat[0], img_path)
    n = x[0].numel()
    print(f"k = {frame.k}")
    print(f"n = {n}")
    print(f"ratio = {ratio_string(model)}")
    print(f"PSNR = {psnr(x[0], xhat[0]):.3f} dB")
    print(f"symbols: {sym_path}")
    print(f"image: {img_path}")
    return EXIT_OK


def cmd_receive(args) -> int:
    cfg = _config(args)
    ckpt = _load_model_checkpoint(args.checkpoint)
    model = ckpt.model.eval()
    if not Path(args.symbols).is_file():
        raise ConfigurationError(f"symbols: {args.symbols} does not exist")
    frame = read_symbols(args.symbols)
    if frame.T != model.config.T or frame.k != model.config.num_symbols(frame.height, frame.width):
        raise CheckpointError(
            f"{args.symbols}: T={frame.T}, k={frame.k} does not match the checkpoint (T={model.config.T})"
        )
    snr = frame.snr_db if math.isfinite(frame.snr_db) else cfg.channel.snr_db
    with torch.no_grad():
        xhat = model.decode(frame.symbols[None], frame.height, frame.width, _snr_tensor(model, snr))
    img_path = _out_file(cfg, args.output or f"{Path(args.symbols).stem}_recon.png")
    _save_image(xhat[0], img_path)
    print(f"image: {img_path}")
    return EXIT_OK


def cmd_info(args) -> int:
    if args.checkpoint:
        model = _load_model_checkpoint(args.checkpoint).model
        config, conditioning = model.config, model.conditioning
    else:
        config, conditioning, model = _config(args).model, args.conditioning or "none", None
    height, width = args.height, args.width
    if args.traced:
        if model is None:
            from sijscc.codec import build_model

            model = build_model(config, 0, conditioning)
        report = trace_complexity(model, height, width)
    else:
        report = count_complexity(config, height, width, conditioning)
    print(f"model N={config.N} T={config.T} conditioning={conditioning} input {width}x{height}")
    print(report.format_table())
    print(f"params: {report.params / 1e6:.3f} M")
    print(f"MACs: {report.macs / 1e9:.2f} G")
    dev = reference_deviation(config, report)
    if dev is not None:
        print(f"reference params: {dev['reference_params_M']:.2f} M (deviation {dev['params_deviation']:+.1%})")
        if "macs_deviation" in dev:
            print(f"reference MACs: {dev['reference_GMACs']:.2f} G (deviation {dev['macs_deviation']:+.1%})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from sijscc.snr_conditioning import ablation_run
    from sijscc.evaluation import write_metrics_csv
    from sijscc.training import PatchDataset, ingest_dataset, load_folder, save_checkpoint

    cfg = _config(args)
    cfg.require_paths("train_data", "eval_data", *(["val_data"] if cfg.paths.val_data else []))
    tc = cfg.train
    data = ingest_dataset(cfg.paths.train_data, tc.crop, tc.seed, tc.batch)
    val = None
    if cfg.paths.val_data:
        _, raw = load_folder(cfg.paths.val_data, min_size=tc.crop)
        val = PatchDataset(raw, tc.crop, tc.seed, tc.batch).fixed_patches(tc.val_patches, tc.seed)
    result = ablation_run(
        cfg.ablate.modes,
        tc,
        cfg.ablate.snrs,
        cfg.model,
        data,
        cfg.paths.eval_data,
        val_images=val,
        mismatch_snr_db=cfg.ablate.mismatch_snr_db,
        eval_seed=cfg.channel.seed,
        log_every=1,
    )
    for label, recs in result.records.items():
        write_metrics_csv(recs, _out_file(cfg, f"ablation/{label.replace('/', '_').replace('@', '_')}.csv"))
    for mode, ckpt in result.checkpoints.items():
        save_checkpoint(ckpt, _out_file(cfg, f"ablation/{mode}.ckpt"))
    result.write_csv(_out_file(cfg, "comparison.csv"))
    meta = {"config": cfg.to_dict()}
    result.plot(_out_file(cfg, "comparison.png"), meta)
    summary = result.summary()
    _write_json(_out_file(cfg, "ablation_summary.json"), {"gain_over_none": summary, **meta})
    for row in result.rows():
        print(f"{row['mode']:<28} {row['snr_db']:>6.1f} dB  PSNR {row['psnr_db']:.3f}  SSIM {row['ssim']:.4f}")
    for label, s in summary.items():
        if s["max_gain_db"] is not None:
            print(f"{label}: largest PSNR gain over 'none' {s['max_gain_db']:+.3f} dB")
    return EXIT_OK


def cmd_plot(args) -> int:
    from sijscc.evaluation import plot_curves, plot_psnr_vs_snr, read_metrics_csv

    cfg = _config(args)
    src = Path(args.csv)
    if not src.is_file():
        raise ConfigurationError(f"csv: {src} does not exist")
    with src.open(newline="") as fh:
        header = next(csv.reader(fh), [])
    out = _out_file(cfg, args.output or f"{src.stem}.png")
    meta = {"source": src.name}
    if "mode" in header:
        curves: dict[str, list[tuple[float, float]]] = {}
        with src.open(newline="") as fh:
            for row in csv.DictReader(fh):
                curves.setdefault(row["mode"], []).append((float(row["snr_db"]), float(row["psnr_db"])))
        plot_curves(curves, out, "Conditioning ablation", metadata=meta)
    elif "psnr_db" in header and "ratio" in header:
        plot_psnr_vs_snr(read_metrics_csv(src), out, meta)
    else:
        raise ConfigurationError(f"{src}: neither a metrics nor a comparison CSV (header {header})")
    print(f"plot: {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run configuration")
    common.add_argument(
        "--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field (repeatable)"
    )
    common.add_argument("--out-dir", help="output directory (overrides $SIJSCC_OUT_DIR and paths.out_dir)")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results")

    p = argparse.ArgumentParser(prog="sijscc", description="SNR-independent deep JSCC image transmission")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("config_path", nargs="?", help="run configuration (same as --config)")
    t.add_argument("--resume", help="continue from a checkpoint written by train")
    t.add_argument("--conditioning", choices=("none", "decoder_only", "both"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM sweep over channel SNRs")
    e.add_argument("checkpoint")
    e.add_argument("data", nargs="?", help="image folder (default paths.eval_data)")
    e.add_argument("--snrs", help="comma-separated SNRs in dB (default eval.snrs)")
    e.set_defaults(func=cmd_eval)

    tx = sub.add_parser("transmit", parents=[common], help="encode one image, pass it through the channel")
    tx.add_argument("checkpoint")
    tx.add_argument("image")
    tx.add_argument("--snr", type=float, help="channel SNR in dB (default channel.snr_db)")
    tx.add_argument("--symbols", help="symbol file name inside out_dir")
    tx.add_argument("--output", help="reconstruction PNG name inside out_dir")
    tx.set_defaults(func=cmd_transmit)

    rx = sub.add_parser("receive", parents=[common], help="decode a symbol file")
    rx.add_argument("checkpoint")
    rx.add_argument("symbols")
    rx.add_argument("--output", help="reconstruction PNG name inside out_dir")
    rx.set_defaults(func=cmd_receive)

    i = sub.add_parser("info", parents=[common], help="parameter and MAC report")
    i.add_argument("--checkpoint")
    i.add_argument("--height", type=int, default=512)
    i.add_argument("--width", type=int, default=768)
    i.add_argument("--conditioning", choices=("none", "decoder_only", "both"))
    i.add_argument("--traced", action="store_true", help="measure a built model instead of the closed form")
    i.set_defaults(func=cmd_info)

    a = sub.add_parser("ablate", parents=[common], help="train and compare the conditioning modes")
    a.add_argument("config_path", nargs="?", help="run configuration (same as --config)")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", parents=[common], help="plot a metrics or comparison CSV")
    pl.add_argument("csv")
    pl.add_argument("--output", help="image name inside out_dir")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if getattr(args, "config_path", None):
        if args.config and args.config != args.config_path:
            print("error: give the config either positionally or with --config", file=sys.stderr)
            return EXIT_USAGE
        args.config = args.config_path
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, IngestionError, ShapeError, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
