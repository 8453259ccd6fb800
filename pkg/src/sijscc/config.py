"""Run configuration: one YAML document with ``model``, ``train``, ``channel``,
``paths``, ``eval`` and ``ablate`` sections. Every field has a default;
command-line ``--set section.key=value`` overrides are applied on top. The
output directory is taken from ``--out-dir``, else ``$SIJSCC_OUT_DIR``, else
``paths.out_dir``. Channel noise is seeded by ``channel.seed``.

Example::

    model: {N: 64, T: 16}
    train: {crop: 64, batch: 16, max_steps: 2000, snr_low: -5, snr_high: 20}
    channel: {kind: awgn, snr_db: 10, seed: 0}
    paths: {train_data: data/train, val_data: data/val, eval_data: data/kodak, out_dir: runs/desk}
    eval: {snrs: [1, 4, 7, 13, 19], dataset_id: kodak}
    ablate: {modes: [both, decoder_only, none], snrs: [-5, 0, 5, 10, 15, 20]}
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from sijscc.channel import ChannelSpec
from sijscc.codec import CONDITIONING_MODES, ModelConfig
from sijscc.errors import ConfigurationError
from sijscc.training import TrainConfig

OUT_DIR_ENV = "SIJSCC_OUT_DIR"
SECTIONS = ("model", "train", "channel", "paths", "eval", "ablate")


@dataclass
class Paths:
    train_data: str | None = None
    val_data: str | None = None
    eval_data: str | None = None
    out_dir: str = "runs/default"


@dataclass
class EvalOptions:
    snrs: list[float] = field(default_factory=lambda: [1.0, 4.0, 7.0, 13.0, 19.0])
    dataset_id: str = ""
    batch_size: int = 8


@dataclass
class AblateOptions:
    modes: list[str] = field(default_factory=lambda: list(reversed(CONDITIONING_MODES)))
    snrs: list[float] = field(default_factory=lambda: [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0])
    mismatch_snr_db: float | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    paths: Paths = field(default_factory=Paths)
    eval: EvalOptions = field(default_factory=EvalOptions)
    ablate: AblateOptions = field(default_factory=AblateOptions)

    # set from a command-line flag; wins over the environment and the file
    out_dir_flag: str | None = field(default=None, repr=False, compare=False)

    @property
    def out_dir(self) -> Path:
        return Path(self.out_dir_flag or os.environ.get(OUT_DIR_ENV) or self.paths.out_dir)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "channel": self.channel.to_dict(),
            "paths": asdict(self.paths),
            "eval": asdict(self.eval),
            "ablate": asdict(self.ablate),
        }

    def require_paths(self, *keys: str) -> None:
        """Every named path must be set and exist; ``out_dir`` is created."""
        for key in keys:
            value = getattr(self.paths, key)
            if not value:
                raise ConfigurationError(f"paths.{key}: required but not set")
            if not Path(value).exists():
                raise ConfigurationError(f"paths.{key}: {value} does not exist")
        self.out_dir.mkdir(parents=True, exist_ok=True)


def _parse_scalar(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _apply_overrides(raw: dict, overrides: list[str]) -> None:
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in SECTIONS or not name:
            raise ConfigurationError(f"override {item!r}: expected section.key=value with section in {SECTIONS}")
        raw.setdefault(section, {})[name] = _parse_scalar(value)


def _section(cls, values, section: str):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigurationError(f"{section}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigurationError(f"{section}.{key}: unknown field (known: {', '.join(sorted(known))})")
    try:
        return cls(**values)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{section}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{section}: {exc}") from exc


def parse_run_config(raw: dict | None, overrides: list[str] | None = None) -> RunConfig:
    raw = dict(raw or {})
    for key in raw:
        if key not in SECTIONS:
            raise ConfigurationError(f"{key}: unknown section (known: {', '.join(SECTIONS)})")
    _apply_overrides(raw, overrides or [])
    cfg = RunConfig(
        model=_section(ModelConfig, raw.get("model"), "model"),
        train=_section(TrainConfig, raw.get("train"), "train"),
        channel=_section(ChannelSpec, raw.get("channel"), "channel"),
        paths=_section(Paths, raw.get("paths"), "paths"),
        eval=_section(EvalOptions, raw.get("eval"), "eval"),
        ablate=_section(AblateOptions, raw.get("ablate"), "ablate"),
    )
    for mode in cfg.ablate.modes:
        if mode not in CONDITIONING_MODES:
            raise ConfigurationError(f"ablate.modes: unknown mode {mode!r}")
    return cfg


def load_run_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"{path}: cannot read config ({exc.strerror})") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise ConfigurationError(f"{path}:{where} YAML parse error: {getattr(exc, 'problem', exc)}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    return parse_run_config(raw, overrides)
