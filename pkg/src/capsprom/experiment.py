"""Experiment config files.

Schema (YAML)::

    dataset: Bacillus        # registry key
    model: capsprom          # capsprom | cnnprom, --model overrides
    k: 5
    seed: 0                  # --seed overrides
    subsample: null          # optional stratified subsample size
    data_dir: null           # optional, else --data-dir / $CAPSPROM_DATA
    train: {lr: 0.001, batch_size: 32, max_epochs: 30, patience: 5}
    model_options: {}        # CapsProm geometry/loss keys, or a CNN config

For ``cnnprom`` the options may hold a full CNN config (``layers``,
``input_length``), a ``config_file`` path, or nothing, in which case the
shipped per-dataset config is used.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .capsnet import CapsPromConfig, MarginLossConfig
from .cnn import CnnConfig, InvalidConfigError
from .data import REGISTRY
from .train import MODEL_KINDS, TrainConfig

TOP_KEYS = {"dataset", "model", "k", "seed", "subsample", "data_dir", "train", "model_options"}
CAPS_KEYS = ({f.name for f in fields(CapsPromConfig)} - {"seq_len"}) | {f.name for f in fields(MarginLossConfig)}
CNN_KEYS = {"layers", "input_length", "input_channels", "name", "config_file"}


class ConfigError(ValueError):
    """Invalid experiment config; the message starts with the offending field path."""


@dataclass
class Experiment:
    dataset: str
    model: str = "capsprom"
    k: int = 5
    seed: int = 0
    subsample: int | None = None
    data_dir: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    model_options: dict = field(default_factory=dict)

    def options_for_model(self) -> dict:
        """Model options in the form ``train.make_model`` expects."""
        if self.model == "capsprom":
            return dict(self.model_options)
        opts = dict(self.model_options)
        if "config_file" in opts:
            return CnnConfig.load(opts["config_file"]).to_dict()
        if "layers" in opts:
            return CnnConfig.from_dict(opts).to_dict()
        return CnnConfig.for_dataset(self.dataset).to_dict()

    def to_dict(self) -> dict:
        return asdict(self)


def _check_int(path: str, v, minimum: int) -> int:
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise ConfigError(f"{path}: expected an integer >= {minimum}, got {v!r}")
    return v


def parse(d: dict, model: str | None = None, seed: int | None = None, base_dir=None) -> Experiment:
    if not isinstance(d, dict):
        raise ConfigError("<root>: expected a mapping")
    unknown = set(d) - TOP_KEYS
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key (allowed: {', '.join(sorted(TOP_KEYS))})")
    if "dataset" not in d:
        raise ConfigError("dataset: required")
    if d["dataset"] not in REGISTRY:
        raise ConfigError(f"dataset: unknown key {d['dataset']!r}; valid keys: {', '.join(sorted(REGISTRY))}")
    kind = model or d.get("model", "capsprom")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"model: expected one of {MODEL_KINDS}, got {kind!r}")
    k = _check_int("k", d.get("k", 5), 2)
    seed = _check_int("seed", d.get("seed", 0) if seed is None else seed, 0)
    subsample = d.get("subsample")
    if subsample is not None:
        _check_int("subsample", subsample, k)

    train_d = d.get("train") or {}
    if not isinstance(train_d, dict):
        raise ConfigError("train: expected a mapping")
    known = {f.name for f in fields(TrainConfig)} - {"seed"}
    for key in train_d:
        if key not in known:
            raise ConfigError(f"train.{key}: unknown key")
    try:
        train = TrainConfig(**{**train_d, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train.{exc}") from None

    opts = d.get("model_options") or {}
    if not isinstance(opts, dict):
        raise ConfigError("model_options: expected a mapping")
    opts = dict(opts)
    allowed, other = (CAPS_KEYS, CNN_KEYS) if kind == "capsprom" else (CNN_KEYS, CAPS_KEYS)
    for key in opts:
        if key not in allowed:
            hint = f" ({'CapsProm' if kind == 'cnnprom' else 'CNN'}-only key)" if key in other else ""
            raise ConfigError(f"model_options.{key}: not valid for model {kind}{hint}")
    if kind == "cnnprom" and "config_file" in opts and base_dir is not None:
        p = Path(opts["config_file"])
        opts["config_file"] = str(p if p.is_absolute() else Path(base_dir) / p)
    exp = Experiment(d["dataset"], kind, k, seed, subsample, d.get("data_dir"), train, opts)
    # build the model config once so geometry errors surface here
    try:
        if kind == "capsprom":
            loss = {x: opts[x] for x in opts if x in {f.name for f in fields(MarginLossConfig)}}
            MarginLossConfig(**loss)
            CapsPromConfig(seq_len=REGISTRY[exp.dataset].bp, **{x: v for x, v in opts.items() if x not in loss})
        else:
            cnn = exp.options_for_model()
            if cnn["input_length"] != REGISTRY[exp.dataset].bp:
                raise ValueError(f"input_length {cnn['input_length']} does not match the {REGISTRY[exp.dataset].bp} bp "
                                 f"sequences of {exp.dataset}")
    except (ValueError, TypeError, OSError, InvalidConfigError) as exc:
        raise ConfigError(f"model_options: {exc}") from None
    return exp


def load(path, model: str | None = None, seed: int | None = None) -> Experiment:
    path = Path(path)
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<root>: {path} is not valid YAML: {exc}") from None
    return parse(d or {}, model=model, seed=seed, base_dir=path.parent)
