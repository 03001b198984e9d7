"""Command-line entry point: ``glare {synth,train,eval,ablate,infer}``.

Settings are resolved in increasing precedence: built-in defaults, the
``--config`` file, ``--set section.key=value`` overrides, dedicated flags.
The config file is INI-style with sections ``[run]``, ``[model]``,
``[train]``, ``[synth]``, ``[ablate]``; unknown keys are usage errors. The
fully resolved file is written next to every output as ``config.ini`` and
can be passed back through ``--config`` to rerun the command.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import __version__
from .errors import GlareError, GlareIOError, SchemaError, UsageError
from .features import FEATURE_MODES, Dataset, load_dataset, read_samples, save_dataset, synth_dataset
from .model import GlareConfig, GlareModel, checkpoint_dumps, checkpoint_loads, param_count
from .numerics import softmax
from .report import (ablation_rows, ablation_table, confusion_csv, jsonl_dumps, metrics_table,
                     write_text)
from .train import TrainConfig, ablate_features, ablate_quotient, ablate_regions, evaluate, train

log = logging.getLogger("glare")


@dataclass
class RunOptions:
    seed: int = 0
    data: str = ""
    out: str = "out"
    checkpoint: str = ""
    split: str = "test"


@dataclass
class SynthOptions:
    classes: int = 7
    per_class: int = 200
    landmarks: int = 68
    noise: float = 0.05

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("synth.classes must be >= 2")
        if self.per_class < 1:
            raise ValueError("synth.per_class must be >= 1")
        if self.landmarks < 10:
            raise ValueError("synth.landmarks must be >= 10")
        if self.noise < 0:
            raise ValueError("synth.noise must be non-negative")


@dataclass
class AblateOptions:
    k_list: str = "5..10"
    modes: str = ",".join(FEATURE_MODES)
    seeds: int = 3

    def __post_init__(self):
        if self.seeds < 1:
            raise ValueError("ablate.seeds must be >= 1")
        parse_k_list(self.k_list)
        bad = [m for m in split_list(self.modes) if m not in FEATURE_MODES]
        if bad:
            raise ValueError(f"unknown feature modes {bad}")


# the run seed drives training and k-means, so these are not settable directly
_DERIVED = {("train", "seed"), ("model", "kmeans_seed")}


@dataclass
class AppConfig:
    run: RunOptions = field(default_factory=RunOptions)
    model: GlareConfig = field(default_factory=GlareConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthOptions = field(default_factory=SynthOptions)
    ablate: AblateOptions = field(default_factory=AblateOptions)
    explicit: set = field(default_factory=set)  # "section.key" names set by the user

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.run.seed)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section in ("run", "model", "train", "synth", "ablate"):
            obj = getattr(self, section)
            cp[section] = {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)
                           if (section, f.name) not in _DERIVED}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format_value(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(section: str, key: str, default, text: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"{section}.{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def resolve_config(config_path: str | None = None, overrides: list[str] | None = None,
                   flags: dict[str, str] | None = None) -> AppConfig:
    """Merge defaults, a config file, ``key=value`` overrides and flag values."""
    values: dict[str, dict[str, str]] = {}

    def put(dotted: str, value: str, origin: str):
        section, _, key = dotted.partition(".")
        if not key:
            raise UsageError(f"{origin}: expected section.key, got {dotted!r}")
        values.setdefault(section, {})[key] = value

    if config_path:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(config_path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise GlareIOError(f"cannot read config {config_path}: {exc}") from exc
        except configparser.Error as exc:
            raise UsageError(f"malformed config {config_path}: {exc}") from exc
        for section in cp.sections():
            for key, value in cp[section].items():
                put(f"{section}.{key}", value, config_path)
    for item in overrides or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        put(name.strip(), value, "--set")
    for name, value in (flags or {}).items():
        if value is not None:
            put(name, str(value), "flag")

    app = AppConfig()
    for section, kv in values.items():
        if section not in ("run", "model", "train", "synth", "ablate"):
            raise UsageError(f"unknown config section [{section}]")
        current = getattr(app, section)
        defaults = {f.name: getattr(current, f.name) for f in fields(current)}
        updates = {}
        for key, text in kv.items():
            if key not in defaults or (section, key) in _DERIVED:
                raise UsageError(f"unknown config key {section}.{key}")
            updates[key] = _coerce(section, key, defaults[key], text)
            app.explicit.add(f"{section}.{key}")
        try:
            setattr(app, section, replace(current, **updates))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return app


def parse_k_list(text: str) -> list[int]:
    """``"5..10"`` (inclusive range) or ``"5,8,9"``."""
    out = []
    try:
        for part in split_list(text):
            if ".." in part:
                lo, hi = part.split("..", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise ValueError(f"bad region list {text!r}") from None
    if not out:
        raise ValueError("empty region list")
    return out


def split_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


# --------------------------------------------------------------------------
# commands

def _ensure_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise GlareIOError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _echo_config(app: AppConfig, path: str) -> None:
    write_text(path, app.to_ini())


def _require(value: str, what: str) -> str:
    if not value:
        raise UsageError(f"missing {what}")
    return value


def _load_data(app: AppConfig) -> Dataset:
    return load_dataset(_require(app.run.data, "dataset path (--data or run.data)"))


def _model_config_for(app: AppConfig, dataset: Dataset) -> GlareConfig:
    cfg = app.model
    if "model.n_classes" not in app.explicit:
        cfg = replace(cfg, n_classes=dataset.n_classes)
    elif cfg.n_classes != dataset.n_classes:
        raise UsageError(f"model.n_classes={cfg.n_classes} but the dataset has {dataset.n_classes} classes")
    return cfg


def _load_checkpoint(path: str) -> GlareModel:
    try:
        with open(_require(path, "checkpoint path (--checkpoint)"), encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise GlareIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_loads(text)


def cmd_synth(app: AppConfig) -> int:
    s = app.synth
    ds = synth_dataset(s.classes, s.per_class, s.landmarks, s.noise, seed=app.run.seed)
    path = app.run.out
    parent = os.path.dirname(path)
    if parent:
        _ensure_dir(parent)
    save_dataset(ds, path)
    _echo_config(app, path + ".config.ini")
    print(f"wrote {len(ds.samples)} samples to {path}")
    return 0


def cmd_train(app: AppConfig) -> int:
    ds = _load_data(app)
    cfg = _model_config_for(app, ds)
    tc = app.train_config()
    print(f"param_count {param_count(cfg)}")
    out = _ensure_dir(app.run.out)
    _echo_config(replace(app, model=cfg), os.path.join(out, "config.ini"))
    res = train(ds, cfg, tc)
    write_text(os.path.join(out, "checkpoint.json"), checkpoint_dumps(res.model))
    write_text(os.path.join(out, "history.jsonl"), jsonl_dumps(res.history))
    print(f"best epoch {res.best_epoch}: val accuracy {res.best_val_accuracy:.4f}")
    return 0


def _check_against_checkpoint(app: AppConfig, model: GlareModel) -> None:
    """Explicit model settings must agree with what the checkpoint was trained with."""
    saved = model.config.to_dict()
    for name in sorted(app.explicit):
        section, key = name.split(".", 1)
        if section == "model" and getattr(app.model, key) != saved[key]:
            raise SchemaError(f"model.{key}={getattr(app.model, key)!r} does not match "
                              f"the checkpoint ({saved[key]!r})")


def cmd_eval(app: AppConfig) -> int:
    model = _load_checkpoint(app.run.checkpoint)
    _check_against_checkpoint(app, model)
    ds = _load_data(app)
    if ds.n_classes != model.config.n_classes:
        raise SchemaError(f"checkpoint predicts {model.config.n_classes} classes, dataset has {ds.n_classes}")
    metrics = evaluate(model, ds, app.run.split, app.train.batch_size, app.run.seed)
    out = _ensure_dir(app.run.out)
    _echo_config(replace(app, model=model.config), os.path.join(out, "config.ini"))
    write_text(os.path.join(out, "metrics.json"), json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    table = metrics_table(metrics)
    write_text(os.path.join(out, "metrics.txt"), table)
    write_text(os.path.join(out, "confusion.csv"), confusion_csv(metrics))
    print(table, end="")
    return 0


def cmd_ablate(app: AppConfig, kind: str) -> int:
    ds = _load_data(app)
    cfg = _model_config_for(app, ds)
    tc = app.train_config()
    seeds = [app.run.seed + i for i in range(app.ablate.seeds)]
    print(f"param_count {param_count(cfg)}")
    out = _ensure_dir(app.run.out)
    _echo_config(app, os.path.join(out, "config.ini"))
    if kind == "regions":
        report = ablate_regions(ds, parse_k_list(app.ablate.k_list), seeds, cfg, tc, app.run.split)
    elif kind == "features":
        report = ablate_features(ds, split_list(app.ablate.modes), seeds, cfg, tc, app.run.split)
    elif kind == "quotient":
        report = ablate_quotient(ds, seeds, cfg, tc, app.run.split)
    else:
        raise UsageError(f"unknown ablation {kind!r}")
    table = ablation_table(report)
    write_text(os.path.join(out, f"ablation_{kind}.txt"), table)
    write_text(os.path.join(out, f"ablation_{kind}.jsonl"), jsonl_dumps(ablation_rows(report)))
    print(table, end="")
    return 0


def cmd_infer(app: AppConfig) -> int:
    model = _load_checkpoint(app.run.checkpoint)
    _check_against_checkpoint(app, model)
    _, samples = read_samples(_require(app.run.data, "input path (--input or run.data)"), require_labels=False)
    probs = softmax(model.logits(samples, app.train.batch_size))
    rows = [{"id": s.id, "predicted": int(np.argmax(p)), "probabilities": p.tolist()}
            for s, p in zip(samples, probs)]
    out = _ensure_dir(app.run.out)
    _echo_config(replace(app, model=model.config), os.path.join(out, "config.ini"))
    write_text(os.path.join(out, "predictions.jsonl"), jsonl_dumps(rows))
    print(f"wrote {len(rows)} predictions to {os.path.join(out, 'predictions.jsonl')}")
    return 0


# --------------------------------------------------------------------------
# argument parsing

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="run seed (run.seed)")
    p.add_argument("--out", help="output directory; for synth, the dataset file (run.out)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset JSONL file (run.data)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--k-regions", type=int)
    p.add_argument("--feature-mode", choices=FEATURE_MODES)


# flag destination -> config key
_FLAG_KEYS = {
    "seed": "run.seed", "out": "run.out", "data": "run.data", "input": "run.data",
    "checkpoint": "run.checkpoint", "split": "run.split",
    "classes": "synth.classes", "per_class": "synth.per_class", "landmarks": "synth.landmarks",
    "noise": "synth.noise",
    "epochs": "train.epochs", "lr": "train.lr", "batch_size": "train.batch_size",
    "k_regions": "model.k_regions", "feature_mode": "model.feature_mode",
    "k": "ablate.k_list", "modes": "ablate.modes", "seeds": "ablate.seeds",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glare", description="Quotient-graph landmark expression classifier.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic landmark dataset")
    _common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--landmarks", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _training_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split")

    p = sub.add_parser("ablate", help="run an ablation sweep")
    p.add_argument("kind", choices=("regions", "features", "quotient"))
    _common(p)
    _training_flags(p)
    p.add_argument("--split")
    p.add_argument("--k", help="region counts, e.g. 5..10 or 5,8,9")
    p.add_argument("--modes", help="comma-separated feature modes")
    p.add_argument("--seeds", type=int, help="number of seeds, counting up from --seed")

    p = sub.add_parser("infer", help="predict classes for a sample file")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        flags = {key: getattr(args, dest) for dest, key in _FLAG_KEYS.items() if hasattr(args, dest)}
        app = resolve_config(args.config, args.set, flags)
        if args.command == "synth":
            return cmd_synth(app)
        if args.command == "train":
            return cmd_train(app)
        if args.command == "eval":
            return cmd_eval(app)
        if args.command == "ablate":
            return cmd_ablate(app, args.kind)
        return cmd_infer(app)
    except GlareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
