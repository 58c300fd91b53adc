"""Flat ``key = value`` run configuration files.

Values are typed by their literal form: ``true``/``false``, integers, floats,
otherwise strings (optionally quoted). ``#`` starts a comment.
"""
from __future__ import annotations

from dataclasses import asdict, fields
from pathlib import Path

from .losses import LossConfig, LossWeights
from .model import ModelConfig
from .scene import GenerationConfig
from .trainer import TrainConfig

WEIGHT_KEYS = {"lambda_bce": "bce", "lambda_dice": "dice", "lambda_smooth_l1": "smooth_l1", "lambda_giou": "giou"}


class ConfigFileError(ValueError):
    pass


def parse_value(text: str):
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_config(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigFileError(f"line {lineno}: empty key")
        out[key] = parse_value(value)
    return out


def read_config(path) -> dict:
    return parse_config(Path(path).read_text())


def dump_config(d: dict) -> str:
    return "".join(f"{k} = {format_value(d[k])}\n" for k in sorted(d))


def flatten_train_config(cfg: TrainConfig) -> dict:
    flat = {k: v for k, v in asdict(cfg).items() if k not in ("model", "weights", "loss")}
    flat.update(asdict(cfg.model))
    flat.update({k: getattr(cfg.weights, attr) for k, attr in WEIGHT_KEYS.items()})
    flat.update(asdict(cfg.loss))
    return flat


def train_config_from_flat(d: dict) -> TrainConfig:
    known_train = {f.name for f in fields(TrainConfig)} - {"model", "weights", "loss"}
    known_model = {f.name for f in fields(ModelConfig)}
    known_loss = {f.name for f in fields(LossConfig)}
    unknown = set(d) - known_train - known_model - known_loss - set(WEIGHT_KEYS)
    if unknown:
        raise ConfigFileError(f"unknown training keys: {sorted(unknown)}")
    model = ModelConfig(**{k: v for k, v in d.items() if k in known_model})
    weights = LossWeights(**{attr: d[k] for k, attr in WEIGHT_KEYS.items() if k in d})
    loss = LossConfig(**{k: v for k, v in d.items() if k in known_loss})
    return TrainConfig(model=model, weights=weights, loss=loss, **{k: v for k, v in d.items() if k in known_train})


def generation_config_from_flat(d: dict) -> GenerationConfig:
    known = {f.name for f in fields(GenerationConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigFileError(f"unknown generation keys: {sorted(unknown)}")
    d = dict(d)
    if d.get("thing_categories") == "none":
        d["thing_categories"] = None
    elif isinstance(d.get("thing_categories"), str):
        d["thing_categories"] = tuple(int(x) for x in d["thing_categories"].split(",") if x.strip())
    elif isinstance(d.get("thing_categories"), int):
        d["thing_categories"] = (d["thing_categories"],)
    return GenerationConfig(**d)
