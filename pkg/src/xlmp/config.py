"""JSON run configuration: sections, defaults, exhaustive validation and echo-back."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .encoder import PRESETS, EncoderConfig
from .training import TRAIN_PRESETS, TrainConfig

SECTIONS = ("model", "train", "infonce", "data", "eval", "seed")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class DataConfig:
    corpus_dir: str = "corpus"
    min_freq: int = 1


@dataclass(frozen=True)
class EvalConfig:
    layer: int = -1  # -1 selects the last layer
    include_prompt_positions: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    temperature: float = 0.05
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "train": asdict(self.train),
            "infonce": {"temperature": self.temperature},
            "data": asdict(self.data),
            "eval": asdict(self.eval),
            "seed": self.seed,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _section(cls, raw, name: str, errors: list[str], base=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{name} must be an object")
        return base if base is not None else cls()
    names = {f.name for f in fields(cls)}
    for k in sorted(set(raw) - names):
        errors.append(f"unknown key {name}.{k}")
    typed = {f.name: str(f.type) for f in fields(cls)}
    kwargs = {}
    for k, v in raw.items():
        if k not in names:
            continue
        t = typed[k]
        if t == "int" and (not isinstance(v, int) or isinstance(v, bool)):
            errors.append(f"{name}.{k} must be an integer")
        elif t == "float" and (not isinstance(v, (int, float)) or isinstance(v, bool)):
            errors.append(f"{name}.{k} must be a number")
        elif t == "bool" and not isinstance(v, bool):
            errors.append(f"{name}.{k} must be true or false")
        elif t == "str" and not isinstance(v, str):
            errors.append(f"{name}.{k} must be a string")
        else:
            kwargs[k] = v  # badly typed values keep the default so later checks still run
    try:
        return replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as e:
        errors.append(f"{name}: {e}")
        return base if base is not None else cls()


def parse_run_config(raw: dict) -> RunConfig:
    """Build a RunConfig, collecting every problem before raising."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a JSON object"])
    for k in sorted(set(raw) - set(SECTIONS)):
        errors.append(f"unknown section {k!r}")

    model_raw = raw.get("model") or {}
    preset_name = model_raw.get("preset", "tiny") if isinstance(model_raw, dict) else "tiny"
    if preset_name not in PRESETS:
        errors.append(f"model.preset must be one of {sorted(PRESETS)}")
        preset_name = "tiny"
    model = _section(EncoderConfig, model_raw, "model", errors, PRESETS[preset_name])

    train_raw = raw.get("train") or {}
    tpreset = train_raw.get("preset", preset_name) if isinstance(train_raw, dict) else preset_name
    if tpreset not in TRAIN_PRESETS:
        errors.append(f"train.preset must be one of {sorted(TRAIN_PRESETS)}")
        tpreset = "tiny"
    train = _section(TrainConfig, train_raw, "train", errors, TRAIN_PRESETS[tpreset])

    infonce = raw.get("infonce") or {}
    temperature = 0.05
    if not isinstance(infonce, dict):
        errors.append("infonce must be an object")
    else:
        for k in sorted(set(infonce) - {"temperature"}):
            errors.append(f"unknown key infonce.{k}")
        temperature = infonce.get("temperature", 0.05)
        if not isinstance(temperature, (int, float)) or isinstance(temperature, bool) or not temperature > 0:
            errors.append("infonce.temperature must be a positive number")
            temperature = 0.05

    data = _section(DataConfig, raw.get("data"), "data", errors)
    ev = _section(EvalConfig, raw.get("eval"), "eval", errors)
    seed = raw.get("seed", train.seed)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append("seed must be a non-negative integer")
        seed = 0
    train = replace(train, seed=seed)

    errors.extend(model.validate())
    errors.extend(train.validate())
    if data.min_freq < 1:
        errors.append("data.min_freq must be >= 1")
    if ev.layer < -1 or ev.layer > model.num_layers:
        errors.append(f"eval.layer must lie in -1..{model.num_layers}")
    if errors:
        raise ConfigError(errors)
    return RunConfig(model=model, train=train, temperature=float(temperature), data=data, eval=ev, seed=seed)


def load_run_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON ({e})"]) from None
    return parse_run_config(raw)


def write_json(path: str | os.PathLike, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
