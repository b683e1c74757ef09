"""JSON experiment configuration.

Every section is optional and falls back to the toy-ti preset on the
synthetic-quadrant task::

    {
      "model": {"preset": "toy-ti", "num_layers": 6},
      "wiring": "mpvg",
      "data": {"kind": "synthetic-quadrant", "seed": 0},
      "optim": {"epochs": 20, "lr": 5e-4},
      "seed": 0,
      "out_dir": "runs/mpvg"
    }

``wiring`` is a preset string or, for gradient checks, a list of them.
Unknown keys anywhere are rejected. Image geometry left out of ``data``
follows the model. Without an explicit ``preset`` or ``num_classes`` the
model head is sized for the dataset kind (4 for synthetic-quadrant).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from pewire.checkpoint import canonical_json
from pewire.data import DatasetSpec
from pewire.errors import ConfigError
from pewire.model import DEIT_B, DEIT_S, DEIT_TI, TOY_TI, ModelConfig
from pewire.train import TrainConfig
from pewire.wiring_config import WiringConfig, variant_preset

MODEL_PRESETS = {"toy-ti": TOY_TI, "deit-ti": DEIT_TI, "deit-s": DEIT_S, "deit-b": DEIT_B}
DATASET_CLASSES = {"synthetic-quadrant": 4, "mnist-idx": 10, "cifar10-binary": 10}
GEOMETRY = ("image_size", "channels", "patch_size")
TOP_KEYS = ("model", "wiring", "data", "optim", "gradcheck", "seed", "out_dir")


@dataclass(frozen=True)
class GradCheckSettings:
    step: float = 1e-3
    tol: float = 1e-3
    batch_size: int = 2
    richardson: bool = True
    max_params: int = 200_000


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"'{section}' must be a JSON object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")


def _check_types(cls, section: str, values: dict) -> None:
    """Scalar fields must match the JSON type of their default."""
    defaults = {f.name: f.default for f in fields(cls)}
    optional = {f.name for f in fields(cls) if "None" in str(f.type)}
    for key, value in values.items():
        default = defaults.get(key)
        if value is None and key in optional:
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            continue
        if not ok:
            raise ConfigError(f"'{section}.{key}' must be {type(default).__name__}, got {json.dumps(value)}")


def _build(cls, section: str, values: dict):
    _check_types(cls, section, values)
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"'{section}': {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{section}': {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    wiring: tuple[WiringConfig, ...]
    data: DatasetSpec
    optim: TrainConfig = field(default_factory=TrainConfig)
    gradcheck: GradCheckSettings = field(default_factory=GradCheckSettings)
    seed: int = 0
    out_dir: str | None = None

    @property
    def primary_wiring(self) -> WiringConfig:
        return self.wiring[0]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _check_keys("config", raw, TOP_KEYS)

        model_raw = dict(raw.get("model", {}))
        _check_keys("model", model_raw, _field_names(ModelConfig) | {"preset"})
        explicit_preset = "preset" in model_raw
        preset = model_raw.pop("preset", "toy-ti")
        if preset not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}; expected one of {', '.join(MODEL_PRESETS)}")

        data_raw = dict(raw.get("data", {}))
        _check_keys("data", data_raw, _field_names(DatasetSpec))
        if "mean" in data_raw and not isinstance(data_raw["mean"], (list, tuple)):
            data_raw["mean"] = [data_raw["mean"]]
        if "std" in data_raw and not isinstance(data_raw["std"], (list, tuple)):
            data_raw["std"] = [data_raw["std"]]
        kind = data_raw.get("kind", "synthetic-quadrant")
        if "num_classes" not in model_raw and not explicit_preset:
            model_raw["num_classes"] = data_raw.get("num_classes", DATASET_CLASSES.get(kind, 10))
        base = MODEL_PRESETS[preset].to_dict()
        model = _build(ModelConfig, "model", {**base, **model_raw})

        for key in GEOMETRY:
            data_raw.setdefault(key, getattr(model, key))
        data_raw.setdefault("num_classes", model.num_classes)
        data = _build(DatasetSpec, "data", data_raw)
        for key in GEOMETRY:
            if getattr(data, key) != getattr(model, key):
                raise ConfigError(f"data.{key}={getattr(data, key)} disagrees with model.{key}={getattr(model, key)}")
        if data.num_classes > model.num_classes:
            raise ConfigError(f"data has {data.num_classes} classes but the model head only {model.num_classes}")

        wiring_raw = raw.get("wiring", "mpvg")
        names = [wiring_raw] if isinstance(wiring_raw, str) else wiring_raw
        if not isinstance(names, list) or not names or not all(isinstance(w, str) for w in names):
            raise ConfigError("'wiring' must be a preset string or a non-empty list of them")
        wiring = tuple(variant_preset(w) for w in names)
        for w in wiring:
            try:
                w.validate_for(model.num_layers)
            except ConfigError as exc:
                raise ConfigError(f"wiring {w.preset_string()!r}: {exc}") from None

        optim_raw = raw.get("optim", {})
        _check_keys("optim", optim_raw, _field_names(TrainConfig))
        optim = _build(TrainConfig, "optim", optim_raw)
        if optim.epochs < 1 or optim.batch_size < 1:
            raise ConfigError("'optim': epochs and batch_size must be positive")
        if optim.warmup_epochs >= optim.epochs and optim.warmup_epochs:
            raise ConfigError("'optim': warmup_epochs must be smaller than epochs")

        gc_raw = raw.get("gradcheck", {})
        _check_keys("gradcheck", gc_raw, _field_names(GradCheckSettings))
        gradcheck = _build(GradCheckSettings, "gradcheck", gc_raw)

        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("'seed' must be a non-negative integer")
        out_dir = raw.get("out_dir")
        if out_dir is not None and not isinstance(out_dir, str):
            raise ConfigError("'out_dir' must be a string")
        return cls(model, wiring, data, optim, gradcheck, seed, out_dir)

    def to_dict(self) -> dict:
        wiring = [w.preset_string() for w in self.wiring]
        return {
            "model": self.model.to_dict(),
            "wiring": wiring[0] if len(wiring) == 1 else wiring,
            "data": self.data.to_dict(),
            "optim": self.optim.to_dict(),
            "gradcheck": {f.name: getattr(self.gradcheck, f.name) for f in fields(GradCheckSettings)},
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def with_overrides(self, wiring: str | None = None, seed: int | None = None, out_dir: str | None = None):
        changes: dict = {}
        if wiring is not None:
            w = variant_preset(wiring)
            w.validate_for(self.model.num_layers)
            changes["wiring"] = (w,)
        if seed is not None:
            changes["seed"] = seed
        if out_dir is not None:
            changes["out_dir"] = out_dir
        return replace(self, **changes)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a JSON experiment config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig.from_dict({})
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(raw)
