"""Flat ``key = value`` run configuration.

One file configures every stage. Keys are the field names of
:class:`~hand.training.TrainConfig` (``lambda`` is accepted for ``lambda_``),
:class:`~hand.model.ModelConfig`, :class:`~hand.synth_ood.SynthConfig`, plus
``crop_threshold``, ``prune_sigma``, ``threshold`` and ``ablation_seeds``.
Values are Python literals (``1e-4``, ``true``, ``8, 48``); anything that is
not a literal is kept as a string. ``#`` starts a comment.
"""

from __future__ import annotations

import ast
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .preprocess import DEFAULT_CROP_THRESHOLD
from .scoring import DEFAULT_THRESHOLD
from .synth_ood import SynthConfig
from .training import TrainConfig

SEED_ENV = "HAND_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    crop_threshold: float = DEFAULT_CROP_THRESHOLD
    prune_sigma: float | None = None
    threshold: float = DEFAULT_THRESHOLD
    ablation_seeds: tuple[int, ...] = (0, 1, 2)

    def snapshot(self) -> dict:
        """JSON-friendly view of every resolved setting."""
        return {
            "train": asdict(self.train),
            "model": asdict(self.model),
            "synth": asdict(self.synth),
            "crop_threshold": self.crop_threshold,
            "prune_sigma": self.prune_sigma,
            "threshold": self.threshold,
            "ablation_seeds": list(self.ablation_seeds),
        }


_ALIASES = {"lambda": "lambda_"}
_TOP = {"crop_threshold", "prune_sigma", "threshold", "ablation_seeds"}
_TRAIN = {f.name for f in fields(TrainConfig)}
_MODEL = {f.name for f in fields(ModelConfig)}
# exact_half_batches lives on TrainConfig, which forwards it to the sampler
_SYNTH = {f.name for f in fields(SynthConfig)} - _TRAIN


def _parse_value(text: str):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _TOP | _TRAIN | _MODEL | _SYNTH:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(value)
    return values


def _coerce(value, default):
    if isinstance(default, tuple) and not isinstance(value, tuple):
        return tuple(value) if isinstance(value, list) else (value,)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def build_config(values: dict[str, object], env: dict[str, str] | None = None) -> RunConfig:
    env = os.environ if env is None else env
    base = RunConfig()

    def pick(keys, obj):
        return {k: _coerce(v, getattr(obj, k)) for k, v in values.items() if k in keys}

    try:
        train = replace(base.train, **pick(_TRAIN, base.train))
        if env.get(SEED_ENV, "").strip():
            train = replace(train, master_seed=int(env[SEED_ENV]))
        model = replace(base.model, **pick(_MODEL, base.model))
        synth = replace(base.synth, **pick(_SYNTH, base.synth))
        top = pick(_TOP, base)
        if top.get("prune_sigma") is not None:
            top["prune_sigma"] = float(top["prune_sigma"])
        return RunConfig(train=train, model=model, synth=synth, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path: str | Path | None, env: dict[str, str] | None = None) -> RunConfig:
    """Read a config file (or use defaults when ``path`` is None); ``HAND_SEED`` overrides the seed."""
    if path is None:
        return build_config({}, env)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return build_config(parse_config_text(text, str(path)), env)
