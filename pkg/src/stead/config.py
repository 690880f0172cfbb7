"""Run configuration: a flat ``key = value`` text file, every key overridable from the CLI."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, get_type_hints

from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig, preset

# config-file key -> attribute, where the key is not a valid identifier
KEY_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "fast"
    # None means "take the preset's value"
    enhancer_channels: Optional[int] = None
    enhancer_depth: Optional[int] = None
    attention_channels: Optional[int] = None
    attention_depth: Optional[int] = None
    random_features: int = 256
    input_shape: str = "192,16,10,10"
    ffn_expansion: float = 4.0

    margin: float = 100.0
    lam: float = 1.0
    batch_half: int = 16

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.2
    epochs: int = 10
    total_steps: int = 0  # 0: epochs * steps_per_epoch
    checkpoint_every: int = 100

    model_seed: int = 0
    data_seed: int = 0
    feature_seed: int = 0

    train_manifest: str = ""
    test_manifest: str = ""
    out_dir: str = "run"

    def model_config(self) -> ModelConfig:
        try:
            shape = tuple(int(s) for s in self.input_shape.split(","))
        except ValueError:
            raise ConfigError(f"input_shape must be comma-separated integers, got {self.input_shape!r}") from None
        overrides = {
            k: getattr(self, k)
            for k in ("enhancer_channels", "enhancer_depth", "attention_channels", "attention_depth")
            if getattr(self, k) is not None
        }
        return preset(
            self.preset,
            random_features=self.random_features,
            input_shape=shape,
            ffn_expansion=self.ffn_expansion,
            seed=self.model_seed,
            feature_seed=self.feature_seed,
            **overrides,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, margin=self.margin, batch_half=self.batch_half)

    def optim_hyper(self) -> dict:
        return dict(
            lr_base=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay
        )

    # ------------------------------------------------------------------ text

    def to_text(self) -> str:
        inverse = {v: k for k, v in KEY_ALIASES.items()}
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{inverse.get(f.name, f.name)} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            values[key.strip()] = value.strip()
        return cls().with_overrides(values, source)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        return cls.from_text(path.read_text(encoding="utf-8"), str(path))

    def with_overrides(self, values: dict, source: str = "<overrides>") -> "RunConfig":
        """Apply ``{key: string}`` overrides, coercing each to the field's type."""
        hints = get_type_hints(type(self))
        names = {f.name for f in fields(self)}
        changes = {}
        for key, raw in values.items():
            name = KEY_ALIASES.get(key, key.replace("-", "_"))
            if name not in names:
                raise ConfigError(f"{source}: unknown key {key!r}")
            changes[name] = _coerce(raw, hints[name], key, source)
        return replace(self, **changes)


def _coerce(raw, hint, key: str, source: str):
    if not isinstance(raw, str):
        return raw
    optional = hint == Optional[int]
    if optional and raw.strip().lower() in ("", "none"):
        return None
    target = int if optional else hint
    try:
        if target is bool:
            return raw.strip().lower() in ("1", "true", "yes")
        return target(raw)
    except ValueError:
        raise ConfigError(f"{source}: {key} = {raw!r} is not a valid {target.__name__}") from None
