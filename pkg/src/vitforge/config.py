"""Run configuration: one flat ``key = value`` text format with ``#``
comments and dotted section prefixes (``vit.patch_size = 6``).

Every field has a default, so an empty config describes a synthetic-data
run. ``RunConfig.to_text`` emits every key; parsing that text back yields
an equal config, which is what checkpoints embed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import AugmentSpec, SplitSpec
from .model import ViTConfig
from .train import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_kv_text"]


class ConfigError(ValueError):
    """Bad config file content; the message names the key and line."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in text.split(","))


def _identity(text: str) -> str:
    return text.strip()


# key -> (attribute path, converter); attribute paths address RunConfig
_KEYS: dict[str, tuple[str, object]] = {
    "seed": ("seed", int),
    "data.root": ("data_root", _identity),
    "data.synthetic_per_class": ("synthetic_per_class", int),
    "data.synthetic_classes": ("synthetic_classes", int),
    "out.dir": ("out_dir", _identity),
    "vit.image_size": ("vit.image_size", _parse_int_tuple),
    "vit.patch_size": ("vit.patch_size", int),
    "vit.projection_dim": ("vit.projection_dim", int),
    "vit.num_layers": ("vit.num_layers", int),
    "vit.num_heads": ("vit.num_heads", int),
    "vit.encoder_mlp_dims": ("vit.encoder_mlp_dims", _parse_int_tuple),
    "vit.head_dims": ("vit.head_dims", _parse_int_tuple),
    "vit.num_classes": ("vit.num_classes", int),
    "vit.dropout_rate": ("vit.dropout_rate", float),
    "vit.head_dropout_rate": ("vit.head_dropout_rate", float),
    "vit.activation": ("vit.activation", _identity),
    "train.learning_rate": ("train.learning_rate", float),
    "train.weight_decay": ("train.weight_decay", float),
    "train.batch_size": ("train.batch_size", int),
    "train.max_epochs": ("train.max_epochs", int),
    "train.adam_beta1": ("train.adam_beta1", float),
    "train.adam_beta2": ("train.adam_beta2", float),
    "train.adam_eps": ("train.adam_eps", float),
    "train.early_stop_patience": ("train.early_stop_patience", int),
    "train.early_stop_min_delta": ("train.early_stop_min_delta", float),
    "train.early_stop_metric": ("train.early_stop_metric", _identity),
    "train.grad_clip_norm": ("train.grad_clip_norm", float),
    "split.test_fraction": ("split.test_fraction", float),
    "split.validation_fraction_of_train": ("split.validation_fraction_of_train", float),
    "split.stratified": ("split.stratified", _parse_bool),
    "augment.enabled": ("augment_enabled", _parse_bool),
    "augment.horizontal_flip": ("augment.horizontal_flip", _parse_bool),
    "augment.rotation_degrees": ("augment.rotation_degrees", float),
    "augment.zoom_fraction": ("augment.zoom_fraction", float),
    "augment.width_shift_fraction": ("augment.width_shift_fraction", float),
    "augment.height_shift_fraction": ("augment.height_shift_fraction", float),
}


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Parse ``key = value`` lines into ``{key: (value, lineno)}``."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = (value.strip(), lineno)
    return out


@dataclass
class RunConfig:
    """Everything one training/eval run needs. The single ``seed`` drives
    model init, shuffling, splitting, and augmentation (each through its
    own derived stream)."""

    seed: int = 0
    data_root: str = ""  # empty: generate a synthetic dataset
    synthetic_per_class: int = 50
    synthetic_classes: int = 4
    out_dir: str = "run_out"
    augment_enabled: bool = True
    vit: ViTConfig = field(default_factory=ViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self):
        # one master seed; distinct derived streams per purpose
        self.train.seed = self.seed
        self.split.seed = self.seed
        self.augment.seed = self.seed + 1

    @property
    def target_size(self) -> tuple[int, int]:
        return self.vit.image_size[0], self.vit.image_size[1]

    def augment_spec(self) -> AugmentSpec | None:
        return self.augment if self.augment_enabled else None

    @classmethod
    def from_text(cls, text: str, source: str = "<config>",
                  overrides: dict[str, str] | None = None) -> "RunConfig":
        entries = parse_kv_text(text, source)
        if overrides:
            for key, value in overrides.items():
                entries[key] = (value, 0)
        values: dict[str, dict | object] = {"vit": {}, "train": {}, "split": {},
                                            "augment": {}, "top": {}}
        for key, (raw, lineno) in entries.items():
            if key.startswith("meta."):
                continue  # checkpoint metadata rides along in the same text
            spec = _KEYS.get(key)
            if spec is None:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            attr_path, convert = spec
            try:
                value = convert(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"{source}:{lineno}: bad value for {key!r}: {exc}"
                ) from None
            if "." in attr_path:
                section, name = attr_path.split(".", 1)
                values[section][name] = value
            else:
                values["top"][attr_path] = value
        try:
            return cls(
                vit=ViTConfig(**values["vit"]),
                train=TrainConfig(**values["train"]),
                split=SplitSpec(**values["split"]),
                augment=AugmentSpec(**values["augment"]),
                **values["top"],
            )
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def from_file(cls, path: str, overrides: dict[str, str] | None = None) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, source=path, overrides=overrides)

    def to_text(self) -> str:
        def fmt(value) -> str:
            if isinstance(value, bool):
                return "true" if value else "false"
            if isinstance(value, tuple):
                return ",".join(str(v) for v in value)
            if isinstance(value, float):
                return repr(value)
            return str(value)

        lines = []
        for key, (attr_path, _) in _KEYS.items():
            if "." in attr_path:
                section, name = attr_path.split(".", 1)
                value = getattr(getattr(self, section), name)
            else:
                value = getattr(self, attr_path)
            lines.append(f"{key} = {fmt(value)}")
        return "\n".join(lines) + "\n"

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.to_text() == other.to_text()
