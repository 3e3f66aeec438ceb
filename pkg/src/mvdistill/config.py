"""Plain-text run configuration: ``section.key = value`` lines.

Unknown keys are rejected by name, and every effective value (default or
explicit) is echoed to the run log so any run can be reproduced from its
own output.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import MultiViewDataset
from .encoder import EncoderConfig
from .trainkit import TrainConfig


class ConfigError(Exception):
    """Invalid configuration; maps to exit code 2 at the CLI."""


_UNSET = object()

# key -> (default, parser); a None default means "optional string".
DEFAULTS: dict[str, tuple] = {
    "data.path": (None, str),
    "model.conv_channels": ("8,16", str),
    "model.dim": (32, int),
    "model.depth": (2, int),
    "model.heads": (2, int),
    "model.ffn": (64, int),
    "distill.topology": ("b", str),
    "distill.tau_base": (4.0, float),
    "distill.lambda_base": (0.1, float),
    "train.views": (3, int),
    "train.epochs": (30, int),
    "train.batch_size": (64, int),
    "train.lr_max": (0.05, float),
    "train.lr_min": (1e-4, float),
    "train.t0": (10, int),
    "train.t_mult": (2.0, float),
    "train.seed": (0, int),
    "train.val_fraction": (0.1, float),
    "train.eval_every": (1, int),
    "train.eval_cap": (20, int),
    "train.pmv": (True, bool),
    "train.adaptive": (True, bool),
    "train.uw": (True, bool),
    "train.max_views": (5, int),
}

_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def _convert(key: str, raw: str):
    default, kind = DEFAULTS[key]
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return _BOOL_WORDS[raw.lower()]
        if kind is int:
            if key == "train.eval_cap" and raw.lower() == "none":
                return None
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _convert(key, raw)
    return values


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def echo_lines(self) -> list[str]:
        return [f"config: {k} = {self.values[k]}" for k in sorted(self.values)]

    def train_config(self, seed_override: int | None = None) -> TrainConfig:
        v = self.values
        return TrainConfig(
            views=v["train.views"],
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            lr_max=v["train.lr_max"],
            lr_min=v["train.lr_min"],
            t0=v["train.t0"],
            t_mult=v["train.t_mult"],
            seed=v["train.seed"] if seed_override is None else seed_override,
            pmv=v["train.pmv"],
            adaptive=v["train.adaptive"],
            uw=v["train.uw"],
            topology=v["distill.topology"],
            tau_base=v["distill.tau_base"],
            lambda_base=v["distill.lambda_base"],
            val_fraction=v["train.val_fraction"],
            eval_every=v["train.eval_every"],
            eval_cap=v["train.eval_cap"],
            max_views=v["train.max_views"],
        )

    def encoder_config(self, dataset: MultiViewDataset) -> EncoderConfig:
        v = self.values
        c, h, w = dataset.image_shape
        if h != w:
            raise ConfigError(f"model expects square images, dataset has {h}x{w}")
        try:
            conv = tuple(int(x) for x in str(v["model.conv_channels"]).split(",") if x.strip())
        except ValueError as exc:
            raise ConfigError(f"model.conv_channels: {exc}") from exc
        if not conv:
            raise ConfigError("model.conv_channels must name at least one layer")
        return EncoderConfig(
            in_channels=c,
            image_size=h,
            conv_channels=conv,
            dim=v["model.dim"],
            depth=v["model.depth"],
            heads=v["model.heads"],
            ffn=v["model.ffn"],
            num_classes=dataset.num_classes,
        )


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Resolve defaults, then the file (if any), then explicit overrides."""
    values = {k: default for k, (default, _) in DEFAULTS.items()}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text, source=str(path)))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return RunConfig(values)
