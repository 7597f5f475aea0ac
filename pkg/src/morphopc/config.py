"""Key-value run configuration.

One INI file with a section per module::

    [generator]
    widths = 32, 64, 128, 256
    s = 8

    [litho]
    sigma = 8.0

Unknown sections or keys raise :class:`ConfigError` so typos fail loudly.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .data import SHAPES, LayoutSpec
from .litho import LithoModel, gaussian_kernel, load_kernels
from .metrics import EpeConfig
from .network import GeneratorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _ints(v: str) -> list[int]:
    return [int(x) for x in v.replace(",", " ").split()]


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _mix(v: str) -> dict:
    out = {}
    for tok in v.replace(",", " ").split():
        k, _, w = tok.partition(":")
        out[k] = float(w) if w else 1.0
    return out


def _opt_ints(v: str):
    return None if v.strip().lower() in ("", "auto", "none") else _ints(v)


def _opt_int(v: str):
    return None if v.strip().lower() in ("", "auto", "none") else int(v)


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, dict):
        return ", ".join(f"{k}:{w:g}" for k, w in v.items())
    return str(v)


SCHEMA: dict[str, dict[str, tuple]] = {
    "generator": {
        "image_size": (int, 128),
        "widths": (_ints, [32, 64, 128, 256]),
        "s": (int, 8),
        "conv_size": (int, 3),
        "se_schedule": (_opt_ints, None),
        "activation": (str, "relu"),
        "outer_activation": (str, "relu"),
        "separate_se": (_bool, False),
        "seed": (int, 0),
    },
    "litho": {
        "sigma": (float, 8.0),
        "kernels": (str, ""),
        "threshold": (float, 0.5),
        "steepness": (float, 50.0),
        "dose_min": (float, 0.98),
        "dose_max": (float, 1.02),
        "pitch": (float, 4.0),
    },
    "train": {
        "pretrain_epochs": (int, 10),
        "finetune_epochs": (int, 10),
        "batch_size": (int, 1),
        "lr": (float, 1e-4),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "lr_decay": (float, 0.1),
        "lambda_mask": (float, 1.0),
        "lambda_print": (float, 1.0),
        "lambda_adv": (float, 0.01),
        "adversarial": (_bool, True),
        "seed": (int, 0),
    },
    "data": {
        "count": (int, 64),
        "tile_size": (int, 128),
        "min_width": (int, 16),
        "min_spacing": (int, 16),
        "border": (int, 12),
        "max_shapes": (int, 4),
        "shape_mix": (_mix, {s: 1.0 for s in SHAPES}),
        "pitch": (float, 4.0),
        "seed": (int, 0),
        "ilt_steps": (int, 200),
        "ilt_lr": (float, 1.0),
    },
    "epe": {
        "spacing": (_opt_int, None),
        "threshold": (_opt_int, None),
        "margin": (int, 8),
    },
    "sweep": {
        "s_values": (_ints, [4, 8, 16, 32]),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()})
    source: str = ""

    # ------------------------------------------------------------ parsing

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(str(e)) from None
        cfg = cls(source=source)
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"{source}: unknown section [{sec}]; valid: {', '.join(SCHEMA)}")
            for key, raw in cp.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]; valid: {', '.join(SCHEMA[sec])}")
                conv = SCHEMA[sec][key][0]
                try:
                    cfg.values[sec][key] = conv(raw)
                except ValueError as e:
                    raise ConfigError(f"{source}: bad value for [{sec}] {key} = {raw!r}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text(), str(p))

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config entry [{section}] {key}")
        self.values[section][key] = value

    # ------------------------------------------------------------ output

    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec, keys in self.values.items():
            cp[sec] = {k: _fmt(v) for k, v in keys.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()[:12]

    # ------------------------------------------------------------ builders

    def generator_config(self) -> GeneratorConfig:
        g = self.values["generator"]
        return GeneratorConfig(
            image_size=g["image_size"],
            widths=tuple(g["widths"]),
            s=g["s"],
            conv_size=g["conv_size"],
            se_schedule=g["se_schedule"],
            activation=g["activation"],
            outer_activation=g["outer_activation"],
            separate_se=g["separate_se"],
            seed=g["seed"],
        )

    def litho_model(self) -> LithoModel:
        lv = self.values["litho"]
        if lv["kernels"]:
            kernels, weights = load_kernels(lv["kernels"])
        else:
            kernels, weights = [gaussian_kernel(lv["sigma"])], [1.0]
        return LithoModel(
            kernels=kernels,
            weights=weights,
            threshold=lv["threshold"],
            steepness=lv["steepness"],
            doses=(lv["dose_min"], 1.0, lv["dose_max"]),
            pitch=lv["pitch"],
        )

    def train_config(self, stage: str) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            stage=stage,
            epochs=t["pretrain_epochs"] if stage == "pretrain" else t["finetune_epochs"],
            batch_size=t["batch_size"],
            lr=t["lr"],
            beta1=t["beta1"],
            beta2=t["beta2"],
            lr_decay=t["lr_decay"],
            lambda_mask=t["lambda_mask"],
            lambda_print=t["lambda_print"],
            lambda_adv=t["lambda_adv"],
            adversarial=t["adversarial"],
            seed=t["seed"],
        )

    def layout_spec(self) -> LayoutSpec:
        d = self.values["data"]
        return LayoutSpec(
            tile_size=d["tile_size"],
            min_width=d["min_width"],
            min_spacing=d["min_spacing"],
            border=d["border"],
            shape_mix=dict(d["shape_mix"]),
            max_shapes=d["max_shapes"],
            pitch=d["pitch"],
            seed=d["seed"],
        )

    def epe_config(self, pitch: float | None = None) -> EpeConfig:
        e = self.values["epe"]
        base = EpeConfig.for_pitch(pitch or self.values["litho"]["pitch"], margin=e["margin"])
        return EpeConfig(
            spacing=e["spacing"] if e["spacing"] is not None else base.spacing,
            threshold=e["threshold"] if e["threshold"] is not None else base.threshold,
            margin=e["margin"],
        )
