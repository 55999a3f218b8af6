"""INI-style run configuration with strict key checking.

Sections: ``[data]``, ``[arch]``, ``[train]``, ``[eval]`` and ``[sweep]``.
Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


DATA_KEYS = {
    "generator": str,
    "n": int,
    "seed": int,
    "sigma_e": _floats,
    "sigma_y": float,
    "m": int,
    "o": int,
    "zc_scales": _floats,
    "ze_scales": _floats,
    "label_noise": float,
    "task": str,
    "flip_probs": _floats,
    "mnist_dir": str,
    "mnist_limit": int,
}
GENERATORS = ("linear_sim", "causal", "anticausal", "fiif", "colored_mnist")

ARCH_KEYS = {"backbone": str, "hidden": _ints, "m": int, "o": int, "rep_bias": _bool}

_TRAIN_TYPES = {"objective": str, "use_tic": _bool, "freeze_theta_c": _bool}
TRAIN_KEYS = {f.name: _TRAIN_TYPES.get(f.name, type(f.default)) for f in fields(TrainConfig)}
TRAIN_KEYS.update({"test_domain": int, "val_fraction": float})

EVAL_KEYS = {"selection": lambda s: tuple(v.strip() for v in s.split(",") if v.strip()), "tic": _bool}
SWEEP_KEYS = {"beta": _floats, "objective": lambda s: tuple(v.strip() for v in s.split(",") if v.strip()), "seeds": _ints, "test_domains": _ints}

SECTIONS = {"data": DATA_KEYS, "arch": ARCH_KEYS, "train": TRAIN_KEYS, "eval": EVAL_KEYS, "sweep": SWEEP_KEYS}


@dataclass
class RunConfig:
    data: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)

    def train_config(self, **overrides) -> TrainConfig:
        kw = {k: v for k, v in self.train.items() if k in TrainConfig.__dataclass_fields__}
        kw.update(overrides)
        return TrainConfig(**kw)

    def as_dict(self) -> dict:
        def plain(d):
            return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

        return {s: plain(getattr(self, s)) for s in SECTIONS}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        schema = SECTIONS[section]
        out = getattr(cfg, section)
        for key, raw in cp.items(section):
            if key not in schema:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            try:
                out[key] = schema[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {exc}") from None
    gen = cfg.data.get("generator")
    if gen is not None and gen not in GENERATORS:
        raise ConfigError(f"{source}: unknown generator {gen!r}; expected one of {GENERATORS}")
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.as_dict().items():
        if not values:
            continue
        lines.append(f"[{section}]")
        for k, v in values.items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
