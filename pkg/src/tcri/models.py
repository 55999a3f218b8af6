"""Dual-extractor model: shared trunk, Phi_dg and Phi_spu heads, theta_c and one theta_e per domain."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from . import tensor as T
from .container import read_arrays, write_arrays
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ArchSpec:
    """``backbone='linear'`` maps X straight to both representations;
    ``'mlp'`` inserts a shared relu trunk of widths ``hidden`` first."""

    input_dim: int
    m: int
    o: int
    num_classes: int
    num_domains: int
    backbone: str = "linear"
    hidden: tuple[int, ...] = ()
    rep_bias: bool = True

    def __post_init__(self):
        if self.backbone not in ("linear", "mlp"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        for name in ("input_dim", "m", "o", "num_classes", "num_domains"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ArchSpec.{name} must be positive, got {getattr(self, name)}")
        if self.backbone == "mlp" and not self.hidden:
            raise ValueError("mlp backbone needs at least one hidden width")
        if self.backbone == "linear" and self.hidden:
            raise ValueError("linear backbone takes no hidden widths")
        if any(h <= 0 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", ()))
        return cls(**d)


@dataclass
class ModelParams:
    spec: ArchSpec
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: T.tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()})

    @classmethod
    def from_arrays(cls, spec: ArchSpec, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls(spec, {k: T.tensor(v, requires_grad=True) for k, v in arrays.items()})


def _glorot(g: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return g.uniform(-a, a, size=(fan_in, fan_out))


def init_model(spec: ArchSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights and zero biases; each layer draws from its own stream."""
    layers: list[tuple[str, int, int, bool]] = []
    width = spec.input_dim
    for i, h in enumerate(spec.hidden):
        layers.append((f"trunk.{i}", width, h, True))
        width = h
    layers.append(("phi_dg", width, spec.m, spec.rep_bias))
    layers.append(("phi_spu", width, spec.o, spec.rep_bias))
    layers.append(("theta_c", spec.m, spec.num_classes, True))
    for e in range(spec.num_domains):
        layers.append((f"theta_e.{e}", spec.m + spec.o, spec.num_classes, True))

    tensors: dict[str, Tensor] = {}
    for k, (name, fan_in, fan_out, bias) in enumerate(layers):
        g = rng.stream(seed, rng.INIT, k)
        tensors[f"{name}.W"] = T.tensor(_glorot(g, fan_in, fan_out), requires_grad=True)
        if bias:
            tensors[f"{name}.b"] = T.tensor(np.zeros((1, fan_out)), requires_grad=True)
    return ModelParams(spec, tensors)


def _dense(params: ModelParams, name: str, x: Tensor) -> Tensor:
    out = T.matmul(x, params[f"{name}.W"])
    b = params.tensors.get(f"{name}.b")
    return out if b is None else T.add(out, b)


def _trunk(params: ModelParams, X) -> Tensor:
    x = T.as_tensor(X)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ShapeError(f"forward: input shape {x.shape} does not match input_dim {params.spec.input_dim}")
    for i in range(len(params.spec.hidden)):
        x = T.relu(_dense(params, f"trunk.{i}", x))
    return x


def representations(params: ModelParams, X) -> tuple[Tensor, Tensor]:
    """(Phi_dg(X), Phi_spu(X)) from one trunk pass."""
    h = _trunk(params, X)
    return _dense(params, "phi_dg", h), _dense(params, "phi_spu", h)


def head_dg(params: ModelParams, z_dg: Tensor) -> Tensor:
    return _dense(params, "theta_c", z_dg)


def head_ds(params: ModelParams, z_dg: Tensor, z_spu: Tensor, domain: int) -> Tensor:
    if not 0 <= domain < params.spec.num_domains:
        raise IndexError(f"no domain-specific head for domain {domain}; model has {params.spec.num_domains}")
    return _dense(params, f"theta_e.{domain}", T.concat([z_dg, z_spu], axis=1))


def forward_dg(params: ModelParams, X) -> tuple[Tensor, Tensor]:
    """The inference path: returns (Z_dg, theta_c(Z_dg))."""
    h = _trunk(params, X)
    z = _dense(params, "phi_dg", h)
    return z, head_dg(params, z)


def forward_ds(params: ModelParams, X, domain: int) -> Tensor:
    z_dg, z_spu = representations(params, X)
    return head_ds(params, z_dg, z_spu, domain)


def theta_e_param_count(params: ModelParams, domain: int) -> int:
    return sum(params[f"theta_e.{domain}.{p}"].data.size for p in ("W", "b"))


# ---------------------------------------------------------------- checkpoints


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(params: ModelParams, path, step: int, cfg_hash: str = "") -> None:
    """``<path>.bin`` holds the tensors; ``<path>.json`` is the manifest."""
    path = Path(path)
    arrays = params.arrays()
    write_arrays(path.with_suffix(".bin"), arrays)
    manifest = {
        "step": int(step),
        "config_hash": cfg_hash,
        "arch": params.spec.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    arrays = read_arrays(path.with_suffix(".bin"))
    for entry in manifest["tensors"]:
        got = arrays.get(entry["name"])
        if got is None or list(got.shape) != entry["shape"]:
            raise ValueError(f"{path}: tensor {entry['name']!r} missing or mis-shaped")
    return ModelParams.from_arrays(ArchSpec.from_dict(manifest["arch"]), arrays), manifest
