"""Ground-truth data generators and dataset ingestion.

Three linear structural causal models (causal, anticausal and fully
informative invariant features), the two-domain continuous simulation,
ColoredMNIST construction, an IDX reader/writer and a small binary dataset
container.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng
from .container import read_arrays, write_arrays

KINDS = ("causal", "anticausal", "fiif")
TASKS = ("classification", "regression")


@dataclass
class ScmSpec:
    """Mechanism parameters for one of the three SCM families.

    ``w_e_star`` maps the parent of Z_e to Z_e: shape (1, o) when the parent is
    the scalar label, (m, o) when it is Z_c (fiif). ``w_tilde_c`` has shape
    (1, m) and is only used by the anticausal model. ``zc_scales[e]`` is the
    std of P_Zc(e) (causal, fiif) or of eta_Zc(e) (anticausal);
    ``ze_scales[e]`` is the std of eta_Ze(e). ``label_noise`` is a flip
    probability for classification and a Gaussian std for regression.
    """

    kind: str
    m: int
    o: int
    w_c_star: np.ndarray
    w_e_star: np.ndarray
    gamma: np.ndarray
    zc_scales: tuple[float, ...]
    ze_scales: tuple[float, ...]
    label_noise: float = 0.0
    w_tilde_c: np.ndarray | None = None
    task: str = "classification"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown SCM kind {self.kind!r}; expected one of {KINDS}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.m <= 0 or self.o <= 0:
            raise ValueError("m and o must be positive")
        self.w_c_star = np.asarray(self.w_c_star, dtype=np.float64).reshape(self.m)
        self.w_e_star = np.atleast_2d(np.asarray(self.w_e_star, dtype=np.float64))
        parent = self.m if self.kind == "fiif" else 1
        if self.w_e_star.shape != (parent, self.o):
            raise ValueError(f"w_e_star must have shape {(parent, self.o)} for kind {self.kind}, got {self.w_e_star.shape}")
        if self.kind == "anticausal":
            if self.w_tilde_c is None:
                raise ValueError("anticausal SCM needs w_tilde_c")
            self.w_tilde_c = np.asarray(self.w_tilde_c, dtype=np.float64).reshape(1, self.m)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        d = self.m + self.o
        if self.gamma.shape != (d, d) or abs(np.linalg.det(self.gamma)) <= 1e-6:
            raise ValueError(f"gamma must be an invertible {d}x{d} matrix")
        if len(self.zc_scales) != len(self.ze_scales) or not self.zc_scales:
            raise ValueError("zc_scales and ze_scales need one entry per domain")
        self.zc_scales = tuple(float(s) for s in self.zc_scales)
        self.ze_scales = tuple(float(s) for s in self.ze_scales)

    @property
    def num_domains(self) -> int:
        return len(self.zc_scales)


@dataclass
class DomainDataset:
    X: np.ndarray
    y: np.ndarray
    e: int
    z_c: np.ndarray | None = None
    z_e: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.X)
        for name in ("y", "z_c", "z_e"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise ValueError(f"{name} has {len(value)} rows, X has {n}")
        for name, value in self.aux.items():
            if len(value) != n:
                raise ValueError(f"aux[{name!r}] has {len(value)} rows, X has {n}")

    @property
    def n(self) -> int:
        return len(self.X)

    def subset(self, index) -> "DomainDataset":
        index = np.asarray(index)
        return DomainDataset(
            X=self.X[index],
            y=self.y[index],
            e=self.e,
            z_c=None if self.z_c is None else self.z_c[index],
            z_e=None if self.z_e is None else self.z_e[index],
            provenance=dict(self.provenance),
            aux={k: v[index] for k, v in self.aux.items()},
        )


def random_rotation(dim: int, seed: int) -> np.ndarray:
    g = rng.stream(seed, rng.GAMMA, dim)
    q, r = np.linalg.qr(g.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def make_scm_spec(
    kind: str,
    m: int = 4,
    o: int = 4,
    zc_scales: Sequence[float] = (1.0, 1.0, 1.0),
    ze_scales: Sequence[float] = (0.1, 0.5, 1.0),
    label_noise: float = 0.0,
    task: str = "classification",
    seed: int = 0,
    gamma: np.ndarray | None = None,
) -> ScmSpec:
    """Draw mechanism weights and a random rotation Gamma from ``seed``."""
    g = rng.stream(seed, rng.GAMMA, 0)
    w_c = g.standard_normal(m)
    w_c /= np.linalg.norm(w_c)
    parent = m if kind == "fiif" else 1
    w_e = g.standard_normal((parent, o))
    if kind != "fiif":
        w_e = np.abs(w_e) + 0.5
    w_tilde = np.abs(g.standard_normal((1, m))) + 0.5 if kind == "anticausal" else None
    if gamma is None:
        gamma = random_rotation(m + o, seed)
    return ScmSpec(
        kind=kind, m=m, o=o, w_c_star=w_c, w_e_star=w_e, gamma=gamma,
        zc_scales=tuple(zc_scales), ze_scales=tuple(ze_scales),
        label_noise=label_noise, w_tilde_c=w_tilde, task=task,
    )


def _check_domain(spec: ScmSpec, domain: int) -> None:
    if not 0 <= domain < spec.num_domains:
        raise IndexError(f"unknown domain index {domain}; spec has {spec.num_domains} domains")


def _label_from_score(spec: ScmSpec, score: np.ndarray, g: np.random.Generator) -> np.ndarray:
    """Signed label in {-1, +1} (classification) or a noisy continuous target."""
    if spec.task == "regression":
        return score + spec.label_noise * g.standard_normal(score.shape)
    signed = np.where(score >= 0, 1.0, -1.0)
    flip = g.random(score.shape) < spec.label_noise
    return np.where(flip, -signed, signed)


def _finish(spec: ScmSpec, zc, ze, signed_y, domain, seed, name) -> "DomainDataset":
    X = np.concatenate([zc, ze], axis=1) @ spec.gamma.T
    y = (signed_y > 0).astype(np.int64) if spec.task == "classification" else signed_y
    return DomainDataset(X=X, y=y, e=domain, z_c=zc, z_e=ze, provenance={"generator": name, "seed": int(seed), "domain": int(domain)})


def sample_causal_scm(spec: ScmSpec, n: int, domain: int, seed: int) -> DomainDataset:
    if spec.kind != "causal":
        raise ValueError(f"sample_causal_scm needs kind='causal', got {spec.kind!r}")
    _check_domain(spec, domain)
    g = rng.stream(seed, rng.DATA, domain)
    zc = spec.zc_scales[domain] * g.standard_normal((n, spec.m))
    signed = _label_from_score(spec, zc @ spec.w_c_star, g)
    ze = signed[:, None] @ spec.w_e_star + spec.ze_scales[domain] * g.standard_normal((n, spec.o))
    return _finish(spec, zc, ze, signed, domain, seed, "causal")


def sample_anticausal_scm(spec: ScmSpec, n: int, domain: int, seed: int) -> DomainDataset:
    if spec.kind != "anticausal":
        raise ValueError(f"sample_anticausal_scm needs kind='anticausal', got {spec.kind!r}")
    _check_domain(spec, domain)
    g = rng.stream(seed, rng.DATA, domain)
    if spec.task == "classification":
        signed = np.where(g.random(n) < 0.5, 1.0, -1.0)
    else:
        signed = g.standard_normal(n)
    zc = signed[:, None] @ spec.w_tilde_c + spec.zc_scales[domain] * g.standard_normal((n, spec.m))
    ze = signed[:, None] @ spec.w_e_star + spec.ze_scales[domain] * g.standard_normal((n, spec.o))
    return _finish(spec, zc, ze, signed, domain, seed, "anticausal")


def sample_fiif_scm(spec: ScmSpec, n: int, domain: int, seed: int) -> DomainDataset:
    if spec.kind != "fiif":
        raise ValueError(f"sample_fiif_scm needs kind='fiif', got {spec.kind!r}")
    _check_domain(spec, domain)
    g = rng.stream(seed, rng.DATA, domain)
    zc = spec.zc_scales[domain] * g.standard_normal((n, spec.m))
    signed = _label_from_score(spec, zc @ spec.w_c_star, g)
    ze = zc @ spec.w_e_star + spec.ze_scales[domain] * g.standard_normal((n, spec.o))
    return _finish(spec, zc, ze, signed, domain, seed, "fiif")


_SAMPLERS = {"causal": sample_causal_scm, "anticausal": sample_anticausal_scm, "fiif": sample_fiif_scm}


def sample_scm(spec: ScmSpec, n: int, domain: int, seed: int) -> DomainDataset:
    return _SAMPLERS[spec.kind](spec, n, domain, seed)


def sample_scm_domains(spec: ScmSpec, n: int, seed: int) -> list[DomainDataset]:
    return [sample_scm(spec, n, e, seed) for e in range(spec.num_domains)]


def reconstruct_latents(spec: ScmSpec, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply Gamma^-1 row-wise and split into (z_c, z_e)."""
    z = np.linalg.solve(spec.gamma, X.T).T
    return z[:, : spec.m], z[:, spec.m :]


def sample_linear_sim(
    sigma_e: Sequence[float] = (0.1, 0.2), sigma_y: float = 0.25, n: int = 5000, seed: int = 0
) -> list[DomainDataset]:
    """Two-feature regression simulation with identity Gamma.

    Per domain: z_c ~ N(0, s^2), y = z_c + N(0, sigma_y^2), z_e = y + N(0, s^2).
    """
    if len(sigma_e) == 0:
        raise ValueError("sigma_e must name at least one domain")
    out = []
    for e, s in enumerate(sigma_e):
        g = rng.stream(seed, rng.DATA, e)
        zc = s * g.standard_normal(n)
        y = zc + sigma_y * g.standard_normal(n)
        ze = y + s * g.standard_normal(n)
        out.append(
            DomainDataset(
                X=np.stack([zc, ze], axis=1), y=y, e=e, z_c=zc[:, None], z_e=ze[:, None],
                provenance={"generator": "linear_sim", "seed": int(seed), "domain": e, "sigma_e": float(s), "sigma_y": float(sigma_y)},
            )
        )
    return out


# ---------------------------------------------------------------- ColoredMNIST


def _downsample(images: np.ndarray) -> np.ndarray:
    n, h, w = images.shape
    return images.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def make_colored_mnist(
    images: np.ndarray,
    labels: np.ndarray,
    flip_probs: Sequence[float] = (0.1, 0.2, 0.9),
    label_noise: float = 0.25,
    seed: int = 0,
    downsample: bool = True,
) -> list[DomainDataset]:
    """Split digits across domains and colour them.

    Labels are binarised (0-4 -> 0, 5-9 -> 1) and flipped with probability
    ``label_noise``; the colour equals the label flipped with the domain's
    flip probability. Images go to channel ``colour`` of a two-channel image,
    the other channel is zero. Rows are flattened channel-major.
    """
    if len(flip_probs) == 0:
        raise ValueError("flip_probs must be nonempty")
    for p in flip_probs:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"flip probability {p} outside [0, 1]")
    if not 0.0 <= label_noise < 0.5:
        raise ValueError(f"label_noise must lie in [0, 0.5), got {label_noise}")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        side = int(round(np.sqrt(images.shape[1])))
        images = images.reshape(-1, side, side)
    if images.max() > 1.0:
        images = images / 255.0
    labels = np.asarray(labels).reshape(-1)
    order = rng.stream(seed, rng.SPLIT, 0).permutation(len(labels))
    images, labels = images[order], labels[order]
    if downsample:
        images = _downsample(images)
    E = len(flip_probs)
    out = []
    for e, p in enumerate(flip_probs):
        g = rng.stream(seed, rng.DATA, e)
        im, digit = images[e::E], labels[e::E]
        clean = (digit >= 5).astype(np.int64)
        y = np.where(g.random(len(clean)) < label_noise, 1 - clean, clean)
        color = np.where(g.random(len(y)) < p, 1 - y, y)
        x = np.zeros((len(y), 2) + im.shape[1:])
        x[np.arange(len(y)), color] = im
        out.append(
            DomainDataset(
                X=x.reshape(len(y), -1), y=y, e=e,
                provenance={"generator": "colored_mnist", "seed": int(seed), "domain": e, "flip_prob": float(p), "label_noise": float(label_noise)},
                aux={"color": color, "clean_label": clean, "digit": digit.astype(np.int64)},
            )
        )
    return out


# ---------------------------------------------------------------- IDX files

_IDX_TYPES = {0x08: np.dtype(">u1")}


def read_idx(path) -> np.ndarray:
    """Read an IDX file of unsigned bytes, validating header and payload length."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header at byte offset {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: bad magic bytes {raw[0]:#04x} {raw[1]:#04x} at byte offset 0")
    if raw[2] not in _IDX_TYPES:
        raise ValueError(f"{path}: unsupported type code {raw[2]:#04x} at byte offset 2")
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ValueError(f"{path}: truncated dimension sizes at byte offset {len(raw)}; header needs {header_end} bytes")
    shape = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_TYPES[raw[2]]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = len(raw) - header_end
    if payload != expected:
        raise ValueError(f"{path}: payload is {payload} bytes from byte offset {header_end}, header declares {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(shape).astype(np.uint8)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("write_idx supports uint8 arrays only")
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_mnist(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Images and labels from the standard MNIST IDX files in ``directory``."""
    prefix = "train" if split == "train" else "t10k"
    d = Path(directory)
    images = read_idx(d / f"{prefix}-images-idx3-ubyte")
    labels = read_idx(d / f"{prefix}-labels-idx1-ubyte")
    if len(images) != len(labels):
        raise ValueError(f"{d}: {len(images)} images but {len(labels)} labels")
    return images, labels


# ---------------------------------------------------------------- dataset container


def save_dataset(ds: DomainDataset, path) -> None:
    """Write ``<path>.bin`` (arrays) and ``<path>.json`` (metadata)."""
    path = Path(path)
    arrays = {"X": ds.X, "y": ds.y}
    if ds.z_c is not None:
        arrays["z_c"] = ds.z_c
    if ds.z_e is not None:
        arrays["z_e"] = ds.z_e
    for k, v in ds.aux.items():
        arrays[f"aux.{k}"] = v
    write_arrays(path.with_suffix(".bin"), arrays)
    meta = {"domain": int(ds.e), "n": int(ds.n), "provenance": ds.provenance}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> DomainDataset:
    path = Path(path)
    arrays = read_arrays(path.with_suffix(".bin"))
    meta = json.loads(path.with_suffix(".json").read_text())
    aux = {k[4:]: v for k, v in arrays.items() if k.startswith("aux.")}
    return DomainDataset(
        X=arrays["X"], y=arrays["y"], e=int(meta["domain"]), z_c=arrays.get("z_c"), z_e=arrays.get("z_e"),
        provenance=meta.get("provenance", {}), aux=aux,
    )


def latent_audit(ds: DomainDataset) -> float:
    """Largest |partial correlation| between a z_c and a z_e coordinate given y.

    Classification: correlation of within-class-centred latents. Regression:
    correlation of residuals after regressing each latent on y.
    """
    if ds.z_c is None or ds.z_e is None:
        raise ValueError("latent_audit needs ground-truth latents")
    zc = np.asarray(ds.z_c, dtype=np.float64).reshape(ds.n, -1)
    ze = np.asarray(ds.z_e, dtype=np.float64).reshape(ds.n, -1)
    y = np.asarray(ds.y)
    if np.issubdtype(y.dtype, np.integer):
        rc, re = zc.copy(), ze.copy()
        for k in np.unique(y):
            rows = y == k
            rc[rows] -= rc[rows].mean(axis=0)
            re[rows] -= re[rows].mean(axis=0)
    else:
        design = np.column_stack([np.ones(ds.n), y.astype(np.float64)])
        rc = zc - design @ np.linalg.lstsq(design, zc, rcond=None)[0]
        re = ze - design @ np.linalg.lstsq(design, ze, rcond=None)[0]
    sc, se = rc.std(axis=0), re.std(axis=0)
    ok_c, ok_e = sc > 1e-12, se > 1e-12
    if not ok_c.any() or not ok_e.any():
        return 0.0
    corr = (rc[:, ok_c].T @ re[:, ok_e]) / ds.n / np.outer(sc[ok_c], se[ok_e])
    return float(np.abs(corr).max())
