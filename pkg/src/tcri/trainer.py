"""Objectives and the SGD training loop.

``tcri_hsic`` / ``tcri_pcov`` minimise, averaged over training domains, the
risk of theta_c on Phi_dg, the risk of the domain head theta_e on
[Phi_dg; Phi_spu] and ``beta`` times the conditional-independence penalty
between the two representations. ``erm`` is the same loss with beta = 0.
The IRM, VREx and GroupDRO baselines use only the theta_c o Phi_dg path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng
from . import tensor as T
from .independence import class_conditional_hsic, partial_covariance_penalty
from .models import ArchSpec, ModelParams, forward_dg, head_dg, head_ds, init_model, representations
from .scm import DomainDataset
from .tensor import Tensor

OBJECTIVES = ("tcri_hsic", "tcri_pcov", "erm", "irm", "vrex", "groupdro")

Batch = tuple[np.ndarray, np.ndarray]


@dataclass
class TrainConfig:
    objective: str = "tcri_hsic"
    beta: float = 100.0
    anneal_steps: int = 0
    lr: float = 1e-2
    batch_size: int = 64
    steps: int = 2000
    seed: int = 0
    eta_groupdro: float = 1e-2
    lambda_irm: float = 1.0
    lambda_vrex: float = 1.0
    eval_interval: int = 0
    use_tic: bool = True
    freeze_theta_c: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.anneal_steps < 0 or self.steps < 0:
            raise ValueError("anneal_steps and steps must be >= 0")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.lambda_irm < 0 or self.lambda_vrex < 0:
            raise ValueError("lambda_irm and lambda_vrex must be >= 0")
        if self.eta_groupdro <= 0:
            raise ValueError("eta_groupdro must be positive")
        if self.eval_interval < 0:
            raise ValueError("eval_interval must be >= 0")

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.objective == "erm" else self.beta

    def beta_at(self, step: int) -> float:
        return self.effective_beta if step >= self.anneal_steps else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, history: "History"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.history = history


@dataclass
class History:
    num_domains: int
    with_ds: bool = True
    records: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def columns(self) -> list[str]:
        E = self.num_domains
        ds = [f"risk_ds_{e}" for e in range(E)] if self.with_ds else []
        return ["step", "loss"] + [f"risk_dg_{e}" for e in range(E)] + ds + ["penalty", "beta"]

    def append(self, step: int, loss: float, risk_dg: Sequence[float], risk_ds: Sequence[float], penalty: float, beta: float) -> None:
        rec = {"step": step, "loss": loss, "penalty": penalty, "beta": beta}
        for e in range(self.num_domains):
            rec[f"risk_dg_{e}"] = risk_dg[e]
            if self.with_ds:
                rec[f"risk_ds_{e}"] = risk_ds[e]
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.records:
                w.writerow([r["step"]] + [repr(float(r[c])) for c in self.columns[1:]])

    @classmethod
    def read_csv(cls, path) -> "History":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        E = sum(1 for c in (rows[0] if rows else {}) if c.startswith("risk_dg_"))
        h = cls(E, with_ds=bool(rows) and "risk_ds_0" in rows[0])
        for r in rows:
            h.records.append({k: (int(v) if k == "step" else float(v)) for k, v in r.items()})
        return h


# ---------------------------------------------------------------- losses


def _is_classification(params: ModelParams) -> bool:
    return params.spec.num_classes > 1


def risk(params: ModelParams, logits: Tensor, y) -> Tensor:
    if _is_classification(params):
        return T.softmax_cross_entropy(logits, y)
    return T.squared_error(logits, np.asarray(y, dtype=np.float64).reshape(-1, 1))


def _mean(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def _penalty(kind: str, z_dg: Tensor, z_spu: Tensor, y, num_classes: int, cache: dict | None = None, key: tuple = ()) -> Tensor:
    if kind == "hsic":
        return class_conditional_hsic(z_dg, z_spu, y, classes=num_classes, cache=cache, key=key)
    if kind == "pcov":
        return partial_covariance_penalty(z_dg, z_spu, y)
    raise ValueError(f"unknown penalty {kind!r}")


def _check_batches(params: ModelParams, batches: Sequence[Batch]) -> None:
    if len(batches) != params.spec.num_domains:
        raise ValueError(f"missing domain batch: got {len(batches)} batches for {params.spec.num_domains} training domains")


def tcri_terms(
    params: ModelParams,
    batches: Sequence[Batch],
    beta: float,
    penalty: str = "hsic",
    use_tic: bool = True,
    bandwidth_cache: dict | None = None,
) -> dict:
    """Loss tensor plus per-domain risks and penalties (as floats)."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    _check_batches(params, batches)
    per_domain, r_dg, r_ds, pens = [], [], [], []
    for e, (X, y) in enumerate(batches):
        z_dg, z_spu = representations(params, X)
        rc = risk(params, head_dg(params, z_dg), y)
        pen = _penalty(penalty, z_dg, z_spu, y, params.spec.num_classes, bandwidth_cache, (e,))
        re = risk(params, head_ds(params, z_dg, z_spu, e), y)
        r_ds.append(re.item())
        # without TIC the domain head is only monitored, never optimised
        term = T.add(rc, re) if use_tic else rc
        if beta > 0:
            term = T.add(term, T.scale(pen, beta))
        per_domain.append(term)
        r_dg.append(rc.item())
        pens.append(pen.item())
    return {"loss": _mean(per_domain), "risk_dg": r_dg, "risk_ds": r_ds, "penalty": float(np.mean(pens))}


def tcri_loss(
    params: ModelParams,
    batches: Sequence[Batch],
    beta: float,
    penalty: str = "hsic",
    use_tic: bool = True,
    bandwidth_cache: dict | None = None,
) -> Tensor:
    return tcri_terms(params, batches, beta, penalty, use_tic, bandwidth_cache)["loss"]


def irm_penalty(params: ModelParams, logits: Tensor, y) -> Tensor:
    """Squared derivative of the risk w.r.t. a scalar multiplier w at w = 1."""
    if _is_classification(params):
        labels = np.asarray(y, dtype=np.intp)
        onehot = np.zeros(logits.shape)
        onehot[np.arange(len(labels)), labels] = 1.0
        resid = T.sub(T.softmax(logits), T.tensor(onehot))
        grad_w = T.mean(T.tsum(T.mul(resid, logits), axis=1))
    else:
        target = T.tensor(np.asarray(y, dtype=np.float64).reshape(logits.shape))
        grad_w = T.scale(T.mean(T.mul(T.sub(logits, target), logits)), 2.0)
    return T.square(grad_w)


def irm_terms(params: ModelParams, batches: Sequence[Batch], lam: float) -> dict:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    _check_batches(params, batches)
    risks, pens = [], []
    for X, y in batches:
        _, logits = forward_dg(params, X)
        risks.append(risk(params, logits, y))
        pens.append(irm_penalty(params, logits, y))
    pen_sum = pens[0]
    for p in pens[1:]:
        pen_sum = T.add(pen_sum, p)
    loss = T.add(_mean(risks), T.scale(pen_sum, lam)) if lam > 0 else _mean(risks)
    return {"loss": loss, "risk_dg": [r.item() for r in risks], "risk_ds": [], "penalty": pen_sum.item()}


def irm_objective(params: ModelParams, batches: Sequence[Batch], lam: float) -> Tensor:
    return irm_terms(params, batches, lam)["loss"]


def vrex_objective(risks: Sequence[Tensor], lam: float) -> Tensor:
    """Mean risk plus lam times the population variance of the risks."""
    if len(risks) < 2:
        raise ValueError("vrex_objective needs at least 2 domains")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    mu = _mean(risks)
    var = _mean([T.square(T.sub(r, mu)) for r in risks])
    return T.add(mu, T.scale(var, lam))


def groupdro_objective(risks: Sequence[Tensor], q: np.ndarray, eta: float) -> tuple[Tensor, np.ndarray]:
    """Exponentiated-gradient step on the group weights, then the q-weighted risk."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (len(risks),) or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("q must be a point on the simplex with one entry per domain")
    r = np.array([t.item() for t in risks])
    logits = np.log(np.maximum(q, 1e-300)) + eta * r
    q_new = np.exp(logits - logits.max())
    q_new /= q_new.sum()
    total = T.scale(risks[0], q_new[0])
    for w, t in zip(q_new[1:], risks[1:]):
        total = T.add(total, T.scale(t, w))
    return total, q_new


# ---------------------------------------------------------------- training loop


class _Sampler:
    """Per-domain minibatches from reshuffled epochs; each epoch has its own stream."""

    def __init__(self, ds: DomainDataset, domain: int, batch_size: int, seed: int):
        self.ds, self.domain, self.seed = ds, domain, seed
        self.batch_size = min(batch_size, ds.n)
        self.epoch, self.pos = 0, 0
        self.order = self._perm()

    def _perm(self) -> np.ndarray:
        return rng.stream(self.seed, rng.SHUFFLE, self.domain, self.epoch).permutation(self.ds.n)

    def next(self) -> Batch:
        if self.pos + self.batch_size > self.ds.n:
            self.epoch += 1
            self.pos = 0
            self.order = self._perm()
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return self.ds.X[idx], self.ds.y[idx]


def _trainable(params: ModelParams, config: TrainConfig) -> list[str]:
    names = params.names()
    if config.freeze_theta_c:
        names = [n for n in names if not n.startswith("theta_c.")]
    if config.objective in ("irm", "vrex", "groupdro"):
        # baselines never touch the auxiliary path
        names = [n for n in names if not n.startswith(("theta_e.", "phi_spu."))]
    return names


def penalty_kind(params: ModelParams) -> str:
    return "hsic" if _is_classification(params) else "pcov"


def train(
    config: TrainConfig,
    datasets: Sequence[DomainDataset],
    arch: ArchSpec,
    callback: Callable[[int, ModelParams], None] | None = None,
    params: ModelParams | None = None,
    history: History | None = None,
) -> tuple[ModelParams, History]:
    """Run ``config.steps`` SGD updates over one batch per training domain.

    ``callback(step, params)`` fires after every ``eval_interval`` updates
    (and after the last one) when ``eval_interval > 0``. A caller-supplied
    ``history`` is filled in place, so it survives an exception.
    """
    if len(datasets) != arch.num_domains:
        raise ValueError(f"got {len(datasets)} datasets for {arch.num_domains} training domains")
    params = init_model(arch, config.seed) if params is None else params
    if config.freeze_theta_c:
        params.tensors["theta_c.W"].data = np.ones_like(params["theta_c.W"].data)
        params.tensors["theta_c.b"].data = np.zeros_like(params["theta_c.b"].data)
    if history is None:
        history = History(arch.num_domains)
    history.num_domains = arch.num_domains
    history.with_ds = config.objective in ("tcri_hsic", "tcri_pcov", "erm")
    samplers = [_Sampler(ds, e, config.batch_size, config.seed) for e, ds in enumerate(datasets)]
    trainable = _trainable(params, config)
    q = np.full(arch.num_domains, 1.0 / arch.num_domains)
    if config.objective == "tcri_pcov":
        kind = "pcov"
    elif config.objective == "tcri_hsic":
        kind = "hsic"
    else:
        kind = penalty_kind(params)

    for step in range(config.steps):
        batches = [s.next() for s in samplers]
        gate = step >= config.anneal_steps
        beta = config.beta_at(step)
        if config.objective in ("tcri_hsic", "tcri_pcov", "erm"):
            out = tcri_terms(params, batches, beta, kind, config.use_tic)
        elif config.objective == "irm":
            out = irm_terms(params, batches, config.lambda_irm if gate else 0.0)
            beta = config.lambda_irm if gate else 0.0
        else:
            risks = [risk(params, forward_dg(params, X)[1], y) for X, y in batches]
            if config.objective == "vrex":
                beta = config.lambda_vrex if gate else 0.0
                loss = vrex_objective(risks, beta)
                rv = np.array([r.item() for r in risks])
                pen = float(rv.var())
            else:
                loss, q = groupdro_objective(risks, q, config.eta_groupdro)
                rv = np.array([r.item() for r in risks])
                pen = float(q @ rv - rv.mean())
                beta = config.eta_groupdro
            out = {"loss": loss, "risk_dg": [r.item() for r in risks], "risk_ds": [], "penalty": pen}

        loss = out["loss"]
        value = loss.item()
        if not math.isfinite(value) or not math.isfinite(out["penalty"]):
            raise TrainingDiverged(step, history)
        T.backward(loss)
        for name in trainable:
            p = params.tensors[name]
            if p.grad is not None:
                p.data = p.data - config.lr * p.grad
            p.grad = None
        history.append(step, value, out["risk_dg"], out["risk_ds"], out["penalty"], beta)
        done = step + 1
        if callback is not None and config.eval_interval > 0 and (done % config.eval_interval == 0 or done == config.steps):
            callback(done, params)
    return params, history
