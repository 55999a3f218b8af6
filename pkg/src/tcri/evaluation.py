"""Leave-one-domain-out protocol, checkpoint selection, metrics and the TIC cross-matrix."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng
from .independence import class_conditional_hsic, partial_covariance_penalty
from .models import ArchSpec, ModelParams, config_hash, forward_dg, forward_ds, representations
from .scm import DomainDataset
from .trainer import History, TrainConfig, train

SELECTION_METHODS = ("source_acc", "tcri", "oracle")


@dataclass
class Checkpoint:
    step: int
    params: ModelParams


@dataclass
class RunResult:
    test_domain: int
    method: str
    accuracy: float
    checkpoint_step: int
    seed: int
    config_fingerprint: str
    source_accuracy: float = float("nan")
    selection_statistic: float = float("nan")
    tic_matrix: dict | None = None
    history: History | None = field(default=None, repr=False)
    params: ModelParams | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {
            "test_domain": self.test_domain,
            "method": self.method,
            "accuracy": self.accuracy,
            "checkpoint_step": self.checkpoint_step,
            "source_accuracy": self.source_accuracy,
            "selection_statistic": self.selection_statistic,
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
        }


def metrics(values: Sequence[float]) -> tuple[float, float, float]:
    """(mean, population std, min)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("metrics needs at least one value")
    return float(v.mean()), float(v.std()), float(v.min())


def predict(params: ModelParams, X) -> np.ndarray:
    """Predictions of theta_c o Phi_dg; the only path used for headline numbers."""
    _, out = forward_dg(params, X)
    if params.spec.num_classes > 1:
        return out.data.argmax(axis=1)
    return out.data[:, 0]


def accuracy(params: ModelParams, ds: DomainDataset) -> float:
    return float(np.mean(predict(params, ds.X) == ds.y))


def ds_accuracy(params: ModelParams, ds: DomainDataset, head: int) -> float:
    logits = forward_ds(params, ds.X, head)
    return float(np.mean(logits.data.argmax(axis=1) == ds.y))


def stratified_split(ds: DomainDataset, fraction: float, seed: int, key: int = 0) -> tuple[DomainDataset, DomainDataset]:
    """(rest, held) with ``fraction`` of every label value moved to ``held``."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    g = rng.stream(seed, rng.SPLIT, key, ds.e)
    labels = ds.y if np.issubdtype(np.asarray(ds.y).dtype, np.integer) else np.zeros(ds.n, dtype=np.int64)
    held = []
    for k in np.unique(labels):
        idx = g.permutation(np.flatnonzero(labels == k))
        held.append(idx[: int(round(fraction * idx.size))])
    held_idx = np.sort(np.concatenate(held))
    mask = np.ones(ds.n, dtype=bool)
    mask[held_idx] = False
    return ds.subset(np.flatnonzero(mask)), ds.subset(held_idx)


def tcri_statistic(params: ModelParams, datasets: Sequence[DomainDataset]) -> float:
    """Conditional-independence penalty between Phi_dg and Phi_spu, averaged over domains."""
    vals = []
    for ds in datasets:
        z_dg, z_spu = representations(params, ds.X)
        if params.spec.num_classes > 1:
            vals.append(class_conditional_hsic(z_dg.data, z_spu.data, ds.y, classes=params.spec.num_classes).item())
        else:
            vals.append(partial_covariance_penalty(z_dg.data, z_spu.data, ds.y).item())
    return float(np.mean(vals))


def select_checkpoint(
    checkpoints: Sequence[Checkpoint | ModelParams],
    source_val: Sequence[DomainDataset],
    method: str,
    target_val: DomainDataset | None = None,
) -> tuple[int, dict]:
    """Index of the chosen checkpoint and the statistics behind the choice.

    Remaining ties resolve to the earliest checkpoint.
    """
    if method not in SELECTION_METHODS:
        raise ValueError(f"unknown selection method {method!r}")
    if not checkpoints:
        raise ValueError("select_checkpoint: empty checkpoint list")
    if method == "oracle" and target_val is None:
        raise ValueError("oracle selection needs target validation data")
    plist = [c.params if isinstance(c, Checkpoint) else c for c in checkpoints]
    src = [float(np.mean([accuracy(p, ds) for ds in source_val])) for p in plist]
    stats = {"source_accuracy": src}
    if len(plist) == 1:
        return 0, stats
    if method == "source_acc":
        keys = [(-a, i) for i, a in enumerate(src)]
    elif method == "tcri":
        pen = [tcri_statistic(p, source_val) for p in plist]
        stats["tcri"] = pen
        # penalties equal up to roundoff count as ties, broken by source accuracy
        best = min(pen)
        tied = [i for i in range(len(plist)) if pen[i] <= best + max(1e-12, 1e-9 * abs(best))]
        keys = [(-src[i], i) for i in tied]
    else:
        tgt = [accuracy(p, target_val) for p in plist]
        stats["target_accuracy"] = tgt
        keys = [(-a, i) for i, a in enumerate(tgt)]
    return int(min(keys)[-1]), stats


def tic_cross_matrix(params: ModelParams, eval_sets: dict[int, DomainDataset], train_domains: Sequence[int]) -> dict:
    """Accuracy of the DG classifier and of every DS head on every evaluation domain.

    ``train_domains[j]`` is the original domain id of head j. Returns
    ``{"dg": {d: acc}, "ds": {head_domain: {d: acc}}}``.
    """
    if params.spec.num_domains != len(train_domains):
        raise ValueError(f"missing theta_e: model has {params.spec.num_domains} heads, {len(train_domains)} training domains named")
    out = {"dg": {d: accuracy(params, ds) for d, ds in eval_sets.items()}, "ds": {}}
    for j, dom in enumerate(train_domains):
        out["ds"][dom] = {d: ds_accuracy(params, ds, j) for d, ds in eval_sets.items()}
    return out


def tic_table(matrix: dict, domains: Sequence[int]) -> list[float]:
    """Flatten a cross-matrix to one table row; NaN where no head exists."""
    row = [matrix["dg"][d] for d in domains]
    for ev in domains:
        for head in domains:
            row.append(matrix["ds"][head][ev] if head in matrix["ds"] else float("nan"))
    return row


def leave_one_domain_out(
    config: TrainConfig,
    domains: Sequence[DomainDataset],
    arch_for: Callable[[int], ArchSpec],
    methods: Sequence[str] = ("source_acc",),
    val_fraction: float = 0.2,
    with_tic: bool = False,
    test_domains: Sequence[int] | None = None,
) -> list[RunResult]:
    """Train on every domain but one, select checkpoints, score the held-out domain.

    ``arch_for(num_training_domains)`` builds the architecture. Only
    checkpoints at or after ``anneal_steps`` are candidates.
    """
    if len(domains) < 2:
        raise ValueError("leave_one_domain_out needs at least 2 domains")
    fingerprint = config_hash(config.to_dict())
    splits = [stratified_split(ds, val_fraction, config.seed) for ds in domains]
    results: list[RunResult] = []
    for i in (range(len(domains)) if test_domains is None else test_domains):
        train_ids = [j for j in range(len(domains)) if j != i]
        train_sets = [splits[j][0] for j in train_ids]
        val_sets = [splits[j][1] for j in train_ids]
        target_test, target_val = splits[i]
        ckpts: list[Checkpoint] = []

        def keep(step, params):
            if step >= config.anneal_steps or step == config.steps:
                ckpts.append(Checkpoint(step, params.copy()))

        cfg = config if config.eval_interval > 0 else replace(config, eval_interval=max(config.steps, 1))
        params, history = train(cfg, train_sets, arch_for(len(train_ids)), callback=keep)
        if not ckpts:
            ckpts.append(Checkpoint(cfg.steps, params.copy()))
        for method in methods:
            idx, stats = select_checkpoint(ckpts, val_sets, method, target_val if method == "oracle" else None)
            chosen = ckpts[idx]
            tic = None
            if with_tic:
                eval_sets = {j: splits[j][1] for j in train_ids}
                eval_sets[i] = target_test
                tic = tic_cross_matrix(chosen.params, dict(sorted(eval_sets.items())), train_ids)
            stat = stats.get("tcri", stats.get("target_accuracy", stats["source_accuracy"]))[idx]
            results.append(
                RunResult(
                    test_domain=i, method=method, accuracy=accuracy(chosen.params, target_test),
                    checkpoint_step=chosen.step, seed=config.seed, config_fingerprint=fingerprint,
                    source_accuracy=stats["source_accuracy"][idx], selection_statistic=float(stat),
                    tic_matrix=tic, history=history, params=chosen.params,
                )
            )
    return results


def summarize(results: Sequence[RunResult]) -> dict:
    """avg / std / min of held-out accuracy per selection method."""
    out = {}
    for method in dict.fromkeys(r.method for r in results):
        accs = [r.accuracy for r in results if r.method == method]
        avg, std, worst = metrics(accs)
        out[method] = {"average": avg, "std": std, "worst_case": worst, "per_domain": accs}
    return out


def write_results(results: Sequence[RunResult], csv_path, json_path=None) -> None:
    rows = [r.row() for r in results]
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["test_domain"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    if json_path is not None:
        Path(json_path).write_text(json.dumps(summarize(results), indent=2, sort_keys=True) + "\n")
