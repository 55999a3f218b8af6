"""Command-line entry point: ``tcri {simulate,train,evaluate,sweep,report}``."""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from dataclasses import replace
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .evaluation import (
    Checkpoint, SELECTION_METHODS, RunResult, accuracy, metrics, select_checkpoint,
    stratified_split, tic_cross_matrix, tic_table, write_results,
)
from .models import ArchSpec, config_hash, load_checkpoint, save_checkpoint
from .scm import (
    DomainDataset, latent_audit, load_dataset, load_mnist, make_colored_mnist, make_scm_spec,
    sample_linear_sim, sample_scm_domains, save_dataset,
)
from .trainer import History, TrainingDiverged, train


class CliError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(command: str, cfg: RunConfig, seed: int, paths: dict, started: float, **extra) -> dict:
    out = {
        "tool": "tcri",
        "version": __version__,
        "command": command,
        "config": cfg.as_dict(),
        "seed": int(seed),
        "paths": paths,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    out.update(extra)
    return out


# ---------------------------------------------------------------- simulate


def generate(cfg: RunConfig, seed: int) -> list[DomainDataset]:
    d = cfg.data
    gen = d.get("generator")
    if gen is None:
        raise ConfigError("missing required field data.generator")
    if gen == "linear_sim":
        return sample_linear_sim(d.get("sigma_e", (0.1, 0.2)), d.get("sigma_y", 0.25), d.get("n", 5000), seed)
    if gen == "colored_mnist":
        if "mnist_dir" not in d:
            raise ConfigError("missing required field data.mnist_dir for generator colored_mnist")
        images, labels = load_mnist(d["mnist_dir"])
        if "mnist_limit" in d:
            images, labels = images[: d["mnist_limit"]], labels[: d["mnist_limit"]]
        return make_colored_mnist(images, labels, d.get("flip_probs", (0.1, 0.2, 0.9)), d.get("label_noise", 0.25), seed)
    spec = make_scm_spec(
        gen, m=d.get("m", 4), o=d.get("o", 4),
        zc_scales=d.get("zc_scales", (1.0, 1.0, 1.0)), ze_scales=d.get("ze_scales", (0.1, 0.5, 1.0)),
        label_noise=d.get("label_noise", 0.0), task=d.get("task", "classification"), seed=seed,
    )
    return sample_scm_domains(spec, d.get("n", 5000), seed)


def expected_domains(cfg: RunConfig) -> int | None:
    d = cfg.data
    for key, default in (("sigma_e", 2), ("flip_probs", 3), ("zc_scales", 3)):
        if key in d:
            return len(d[key])
    gen = d.get("generator")
    return {"linear_sim": 2, "colored_mnist": 3}.get(gen, 3 if gen else None)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.data.get("seed", 0)
    started = time.perf_counter()
    domains = generate(cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for ds in domains:
        save_dataset(ds, out / f"domain_{ds.e}")
        files.append(f"domain_{ds.e}.bin")
        y = np.asarray(ds.y)
        balance = f"P(y=1)={np.mean(y == 1):.3f}" if np.issubdtype(y.dtype, np.integer) else f"mean(y)={y.mean():.3f} var(y)={y.var():.4f}"
        audit = f" latent partial corr={latent_audit(ds):.4f}" if ds.z_c is not None else ""
        print(f"domain {ds.e}: n={ds.n} {balance}{audit}")
    _write_json(out / "manifest.json", _manifest("simulate", cfg, seed, {"datasets": files}, started))
    return 0


# ---------------------------------------------------------------- train


def load_domains(data_dir) -> list[DomainDataset]:
    d = Path(data_dir)
    paths = sorted(d.glob("domain_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise CliError(f"no domain files in {d}")
    return [load_dataset(p.with_suffix("")) for p in paths]


def arch_from(cfg: RunConfig, domains: list[DomainDataset], num_train: int) -> ArchSpec:
    a = cfg.arch
    y = np.asarray(domains[0].y)
    classes = int(max(int(np.max(ds.y)) for ds in domains)) + 1 if np.issubdtype(y.dtype, np.integer) else 1
    backbone = a.get("backbone", "linear")
    return ArchSpec(
        input_dim=domains[0].X.shape[1], m=a.get("m", 1), o=a.get("o", 1), num_classes=max(classes, 2) if classes > 1 else 1,
        num_domains=num_train, backbone=backbone, hidden=a.get("hidden", ()) if backbone == "mlp" else (),
        rep_bias=a.get("rep_bias", True),
    )


def run_training(cfg: RunConfig, data_dir, out_dir, seed: int | None = None) -> Path:
    """Train on every domain except ``train.test_domain``; write checkpoints, history, splits, manifest."""
    started = time.perf_counter()
    domains = load_domains(data_dir)
    want = expected_domains(cfg)
    if want is not None and want != len(domains):
        raise CliError(f"config describes {want} domains but {data_dir} holds {len(domains)}")
    tc = cfg.train_config(**({"seed": seed} if seed is not None else {}))
    if tc.eval_interval <= 0:
        # the final step is always checkpointed
        tc = replace(tc, eval_interval=max(tc.steps, 1))
    test = cfg.train.get("test_domain")
    if test is not None and not 0 <= test < len(domains):
        raise CliError(f"train.test_domain={test} outside 0..{len(domains) - 1}")
    frac = cfg.train.get("val_fraction", 0.2)
    train_ids = [e for e in range(len(domains)) if e != test]
    arch = arch_from(cfg, domains, len(train_ids))
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "val").mkdir(exist_ok=True)
    train_sets = []
    for e in train_ids:
        rest, held = stratified_split(domains[e], frac, tc.seed)
        train_sets.append(rest)
        save_dataset(held, out / "val" / f"domain_{e}")
    if test is not None:
        (out / "target").mkdir(exist_ok=True)
        t_test, t_val = stratified_split(domains[test], frac, tc.seed)
        save_dataset(t_val, out / "target" / "val")
        save_dataset(t_test, out / "target" / "test")
    fingerprint = config_hash({"config": cfg.as_dict(), "seed": tc.seed})
    history = History(len(train_ids))
    hist_path = out / "history.csv"

    def checkpoint(step, params):
        save_checkpoint(params, out / "checkpoints" / f"step_{step:06d}", step, fingerprint)
        history.write_csv(hist_path)

    status = "complete"
    try:
        train(tc, train_sets, arch, callback=checkpoint, history=history)
    except TrainingDiverged as exc:
        status = f"diverged at step {exc.step}"
    finally:
        history.write_csv(hist_path)
    manifest = _manifest(
        "train", cfg, tc.seed, {"history": "history.csv", "checkpoints": "checkpoints", "val": "val"}, started,
        train_config=tc.to_dict(), arch=arch.to_dict(), train_domains=train_ids, test_domain=test,
        config_hash=fingerprint, status=status, data_dir=str(Path(data_dir).resolve()),
    )
    _write_json(out / "manifest.json", manifest)
    if status != "complete":
        raise CliError(f"training {status}; partial history in {hist_path}")
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    run_training(cfg, args.data, args.out, args.seed)
    print(f"wrote run to {args.out}")
    return 0


# ---------------------------------------------------------------- evaluate


def _load_run(run_dir: Path):
    manifest = json.loads((run_dir / "manifest.json").read_text())
    ckpts = []
    for p in sorted((run_dir / "checkpoints").glob("step_*.json")):
        params, meta = load_checkpoint(p.with_suffix(""))
        ckpts.append(Checkpoint(meta["step"], params))
    anneal = manifest["train_config"]["anneal_steps"]
    last = manifest["train_config"]["steps"]
    ckpts = [c for c in ckpts if c.step >= anneal or c.step == last] or ckpts
    val = [load_dataset(run_dir / "val" / f"domain_{e}") for e in manifest["train_domains"]]
    target = None
    if (run_dir / "target" / "test.json").exists():
        target = (load_dataset(run_dir / "target" / "val"), load_dataset(run_dir / "target" / "test"))
    return manifest, ckpts, val, target


def evaluate_runs(run_dirs, methods, with_tic: bool = False) -> tuple[list[RunResult], list[dict]]:
    results, tic_rows = [], []
    for run_dir in map(Path, run_dirs):
        manifest, ckpts, val, target = _load_run(run_dir)
        if not ckpts:
            raise CliError(f"{run_dir}: no checkpoints")
        for method in methods:
            if method == "oracle" and target is None:
                raise CliError(f"{run_dir}: oracle selection needs target data")
            idx, stats = select_checkpoint(ckpts, val, method, target[0] if method == "oracle" else None)
            chosen = ckpts[idx]
            test_domain = manifest["test_domain"]
            acc = accuracy(chosen.params, target[1]) if target is not None else float("nan")
            stat = stats.get("tcri", stats.get("target_accuracy", stats["source_accuracy"]))[idx]
            results.append(RunResult(
                test_domain=-1 if test_domain is None else test_domain, method=method, accuracy=acc,
                checkpoint_step=chosen.step, seed=manifest["seed"], config_fingerprint=manifest["config_hash"],
                source_accuracy=stats["source_accuracy"][idx], selection_statistic=float(stat),
            ))
            if with_tic and target is not None:
                sets = {e: ds for e, ds in zip(manifest["train_domains"], val)}
                sets[test_domain] = target[1]
                sets = dict(sorted(sets.items()))
                matrix = tic_cross_matrix(chosen.params, sets, manifest["train_domains"])
                tic_rows.append({"run": str(run_dir), "method": method, "test_domain": test_domain, "domains": list(sets), "row": tic_table(matrix, list(sets))})
    return results, tic_rows


def _objective_of(run_dir) -> str:
    tc = json.loads((Path(run_dir) / "manifest.json").read_text())["train_config"]
    return f"{tc['objective']}" + ("" if tc.get("use_tic", True) else "_notic")


def write_evaluation(results, tic_rows, run_dirs, methods, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_results(results, out / "results.csv", out / "summary.json")
    labels = [_objective_of(r) for r in run_dirs for _ in methods]
    table = {}
    for label, r in zip(labels, results):
        table.setdefault((label, r.method), []).append(r.accuracy)
    print(f"{'objective':<16}{'selection':<12}{'average':>9}{'std':>8}{'worst':>8}")
    summary = {}
    for (label, method), accs in sorted(table.items()):
        avg, std, worst = metrics(accs)
        summary[f"{label}/{method}"] = {"average": avg, "std": std, "worst_case": worst}
        print(f"{label:<16}{method:<12}{100 * avg:>9.1f}{100 * std:>8.1f}{100 * worst:>8.1f}")
    _write_json(out / "summary_by_objective.json", summary)
    if tic_rows:
        with open(out / "tic.csv", "w") as fh:
            doms = tic_rows[0]["domains"]
            head = [f"dg_{d}" for d in doms] + [f"ds{h}_on_{d}" for d in doms for h in doms]
            fh.write(",".join(["run", "method", "test_domain"] + head) + "\n")
            for t in tic_rows:
                fh.write(",".join([t["run"], t["method"], str(t["test_domain"])] + [f"{v:.4f}" for v in t["row"]]) + "\n")


def cmd_evaluate(args) -> int:
    methods = args.selection or ["source_acc"]
    results, tic_rows = evaluate_runs(args.runs, methods, args.tic)
    write_evaluation(results, tic_rows, args.runs, methods, Path(args.out))
    return 0


# ---------------------------------------------------------------- sweep


def _sweep_worker(job):
    text, data_dir, run_dir = job
    cfg = parse_config(text)
    run_training(cfg, data_dir, run_dir)
    return run_dir


def sweep_jobs(cfg: RunConfig, data_dir, out: Path, seed: int | None) -> list[tuple[str, str, str]]:
    sw = cfg.sweep
    n_domains = len(load_domains(data_dir))
    objectives = sw.get("objective", (cfg.train.get("objective", "tcri_hsic"),))
    betas = sw.get("beta", (cfg.train.get("beta", 100.0),))
    seeds = sw.get("seeds", (seed if seed is not None else cfg.train.get("seed", 0),))
    tests = sw.get("test_domains", tuple(range(n_domains)))
    jobs = []
    for obj, beta, s, t in itertools.product(objectives, betas, seeds, tests):
        run = RunConfig(data=dict(cfg.data), arch=dict(cfg.arch), train=dict(cfg.train), eval=dict(cfg.eval))
        run.train.update(objective=obj, beta=beta, seed=s, test_domain=t)
        name = f"{obj}_beta{beta:g}_seed{s}_test{t}"
        jobs.append((dump_config(run), str(data_dir), str(out / "runs" / name)))
    return jobs


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    jobs = sweep_jobs(cfg, args.data, out, args.seed)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            runs = list(pool.map(_sweep_worker, jobs))
    else:
        runs = [_sweep_worker(j) for j in jobs]
    print(f"completed {len(runs)} runs")
    methods = args.selection or list(cfg.eval.get("selection", ("source_acc",)))
    results, tic_rows = evaluate_runs(runs, methods, cfg.eval.get("tic", False))
    write_evaluation(results, tic_rows, runs, methods, out)
    return 0


# ---------------------------------------------------------------- report


def cmd_report(args) -> int:
    if args.mode == "table2":
        print(f"{'run':<40}{'w(z_c)':>10}{'w(z_e)':>10}")
        data_dir = None
        for run_dir in map(Path, args.runs):
            manifest = json.loads((run_dir / "manifest.json").read_text())
            data_dir = manifest.get("data_dir", data_dir)
            saved = sorted((run_dir / "checkpoints").glob("step_*.json"))
            if not saved:
                raise CliError(f"{run_dir}: no checkpoints")
            last = saved[-1]
            params, _ = load_checkpoint(last.with_suffix(""))
            w = params["phi_dg.W"].data.reshape(-1)
            label = manifest["train_config"]["objective"]
            print(f"{label:<40}{w[0]:>10.2f}{w[1]:>10.2f}")
        if data_dir is not None:
            doms = load_domains(data_dir)
            zc = np.concatenate([d.X[:, 0] for d in doms])
            y = np.concatenate([d.y for d in doms])
            print(f"{'oracle (OLS of y on z_c)':<40}{float(zc @ y / (zc @ zc)):>10.2f}{0.0:>10.2f}")
        return 0
    summary = json.loads((Path(args.runs[0]) / "summary_by_objective.json").read_text())
    print(f"{'objective/selection':<32}{'average':>9}{'std':>8}{'worst':>8}")
    for key, s in sorted(summary.items()):
        print(f"{key:<32}{100 * s['average']:>9.1f}{100 * s['std']:>8.1f}{100 * s['worst_case']:>8.1f}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcri", description="Dual-representation domain generalization experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate domain datasets")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="select checkpoints and score held-out domains")
    e.add_argument("--runs", nargs="+", required=True)
    e.add_argument("--selection", action="append", choices=SELECTION_METHODS)
    e.add_argument("--out", required=True)
    e.add_argument("--tic", action="store_true", help="also emit the DG/DS cross-matrix")
    e.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep", help="train a grid of runs, then evaluate them")
    w.add_argument("--config", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--seed", type=int)
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("--selection", action="append", choices=SELECTION_METHODS)
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="print tables from finished runs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--mode", choices=("table2", "summary"), default="summary")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CliError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
