# scripts/cli.py
"""
命令行入口，一个 YAML 配置驱动一整个实验：

    python scripts/cli.py train-clients config/multiset.yaml
    python scripts/cli.py aggregate config/multiset.yaml --weights 2,1,1,1,1
    python scripts/cli.py baselines config/multiset.yaml
    python scripts/cli.py sweep config/phylo.yaml --axis clients
    python scripts/cli.py identity-checks

输出都在 out/<experiment>/ 下（根目录可用环境变量 EPGFN_OUT 改）。
退出码：0 正常，2 配置错误，3 数值失败，4 超出枚举上限。
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from joblib import Parallel, delayed

from _paths import run_dir
from aggregate import (
    AggregationJob,
    ProductPolicy,
    aggregate_ab,
    fedavg_average,
    pcvi_distribution,
    pcvi_fit,
    pcvi_pool,
    pcvi_to_frame,
)
from config import SWEEP_AXES, build_client_envs, load_run_config, loss_spec
from errors import ConfigError, GFNError, GuardExceeded
from evaluate import (
    DistributionTable,
    effective_target,
    evaluate_model,
    exact_pT,
    identity_checks,
    l1,
    noisy_reward_wrap,
    reward_table,
    robustness_bound_check,
    sample_table,
    topk_avg_log_reward,
    write_report,
)
from policy import PolicySnapshot, read_snapshot, write_snapshot
from train import TrainConfig, centralized_config, derive_seeds, train_clients, train_local

logger = logging.getLogger("epgfn")

IDENTITY_TOL = 1e-8


class _LevelFormatter(logging.Formatter):
    def format(self, record):
        record.levelname = record.levelname.lower()
        return super().format(record)


def setup_logging(verbose: bool = False):
    handler = logging.StreamHandler()
    handler.setFormatter(_LevelFormatter("[%(levelname)s] %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


# ------------------- 小工具 -------------------


def client_train_config(cfg, env, k: int, metrics_path=None, seed=None) -> TrainConfig:
    tr = cfg.data["train"]
    if seed is None:
        seed = derive_seeds(cfg.seed, cfg.n_clients)[k]
    return TrainConfig(
        env=env,
        loss=loss_spec(cfg),
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        lr=tr["lr"],
        seed=seed,
        eval_every=tr["eval_every"],
        metrics_path=str(metrics_path) if metrics_path else None,
        backend=tr["backend"],
        hidden=tuple(tr["hidden"]),
        weight_decay=tr["weight_decay"],
        clip=tr["clip"],
        eval_samples=cfg.data["eval"]["samples"],
        guard=cfg.data["eval"]["guard"],
        progress=tr["progress"],
        name=f"client{k}",
    )


def target_weights(cfg, cli_weights=None):
    if cli_weights:
        w = [float(x) for x in cli_weights.split(",")]
        if len(w) != cfg.n_clients or any(x <= 0 for x in w):
            raise ConfigError("--weights", f"need {cfg.n_clients} positive comma-separated weights")
        return tuple(w)
    # --weights > aggregate.weights > loss.weights
    w = cfg.data["aggregate"]["weights"]
    if w is None:
        w = cfg.data["loss"]["weights"]
    return None if w is None else tuple(float(x) for x in w)


def safe_target(cfg, envs, weights=None):
    try:
        return reward_table(envs, weights, cfg.data["eval"]["guard"])
    except GuardExceeded as e:
        logger.warning("no exact target: %s", e)
        return None


def load_manifest(out: Path, path=None) -> dict:
    path = Path(path) if path else out / "manifest.yaml"
    if not path.exists():
        raise ConfigError("manifest", f"client manifest not found: {path} (run train-clients first)")
    with open(path, "r", encoding="utf-8") as f:
        manifest = yaml.safe_load(f) or {}
    entries = manifest.get("clients") or []
    if not entries:
        raise ConfigError("manifest.clients", "no client snapshots listed")
    for k, e in enumerate(entries):
        if "snapshot" not in e:
            raise ConfigError(f"manifest.clients.{k}.snapshot", "missing")
        p = Path(e["snapshot"])
        if not p.is_absolute():
            p = path.parent / p
        if not p.exists():
            raise ConfigError(f"manifest.clients.{k}.snapshot", f"file not found: {p}")
        e["path"] = p
    return manifest


def load_client_snapshots(manifest) -> list:
    return [PolicySnapshot.loads(read_snapshot(e["path"])) for e in manifest["clients"]]


def merge_report(path: Path, section: dict):
    report = {}
    if path.exists():
        with open(path, "r", encoding="utf-8") as f:
            report = json.load(f)
    report.update(section)
    write_report(path, report)
    return report


def _model_entry(report) -> dict:
    return {"l1": report.l1, "top_k": report.topk, "provenance": report.provenance}


def _evaluate(cfg, name, policy, target, envs, weights, rng) -> dict:
    """target 为 None（终止集不可枚举）时 L1 记 nan，Top-K 照算"""
    ev = cfg.data["eval"]
    ref = target if target is not None else DistributionTable({}, "unavailable")
    rep = evaluate_model(name, policy, ref, envs, weights, ev["top_k"], ev["samples"], rng, ev["guard"])
    if target is None:
        rep.l1 = float("nan")
    logger.info("[%s] L1 = %.4f, top-%d = %.4f (%s)", name, rep.l1, ev["top_k"], rep.topk, rep.provenance)
    return _model_entry(rep)


# ------------------- 子命令 -------------------


def cmd_train_local(args):
    cfg = load_run_config(args.config, args.set)
    envs = build_client_envs(cfg)
    k = args.client
    if not 0 <= k < len(envs):
        raise ConfigError("--client", f"must be in [0, {len(envs) - 1}]")
    out = cfg.out_dir()
    snap, _ = train_local(client_train_config(cfg, envs[k], k, out / f"client{k}_metrics.csv"))
    write_snapshot(out / f"client{k}.gfnpolicy", snap.dumps())
    logger.info("wrote %s", out / f"client{k}.gfnpolicy")
    return 0


def run_clients(cfg, envs, out: Path) -> list:
    configs = [client_train_config(cfg, e, k, out / f"client{k}_metrics.csv") for k, e in enumerate(envs)]
    results = train_clients(configs, cfg.data["clients"]["parallelism"])
    entries = []
    for r in results:
        entry = {"index": r.index, "snapshot": f"client{r.index}.gfnpolicy"}
        if r.ok:
            write_snapshot(out / entry["snapshot"], r.snapshot.dumps())
        else:
            entry["error"] = r.error
        entries.append(entry)
    manifest = {
        "experiment": cfg.name,
        "env_fingerprint": envs[0].fingerprint(),
        "clients": [e for e in entries if "error" not in e],
        "failed": [e for e in entries if "error" in e],
    }
    with open(out / "manifest.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    return results


def cmd_train_clients(args):
    cfg = load_run_config(args.config, args.set)
    envs = build_client_envs(cfg)
    results = run_clients(cfg, envs, cfg.out_dir())
    failed = [r for r in results if not r.ok]
    logger.info("trained %d of %d clients", len(results) - len(failed), len(results))
    return 3 if failed else 0


def run_aggregate(cfg, envs, snapshots, weights, out: Path, target=None):
    ag = cfg.data["aggregate"]
    job = AggregationJob(
        snapshots=snapshots,
        env=envs[0],
        weights=weights,
        epochs=ag["epochs"],
        batch_size=ag["batch_size"],
        lr=ag["lr"],
        epsilon=ag["epsilon"],
        seed=cfg.seed,
        backend=ag["backend"],
        hidden=None if ag["hidden"] is None else tuple(ag["hidden"]),
        weight_decay=cfg.data["train"]["weight_decay"],
        clip=cfg.data["train"]["clip"],
        eval_every=cfg.data["train"]["eval_every"],
        eval_samples=cfg.data["eval"]["samples"],
        guard=cfg.data["eval"]["guard"],
        metrics_path=str(out / "global_metrics.csv"),
        progress=cfg.data["train"]["progress"],
    )
    snap, metrics = aggregate_ab(job, target)
    write_snapshot(out / "global.gfnpolicy", snap.dumps())
    return snap, metrics


def evaluation_report(cfg, envs, weights, snapshots: dict, target=None) -> dict:
    """每个客户端对自己的奖励算 L1，其它模型对乘积目标算 L1"""
    rng = np.random.default_rng(cfg.seed)
    target = target if target is not None else safe_target(cfg, envs, weights)
    models = {}
    for name, snap in snapshots.items():
        policy, _ = snap.to_policy(envs[0])
        if name.startswith("client"):
            k = int(name[len("client"):])
            models[name] = _evaluate(cfg, name, policy, safe_target(cfg, [envs[k]]), [envs[k]], None, rng)
        else:
            models[name] = _evaluate(cfg, name, policy, target, envs, weights, rng)
    report = {
        "experiment": cfg.name,
        "env": cfg.env_kind,
        "clients": cfg.n_clients,
        "weights": None if weights is None else list(weights),
        "target": None if target is None else target.provenance,
        "models": models,
    }
    if target is not None:
        # 同样按样本算的 Top-K，只是样本直接从精确目标里抽
        ev = cfg.data["eval"]
        report["target_top_k"] = topk_avg_log_reward(sample_table(target, ev["samples"], rng), envs, ev["top_k"], weights)
    return report


def aggregation_diagnostics(cfg, envs, snapshots, global_snap, weights=None, target=None) -> dict:
    """
    全局模型实际逼近的 pi_hat（客户端没训好时它不等于乘积目标），以及 D_J 上界检查。
    轨迹数超过 eval.trajectory_guard 或状态数超过 eval.guard 时跳过。
    """
    ev = cfg.data["eval"]
    local_policies = [s.to_policy(envs[0])[0] for s in snapshots]
    try:
        pi_hat = effective_target(local_policies, envs[0], ev["trajectory_guard"], weights)
        p_global = exact_pT(global_snap.to_policy(envs[0])[0], guard=ev["guard"])
        out = {"global_vs_effective_l1": l1(p_global, pi_hat)}
        if target is not None:
            out["target_vs_effective_l1"] = l1(target, pi_hat)
        if weights is None:
            out["bound"] = robustness_bound_check(local_policies, envs, ev["trajectory_guard"], ev["guard"]).as_dict()
    except GuardExceeded as e:
        logger.info("aggregation diagnostics skipped: %s", e)
        return {"skipped": str(e)}
    logger.info("[global] L1 to the effective target = %.4f", out["global_vs_effective_l1"])
    return out


def cmd_aggregate(args):
    cfg = load_run_config(args.config, args.set)
    envs = build_client_envs(cfg)
    out = cfg.out_dir()
    manifest = load_manifest(out, args.manifest)
    snapshots = load_client_snapshots(manifest)
    weights = target_weights(cfg, args.weights)
    target = safe_target(cfg, envs, weights)
    snap, _ = run_aggregate(cfg, envs, snapshots, weights, out, target)

    models = {f"client{e['index']}": s for e, s in zip(manifest["clients"], snapshots)}
    models["global"] = snap
    report = evaluation_report(cfg, envs, weights, models, target)
    client_envs = [envs[e["index"]] for e in manifest["clients"]]
    report["diagnostics"] = aggregation_diagnostics(cfg, client_envs, snapshots, snap, weights, target)
    merge_report(out / "report.json", report)
    return 0


def cmd_evaluate(args):
    cfg = load_run_config(args.config, args.set)
    envs = build_client_envs(cfg)
    out = cfg.out_dir()
    manifest = load_manifest(out, args.manifest)
    models = {f"client{e['index']}": s for e, s in zip(manifest["clients"], load_client_snapshots(manifest))}
    for name in ("global", "fedavg"):
        p = out / f"{name}.gfnpolicy"
        if p.exists():
            models[name] = PolicySnapshot.loads(read_snapshot(p))
    weights = target_weights(cfg, args.weights)
    merge_report(out / "report.json", evaluation_report(cfg, envs, weights, models))
    return 0


def run_baselines(cfg, envs, snapshots, weights, out: Path, which) -> dict:
    ag, ev = cfg.data["aggregate"], cfg.data["eval"]
    rng = np.random.default_rng(cfg.seed)
    target = safe_target(cfg, envs, weights)
    results = {}

    if "pcvi" in which:
        try:
            fits = [pcvi_fit(s, envs[0], ag["pcvi_samples"], rng, ag["pcvi_alpha"]) for s in snapshots]
            pooled = pcvi_pool(fits, weights)
            pcvi_to_frame(pooled).to_csv(out / "pcvi_params.csv", index=False)
            table = pcvi_distribution(pooled, envs[0], ev["guard"])
            topk = topk_avg_log_reward(sample_table(table, ev["samples"], rng), envs, ev["top_k"], weights)
            pcvi_l1 = l1(table, target) if target is not None else float("nan")
            results["pcvi"] = {"l1": pcvi_l1, "top_k": topk, "provenance": "pcvi"}
            logger.info("[pcvi] L1 = %.4f, top-%d = %.4f", pcvi_l1, ev["top_k"], topk)
        except GFNError as e:
            logger.warning("pcvi skipped: %s", e)
            results["pcvi"] = {"error": str(e)}

    if "fedavg" in which:
        avg = fedavg_average(snapshots)
        write_snapshot(out / "fedavg.gfnpolicy", avg.dumps())
        policy, _ = avg.to_policy(envs[0])
        results["fedavg"] = _evaluate(cfg, "fedavg", policy, target, envs, weights, rng)

    if "product" in which:
        policy = ProductPolicy([s.to_policy(envs[0])[0] for s in snapshots], weights)
        results["product"] = _evaluate(cfg, "product", policy, target, envs, weights, rng)

    if "centralized" in which:
        base = client_train_config(cfg, envs[0], 0, seed=cfg.seed)
        snap, metrics = train_local(centralized_config(base, envs, weights))
        metrics.to_csv(out / "centralized_metrics.csv", index=False)
        write_snapshot(out / "centralized.gfnpolicy", snap.dumps())
        policy, _ = snap.to_policy(envs[0])
        results["centralized"] = _evaluate(cfg, "centralized", policy, target, envs, weights, rng)
    return results


def cmd_baselines(args):
    cfg = load_run_config(args.config, args.set)
    envs = build_client_envs(cfg)
    out = cfg.out_dir()
    manifest = load_manifest(out, args.manifest)
    weights = target_weights(cfg, args.weights)
    which = args.only.split(",") if args.only else cfg.data["aggregate"]["baselines"]
    results = run_baselines(cfg, envs, load_client_snapshots(manifest), weights, out, which)
    merge_report(out / "report.json", {"baselines": results})
    return 0


# ------------------- sweep -------------------


def _cell(cfg, axis, value, seed) -> list:
    """sweep 的一个格子，返回 (series, epoch, metric) 行"""
    overrides = [f"seed={seed}"]
    if axis == "clients":
        overrides.append(f"clients.n={value}")
        if cfg.env_kind == "phylo":
            overrides.append(f"env.phylo.clients={value}")
    elif axis == "logz_lr":
        overrides.append(f"loss.logz_lr={value}")
    cell_cfg = cfg.with_overrides(overrides)

    if axis in ("logz_lr", "loss"):
        kinds = [value] if axis == "loss" else (cfg.data["sweep"]["loss"] or ["CB", "TB"])
        rows = []
        env = build_client_envs(cell_cfg)[0]
        for kind in kinds:
            kcfg = cell_cfg.with_overrides([f"loss.kind={kind}"])
            _, metrics = train_local(client_train_config(kcfg, env, 0))
            m = metrics.dropna(subset=["l1"])
            rows += [(kind, int(e), float(v)) for e, v in zip(m["epoch"], m["l1"])]
        return rows

    envs = build_client_envs(cell_cfg)
    target = safe_target(cell_cfg, envs)
    if axis == "noise":
        rng = np.random.default_rng(seed)
        envs = [noisy_reward_wrap(e, float(value), rng) for e in envs]
    configs = [client_train_config(cell_cfg, e, k) for k, e in enumerate(envs)]
    results = train_clients(configs, cell_cfg.data["clients"]["parallelism"])
    failed = [r.error for r in results if not r.ok]
    if failed:
        raise GFNError(f"client training failed: {failed[0]}")
    ag = cell_cfg.data["aggregate"]
    job = AggregationJob(
        snapshots=[r.snapshot for r in results],
        env=envs[0],
        epochs=ag["epochs"],
        batch_size=ag["batch_size"],
        lr=ag["lr"],
        epsilon=ag["epsilon"],
        seed=seed,
        eval_every=cell_cfg.data["train"]["eval_every"],
        eval_samples=cell_cfg.data["eval"]["samples"],
        guard=cell_cfg.data["eval"]["guard"],
        progress=False,
    )
    _, metrics = aggregate_ab(job, target)
    m = metrics.dropna(subset=["l1"])
    return [("global", int(e), float(v)) for e, v in zip(m["epoch"], m["l1"])]


def _safe_cell(cfg, axis, value, seed):
    try:
        return value, seed, _cell(cfg, axis, value, seed), None
    except GFNError as e:
        logger.error("[sweep %s=%s seed=%s] failed: %s", axis, value, seed, e)
        return value, seed, [], f"{type(e).__name__}: {e}"


def cmd_sweep(args):
    cfg = load_run_config(args.config, args.set)
    axis = args.axis
    values = cfg.data["sweep"][axis]
    if not values:
        raise ConfigError(f"sweep.{axis}", "no values listed for this axis")
    out = cfg.out_dir()
    seeds = cfg.data["sweep"]["seeds"]
    cells = [(v, s) for v in values for s in seeds]
    if args.jobs > 1:
        done = Parallel(n_jobs=args.jobs)(delayed(_safe_cell)(cfg, axis, v, s) for v, s in cells)
    else:
        done = [_safe_cell(cfg, axis, v, s) for v, s in cells]

    rows, errors = [], []
    for value, seed, cell_rows, err in done:
        rows += [(value, series, seed, epoch, metric) for series, epoch, metric in cell_rows]
        if err:
            errors.append((value, seed, err))
    df = pd.DataFrame(rows, columns=["axis_value", "series", "seed", "epoch", "metric"])
    df.to_csv(out / f"sweep_{axis}.csv", index=False)
    if errors:
        pd.DataFrame(errors, columns=["axis_value", "seed", "error"]).to_csv(out / f"sweep_{axis}_errors.csv", index=False)
    logger.info("sweep %s: %d cells, %d failed -> %s", axis, len(cells), len(errors), out / f"sweep_{axis}.csv")
    return 0


# ------------------- identity checks -------------------


def cmd_identity_checks(args):
    results = identity_checks(args.seed, args.instances)
    ok = True
    for name, dev in results.items():
        passed = dev == 0 if name == "jeffrey_bound" else dev <= IDENTITY_TOL
        ok &= passed
        logger.info("%-24s %-12.3g %s", name, dev, "ok" if passed else "FAILED")
    out = run_dir("identity_checks", args.output_dir)
    write_report(out / "report.json", {"seed": args.seed, "checks": results, "passed": ok})
    return 0 if ok else 3


# ------------------- main -------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="epgfn", description="embarrassingly parallel GFlowNet experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="YAML run config (path, or a name under config/)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key")
        p.set_defaults(func=func)
        return p

    p = with_config("train-local", cmd_train_local, "train one client")
    p.add_argument("--client", type=int, default=0)
    with_config("train-clients", cmd_train_clients, "train every client (in parallel)")
    for name, func, help_ in (
        ("aggregate", cmd_aggregate, "train the global model from client snapshots"),
        ("baselines", cmd_baselines, "PCVI / FedAvg / product-of-policies / centralized baselines"),
        ("evaluate", cmd_evaluate, "evaluate client and global snapshots"),
    ):
        p = with_config(name, func, help_)
        p.add_argument("--manifest", default=None, help="client manifest (default out/<experiment>/manifest.yaml)")
        p.add_argument("--weights", default=None, help="comma-separated client weights, e.g. 2,1")
        if name == "baselines":
            p.add_argument("--only", default=None, help="comma-separated subset of baselines")
    p = with_config("sweep", cmd_sweep, "rerun the pipeline along one axis")
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--jobs", type=int, default=1, help="run sweep cells in parallel")

    p = sub.add_parser("identity-checks", help="numerical identity checks on tiny environments")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100, help="random instances for the divergence bound")
    p.add_argument("--output-dir", default=None, help="output root (default out/)")
    p.set_defaults(func=cmd_identity_checks)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except GFNError as e:
        logger.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
