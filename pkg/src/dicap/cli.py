"""Command-line experiment runner.

    dicap <command> [--config PATH | --preset NAME] [--seed N] [--workers K]
                    [--out DIR] [--set section.key=value ...]

Each run writes ``summary.json`` atomically at the end, plus ``curve.csv``,
``model.bin`` and ``qgraph.json``/``qgraph.dot`` where they apply.  The
exit code is 0 exactly when a complete record with status "ok" was written.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .channels import ChannelSpec, FixedPolicy, exact_capacity_oracle
from .config import COMMANDS, ConfigError, ExperimentConfig, preset_names
from .nn import save_params
from .policy import GeneratorPolicy, train_di, train_dine, train_mi
from .qgraph import count_qgraphs, qgraph_pipeline
from .shaping import run_shaping, write_qam_json, write_shaping_csv


def build_id() -> str:
    """Content hash of the package sources (stable across checkouts)."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*")):
        if path.suffix in (".py", ".ini") and "__pycache__" not in path.parts:
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return "src-" + h.hexdigest()[:12]


def write_json_atomic(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    os.replace(tmp, path)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not serializable: {type(v).__name__}")


def write_curve(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def _tag(rows, point):
    return [{"point": point, **r} for r in rows]


# ---------------------------------------------------------------------------
# commands; each returns (status, metrics, artifacts)


def _estimate_job(args):
    cfg_dict, point, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    spec = cfg.channel_spec(**point)
    feedback = cfg["channel"]["feedback"]
    pmf = cfg["estimate"]["pmf"] or [1.0 / spec.n_inputs] * spec.n_inputs
    if cfg["run"]["estimator"] == "mine":
        mcfg = cfg.mi_train_config()
        mcfg.lr_phi = 0.0
        res = train_mi(spec, mcfg, seed=seed, phi0=np.log(np.asarray(pmf)))
        metrics = {"mi_bits": res.report.mi if res.report else None, "stderr_bits": res.report.stderr if res.report else None}
        return res.status, metrics, res.curve, res.critic.named_params(), res.diagnostic
    res = train_dine(spec, FixedPolicy(pmf), cfg.policy_grad_config(), feedback, seed=seed)
    metrics = res.report.as_dict() if res.report else {}
    metrics["stopped"] = res.stopped
    return res.status, metrics, res.curve, res.dine.named_params(), res.diagnostic


def _optimize_job(args):
    cfg_dict, point, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    spec = cfg.channel_spec(**point)
    feedback = cfg["channel"]["feedback"]
    if cfg["run"]["estimator"] == "mine":
        res = train_mi(spec, cfg.mi_train_config(), seed=seed)
        metrics = {
            "mi_bits": res.report.mi if res.report else None,
            "stderr_bits": res.report.stderr if res.report else None,
            "pmf": res.pmf.tolist(),
            "stopped": res.stopped,
        }
        tensors = {"phi": _const(res.phi), **res.critic.named_params()}
        return res.status, metrics, res.curve, tensors, res.diagnostic
    res = train_di(spec, cfg.policy_grad_config(), feedback, seed=seed)
    metrics = res.report.as_dict() if res.report else {}
    metrics["stopped"] = res.stopped
    metrics["iterations"] = res.iterations
    tensors = {**res.generator.named_params(), **res.dine.named_params()}
    return res.status, metrics, res.curve, tensors, res.diagnostic


def _const(arr):
    from .autodiff import Tensor

    return Tensor(np.asarray(arr, dtype=np.float64))


def _run_points(job, cfg: ExperimentConfig, out: Path, workers: int):
    points = cfg.sweep_points()
    seed = cfg["run"]["seed"]
    jobs = [(cfg.to_dict(), pt, seed + i) for i, pt in enumerate(points)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(j) for j in jobs]
    curve, per_point, statuses, tensors = [], [], [], {}
    feedback = cfg["channel"]["feedback"]
    for i, (pt, (status, metrics, rows, named, diag)) in enumerate(zip(points, results)):
        curve += _tag(rows, i)
        spec = cfg.channel_spec(**pt)
        entry = {"point": i, "channel": pt, "status": status, **metrics}
        entry["capacity_oracle_bits"] = exact_capacity_oracle(spec, feedback=feedback)
        if diag:
            entry["diagnostic"] = diag
        per_point.append(entry)
        statuses.append(status)
        prefix = f"p{i}." if len(points) > 1 else ""
        tensors.update({prefix + k: v for k, v in named.items()})
    write_curve(out / "curve.csv", curve)
    save_params(out / "model.bin", tensors, {"config": cfg.to_dict()})
    status = "ok" if all(s == "ok" for s in statuses) else "failed"
    return status, {"points": per_point}, {"curve": "curve.csv", "model": "model.bin"}


def cmd_estimate(cfg, out, workers):
    return _run_points(_estimate_job, cfg, out, workers)


def cmd_optimize(cfg, out, workers):
    return _run_points(_optimize_job, cfg, out, workers)


def cmd_qgraph(cfg, out, workers):
    spec = cfg.channel_spec()
    seed = cfg["run"]["seed"]
    feedback = cfg["channel"]["feedback"]
    q = cfg["qgraph"]
    metrics, artifacts, curve = {}, {}, []
    tensors = {}
    lb = None
    policy = FixedPolicy(np.full(spec.n_inputs, 1.0 / spec.n_inputs)) if not spec.memoryless else None
    if not spec.memoryless and q["policy"] == "learned":
        res = train_di(spec, cfg.policy_grad_config(), feedback, seed=seed)
        if res.status != "ok":
            write_curve(out / "curve.csv", _tag(res.curve, 0))
            return "failed", {"diagnostic": res.diagnostic}, {"curve": "curve.csv"}
        policy = GeneratorPolicy(res.generator)
        lb = res.report.di
        curve = _tag(res.curve, 0)
        metrics["optimizer"] = res.report.as_dict()
        tensors.update(res.generator.named_params())
    pipe = qgraph_pipeline(
        spec, policy, feedback, cfg.qnet_config(), cfg.bound_config(), n_extract=q["n_extract"],
        k_min=q["k_min"], k_max=q["k_max"], purity=q["purity"], seed=seed, c_lb_proxy=lb,
    )
    graph, table, bound = pipe.graph, pipe.table, pipe.bound
    if pipe.qnet is not None:
        tensors.update(pipe.qnet.named_params())
        metrics["qnet_final_ce_nats"] = pipe.qnet_losses[-1]
    metrics.update(bound.as_dict())
    metrics["nodes"] = graph.n_nodes
    metrics["purity"] = graph.purity
    metrics["deterministic_complete"] = graph.is_deterministic_complete()
    metrics["k_table"] = [{"k": k, "purity": p, "error": e} for k, p, e in table]
    (out / "qgraph.json").write_text(graph.to_json())
    (out / "qgraph.dot").write_text(graph.to_dot())
    artifacts.update({"qgraph_json": "qgraph.json", "qgraph_dot": "qgraph.dot"})
    write_curve(out / "curve.csv", curve)
    artifacts["curve"] = "curve.csv"
    if tensors:
        save_params(out / "model.bin", tensors, {"config": cfg.to_dict()})
        artifacts["model"] = "model.bin"
    return "ok", metrics, artifacts


def _shape_job(args):
    cfg_dict, snr, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    sh = cfg["shaping"]
    return run_shaping(
        sh["constellation"], sh["order"], [snr], cfg.mi_train_config(), seed=seed,
        amplitude=sh["amplitude"], order=sh["quadrature_order"],
    )[0]


def cmd_shape(cfg, out, workers):
    sh = cfg["shaping"]
    seed = cfg["run"]["seed"]
    jobs = [(cfg.to_dict(), snr, seed + i) for i, snr in enumerate(sh["snr_db"])]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_shape_job, jobs))
    else:
        results = [_shape_job(j) for j in jobs]
    write_shaping_csv(results, out / "curve.csv")
    artifacts = {"curve": "curve.csv"}
    if sh["constellation"] == "qam":
        write_qam_json(results, out / "qam_pmf.json")
        artifacts["qam_pmf"] = "qam_pmf.json"
    return "ok", {"results": [r.as_dict() for r in results]}, artifacts


def cmd_oracle(cfg, out, workers):
    spec = cfg.channel_spec()
    feedback = cfg["channel"]["feedback"]
    value = exact_capacity_oracle(spec, feedback=feedback)
    if value is None:
        print(f"no closed-form oracle for {spec.kind} (feedback={feedback})")
        return "failed", {"capacity_bits": None}, {}
    print(f"{value:.6f} bits")
    return "ok", {"capacity_bits": value}, {}


def cmd_lemma2(cfg, out, workers):
    lm = cfg["lemma2"]
    rows = []
    print(f"{'m':>3} {'|Y|':>4} {'N_GP':>24} {'e^(m ln m)':>24} holds")
    for ny in lm["outputs"]:
        for m in range(1, lm["m_max"] + 1):
            c = count_qgraphs(m, ny)
            rows.append(
                {"m": m, "n_outputs": ny, "n_gp": str(c.value), "log_n_gp": c.log_value, "log_bound": c.log_bound, "holds": c.holds}
            )
            print(f"{m:>3} {ny:>4} {math.exp(c.log_value):>24.6g} {math.exp(c.log_bound):>24.6g} {str(c.holds).lower()}")
    status = "ok" if all(r["holds"] for r in rows) else "failed"
    return status, {"rows": rows, "all_hold": status == "ok"}, {}


DISPATCH = {
    "estimate": cmd_estimate,
    "optimize": cmd_optimize,
    "qgraph": cmd_qgraph,
    "shape": cmd_shape,
    "oracle": cmd_oracle,
    "lemma2": cmd_lemma2,
}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dicap", description="Capacity estimation and optimization experiments.")
    ap.add_argument("command", choices=COMMANDS)
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--config", help="INI config file")
    src.add_argument("--preset", help=f"shipped preset ({', '.join(preset_names())})")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")
    ap.add_argument("--m-max", type=int, help="lemma2: largest graph size")
    return ap


def load_config(ns) -> ExperimentConfig:
    if ns.config:
        cfg = ExperimentConfig.from_file(ns.config)
    elif ns.preset:
        cfg = ExperimentConfig.from_preset(ns.preset)
    else:
        cfg = ExperimentConfig.defaults()
    cfg.set("run.command", ns.command)
    for item in ns.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected SECTION.KEY=VALUE")
        cfg.set(key.strip(), value)
    if ns.seed is not None:
        cfg.set("run.seed", str(ns.seed))
    if ns.workers is not None:
        cfg.set("run.workers", str(ns.workers))
    if ns.out is not None:
        cfg.set("run.out", ns.out)
    if ns.m_max is not None:
        cfg.set("lemma2.m_max", str(ns.m_max))
    cfg.validate()
    return cfg


def run(cfg: ExperimentConfig) -> dict:
    """Dispatch one experiment and write its record; returns the record."""
    cfg.validate()
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    t0 = time.perf_counter()
    try:
        status, metrics, artifacts = DISPATCH[cfg.command](cfg, out, cfg["run"]["workers"])
    except Exception as exc:  # noqa: BLE001 - reported in the record
        status, metrics, artifacts = "failed", {"error": f"{type(exc).__name__}: {exc}"}, {}
    artifacts = {"config": "config.ini", **artifacts}
    record = {
        "status": status,
        "config": cfg.to_dict(),
        "seed": cfg["run"]["seed"],
        "build": build_id(),
        "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
        "metrics": metrics,
        "artifacts": artifacts,
    }
    write_json_atomic(out / "summary.json", record)
    return record


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    try:
        cfg = load_config(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    record = run(cfg)
    if record["status"] != "ok":
        print(f"run failed: {record['metrics'].get('error', 'see summary.json')}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
