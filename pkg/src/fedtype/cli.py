"""Command-line runner: ``fedtype run <config>`` and ``fedtype validate <config>``.

Configs are YAML. Every key is optional; missing keys take the values in
:data:`DEFAULTS`. A ``sweep.modes`` list runs the same setup once per
training mode, each into its own subdirectory of the output directory.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any

import yaml

from .conformal import ConformalConfig
from .data import IdxError, load_idx, synth_gaussian
from .federation import FederationConfig, RoundMetrics, Server, run_federation, setup_federation
from .losses import MODES
from .nn import save_params
from .reciprocity import UarlConfig

log = logging.getLogger("fedtype")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "rounds": 20,
    "clients": 8,
    "sample_ratio": 0.2,
    "alpha": 0.5,
    "min_per_client": 10,
    "data": {
        "kind": "synthetic",
        "classes": 10,
        "dim": 20,
        "n_per_class": 400,
        "spread": 3.0,
        "noise": 1.0,
        "clusters_per_class": 1,
        "images": None,
        "labels": None,
    },
    "model": {
        "proxy_hidden": [16],
        "private_pool": [[64], [128], [64, 64]],
        "assignment": "round_robin",
    },
    "uarl": {
        "local_epochs": 5,
        "batch_size": 16,
        "lr": 1e-4,
        "mode": "full",
        "topk": 3,
        "full_pass_epochs": False,
        "eta_denominator": "S",
    },
    "conformal": {
        "theta": 0.1,
        "lam": 0.5,
        "kappa_reg": 5,
        "u_policy": "random",
        "u_value": 1.0,
        "g_variant": "g1",
        "platt_lr": 0.01,
        "platt_max_iter": 10,
    },
    "aggregation": {"method": "fedavg", "mu": 0.01, "weighting": "samples"},
    "sweep": {"modes": []},
    "output": {"dir": "runs/default", "checkpoints": True},
    "parallel_clients": 1,
}


def _merge(base: dict, override: dict, prefix: str, problems: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            problems.append(f"{name}: unknown key")
        elif isinstance(base[key], dict):
            if isinstance(val, dict):
                out[key] = _merge(base[key], val, name + ".", problems)
            else:
                problems.append(f"{name}: expected a mapping")
        else:
            if isinstance(base[key], float) and isinstance(val, str):
                # PyYAML reads "1e-4" (no dot) as a string
                try:
                    val = float(val)
                except ValueError:
                    pass
            out[key] = val
    return out


def load_config(path: str | os.PathLike) -> tuple[dict, list[str]]:
    """Read ``path`` and merge it over the defaults. Returns (config, problems)."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        return copy.deepcopy(DEFAULTS), [f"<file>: not valid YAML ({exc})"]
    if not isinstance(raw, dict):
        return copy.deepcopy(DEFAULTS), ["<file>: top level must be a mapping"]
    problems: list[str] = []
    cfg = _merge(DEFAULTS, raw, "", problems)
    cfg["_base_dir"] = str(Path(path).resolve().parent)
    return cfg, problems


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _layer_list(v) -> bool:
    return isinstance(v, list) and all(_is_int(x) and x > 0 for x in v)


def validate_config(cfg: dict) -> list[str]:
    """Every field-level problem in a merged config, as ``"field: reason"`` strings."""
    p: list[str] = []

    def need(ok: bool, name: str, reason: str):
        if not ok:
            p.append(f"{name}: {reason}")

    need(_is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed", "must be a non-negative integer")
    need(_is_int(cfg["rounds"]) and cfg["rounds"] >= 1, "rounds", "must be an integer >= 1")
    need(_is_int(cfg["clients"]) and cfg["clients"] >= 1, "clients", "must be an integer >= 1")
    need(_is_num(cfg["sample_ratio"]) and 0 < cfg["sample_ratio"] <= 1, "sample_ratio", "must be in (0, 1]")
    need(_is_num(cfg["alpha"]) and cfg["alpha"] > 0, "alpha", "must be > 0")
    need(_is_int(cfg["min_per_client"]) and cfg["min_per_client"] >= 10, "min_per_client",
         "must be an integer >= 10 (the 7:2:1 split needs 10 samples)")
    need(_is_int(cfg["parallel_clients"]) and cfg["parallel_clients"] >= 1, "parallel_clients",
         "must be an integer >= 1")

    d = cfg["data"]
    if d["kind"] == "synthetic":
        need(_is_int(d["classes"]) and d["classes"] >= 2, "data.classes", "must be an integer >= 2")
        need(_is_int(d["dim"]) and d["dim"] >= 2, "data.dim", "must be an integer >= 2")
        need(_is_int(d["n_per_class"]) and d["n_per_class"] >= 1, "data.n_per_class", "must be an integer >= 1")
        need(_is_num(d["spread"]) and d["spread"] >= 0, "data.spread", "must be >= 0")
        need(_is_num(d["noise"]) and d["noise"] >= 0, "data.noise", "must be >= 0")
        need(_is_int(d["clusters_per_class"]) and d["clusters_per_class"] >= 1, "data.clusters_per_class",
             "must be an integer >= 1")
        if not p and _is_int(d["classes"]) and _is_int(d["n_per_class"]) and _is_int(cfg["clients"]):
            total = d["classes"] * d["n_per_class"]
            need(total >= cfg["clients"] * cfg["min_per_client"], "data.n_per_class",
                 f"{total} samples cannot give {cfg['clients']} clients {cfg['min_per_client']} each")
    elif d["kind"] == "idx":
        base = Path(cfg.get("_base_dir", "."))
        for key in ("images", "labels"):
            path = d[key]
            if not isinstance(path, str):
                p.append(f"data.{key}: required path for idx data")
            elif not (base / path).is_file():
                p.append(f"data.{key}: file not found: {path}")
    else:
        p.append("data.kind: must be 'synthetic' or 'idx'")

    m = cfg["model"]
    need(_layer_list(m["proxy_hidden"]), "model.proxy_hidden", "must be a list of positive integers")
    pool = m["private_pool"]
    need(isinstance(pool, list) and len(pool) > 0 and all(_layer_list(h) for h in pool),
         "model.private_pool", "must be a non-empty list of hidden-layer lists")
    need(m["assignment"] in ("round_robin", "random"), "model.assignment", "must be 'round_robin' or 'random'")

    u = cfg["uarl"]
    need(_is_int(u["local_epochs"]) and u["local_epochs"] >= 1, "uarl.local_epochs", "must be an integer >= 1")
    need(_is_int(u["batch_size"]) and u["batch_size"] >= 1, "uarl.batch_size", "must be an integer >= 1")
    need(_is_num(u["lr"]) and u["lr"] >= 0, "uarl.lr", "must be >= 0")
    need(u["mode"] in MODES, "uarl.mode", f"must be one of {', '.join(MODES)}")
    need(_is_int(u["topk"]) and u["topk"] >= 1, "uarl.topk", "must be an integer >= 1")
    if _is_int(u["topk"]) and d["kind"] == "synthetic" and _is_int(d["classes"]):
        need(u["topk"] <= d["classes"], "uarl.topk", "must not exceed data.classes")
    need(isinstance(u["full_pass_epochs"], bool), "uarl.full_pass_epochs", "must be true or false")
    need(u["eta_denominator"] in ("S", "L"), "uarl.eta_denominator", "must be 'S' or 'L'")

    c = cfg["conformal"]
    need(_is_num(c["theta"]) and 0 < c["theta"] < 1, "conformal.theta", "must be in (0, 1)")
    need(_is_num(c["lam"]) and c["lam"] >= 0, "conformal.lam", "must be >= 0")
    need(_is_int(c["kappa_reg"]) and c["kappa_reg"] >= 1, "conformal.kappa_reg", "must be an integer >= 1")
    need(c["u_policy"] in ("random", "fixed"), "conformal.u_policy", "must be 'random' or 'fixed'")
    need(_is_num(c["u_value"]) and 0 <= c["u_value"] <= 1, "conformal.u_value", "must be in [0, 1]")
    need(c["g_variant"] in ("g1", "g2", "g3", "g4"), "conformal.g_variant", "must be one of g1, g2, g3, g4")
    need(_is_num(c["platt_lr"]) and c["platt_lr"] >= 0, "conformal.platt_lr", "must be >= 0")
    need(_is_int(c["platt_max_iter"]) and c["platt_max_iter"] >= 0, "conformal.platt_max_iter",
         "must be an integer >= 0")

    a = cfg["aggregation"]
    need(a["method"] in ("fedavg", "fedprox"), "aggregation.method", "must be 'fedavg' or 'fedprox'")
    need(_is_num(a["mu"]) and a["mu"] >= 0, "aggregation.mu", "must be >= 0")
    need(a["weighting"] in ("samples", "uniform"), "aggregation.weighting", "must be 'samples' or 'uniform'")

    modes = cfg["sweep"]["modes"]
    need(isinstance(modes, list) and all(x in MODES for x in modes) and len(set(modes)) == len(modes),
         "sweep.modes", f"must be a list of distinct modes from {', '.join(MODES)}")

    o = cfg["output"]
    need(isinstance(o["dir"], str) and o["dir"] != "", "output.dir", "must be a non-empty path")
    need(isinstance(o["checkpoints"], bool), "output.checkpoints", "must be true or false")
    return p


def resolved(cfg: dict) -> dict:
    """The config as written to ``summary.json`` (no internal keys)."""
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def federation_config(cfg: dict, mode: str) -> FederationConfig:
    c, u, a = cfg["conformal"], cfg["uarl"], cfg["aggregation"]
    conformal = ConformalConfig(theta=c["theta"], lam=c["lam"], kappa_reg=c["kappa_reg"],
                                u_policy=c["u_policy"], u_value=c["u_value"], g_variant=c["g_variant"])
    uarl = UarlConfig(local_epochs=u["local_epochs"], batch_size=u["batch_size"], lr=float(u["lr"]), mode=mode,
                      topk=u["topk"], conformal=conformal, full_pass_epochs=u["full_pass_epochs"],
                      eta_denominator=u["eta_denominator"], platt_lr=c["platt_lr"],
                      platt_max_iter=c["platt_max_iter"])
    return FederationConfig(seed=cfg["seed"], sample_ratio=float(cfg["sample_ratio"]), aggregation=a["method"],
                            mu=float(a["mu"]), weighting=a["weighting"], uarl=uarl,
                            parallel_clients=cfg["parallel_clients"])


def build_dataset(cfg: dict):
    d = cfg["data"]
    if d["kind"] == "idx":
        base = Path(cfg.get("_base_dir", "."))
        return load_idx(base / d["images"], base / d["labels"])
    return synth_gaussian(d["classes"], d["dim"], d["n_per_class"], float(d["spread"]), cfg["seed"],
                          noise=float(d["noise"]), clusters_per_class=d["clusters_per_class"])


def run_one(cfg: dict, mode: str, out: Path) -> RoundMetrics | None:
    """Train one mode into ``out``. Metrics rows are flushed as rounds finish."""
    out.mkdir(parents=True, exist_ok=True)
    m = cfg["model"]
    data = build_dataset(cfg)
    server, clients = setup_federation(data, cfg["clients"], float(cfg["alpha"]), m["proxy_hidden"],
                                       m["private_pool"], cfg["seed"], m["assignment"], cfg["min_per_client"])
    fcfg = federation_config(cfg, mode)
    ckpt = out / "checkpoints"
    if cfg["output"]["checkpoints"]:
        ckpt.mkdir(exist_ok=True)

    summary: dict[str, Any] = {"seed": cfg["seed"], "mode": mode, "config": resolved(cfg), "status": "running"}
    last: RoundMetrics | None = None
    t0 = time.perf_counter()
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RoundMetrics.columns())
        fh.flush()

        def on_round(metrics: RoundMetrics, srv: Server):
            nonlocal last
            last = metrics
            writer.writerow(metrics.to_row())
            fh.flush()
            if cfg["output"]["checkpoints"]:
                save_params(ckpt / f"round_{metrics.round}.params", srv.global_proxy)

        try:
            run_federation(server, clients, fcfg, cfg["rounds"], on_round)
            summary["status"] = "ok"
        except FloatingPointError as exc:
            summary["status"] = "failed"
            summary["error"] = str(exc)
            log.error("%s: %s", mode, exc)

    summary["rounds_completed"] = last.round if last else 0
    summary["final"] = asdict(last) if last else None
    summary["wall_seconds"] = round(time.perf_counter() - t0, 3)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return last if summary["status"] == "ok" else None


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> None:
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg["output"]["dir"] = args.out
    if getattr(args, "parallel_clients", None) is not None:
        cfg["parallel_clients"] = args.parallel_clients


def _load_checked(path: str, args: argparse.Namespace) -> tuple[dict | None, list[str]]:
    try:
        cfg, problems = load_config(path)
    except OSError as exc:
        return None, [f"<file>: cannot read {path}: {exc.strerror or exc}"]
    _apply_overrides(cfg, args)
    return cfg, problems + validate_config(cfg)


def cmd_validate(args: argparse.Namespace) -> int:
    cfg, problems = _load_checked(args.config, args)
    for line in problems:
        print(line)
    return EXIT_CONFIG if problems else EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg, problems = _load_checked(args.config, args)
    if problems:
        for line in problems:
            print(f"invalid config: {line}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg["output"]["dir"])
    modes = cfg["sweep"]["modes"] or [cfg["uarl"]["mode"]]
    swept = bool(cfg["sweep"]["modes"])
    status = EXIT_OK
    for mode in modes:
        target = out / mode if swept else out
        log.info("running mode=%s seed=%d -> %s", mode, cfg["seed"], target)
        try:
            final = run_one(cfg, mode, target)
        except (IdxError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        except ValueError as exc:
            # e.g. a partition that cannot satisfy min_per_client
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if final is None:
            status = EXIT_RUNTIME
        else:
            print(f"{mode}: global={final.global_acc:.4f} proxy={final.proxy_acc:.4f} "
                  f"private={final.private_acc:.4f} eta={final.mean_eta:.3f}")
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedtype", description="Simulate federated training with heterogeneous private models.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train and write metrics.csv, summary.json and checkpoints")
    run.add_argument("config")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--out", help="override output.dir")
    run.add_argument("--parallel-clients", type=int, dest="parallel_clients",
                     help="train up to K sampled clients concurrently")
    run.set_defaults(func=cmd_run)
    val = sub.add_parser("validate", help="report every invalid field; exit 0 iff none")
    val.add_argument("config")
    val.add_argument("--seed", type=int)
    val.add_argument("--out")
    val.add_argument("--parallel-clients", type=int, dest="parallel_clients")
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("FEDTYPE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
