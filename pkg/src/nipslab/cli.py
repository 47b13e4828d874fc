"""``nipslab`` command line: gen-data, train, eval, invert, bench, report.

Every command takes ``--config FILE`` (``key = value`` lines) and flag
overrides, and writes the resolved configuration next to its outputs so the
run can be repeated exactly.  Exit status: 0 success, 1 contract error,
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .bench import BENCH_COLUMNS, run_bench
from .config import ConfigError, RunConfig, read_config, resolve
from .darcy import SolverError
from .dataset import (DatasetFormatError, build_darcy_corpus, file_sha256, load, save,
                      split_by_system, stack_samples, training_samples, write_manifest,
                      ID_LOAD, ID_MICRO, OOD1_LOAD, OOD2_MICRO)
from .estimator import NIPSOperator
from .evaluation import SweepError, evaluate, permutation_stability, sweep, system_stack, write_table
from .figures import write_panels
from .interpret import homogeneous_rowsum, recover_permeability, rowsum_map
from .model import CheckpointError, TrainingDiagnosticError
from .randfield import HIGH_PHASE, LOW_PHASE

__all__ = ["main", "build_parser"]

OUT_ENV = "NIPSLAB_OUT"

SCENARIOS = {
    "id": (ID_MICRO, ID_LOAD),
    "ood1": (ID_MICRO, OOD1_LOAD),
    "ood2": (OOD2_MICRO, ID_LOAD),
}

GEN_DEFAULTS = {
    "systems": 35, "pairs": 100, "grid": 11, "seed": 0, "first_id": 0,
    "micro_tau": 5.0, "micro_alpha": 4.0, "load_tau": 5.0, "load_alpha": 1.0,
    "noise": 0.0, "out": "data.nips",
}

TRAIN_DEFAULTS = {
    "data": "", "out": "train", "d": 30, "nrand": 25, "test_systems": 5,
    "layers": 2, "dk": 20, "modes": (5, 5), "variant": "nips", "norm": "first-layer-both",
    "epochs": 500, "lr": 1e-3, "batch": 8, "lr_decay": 0.5, "lr_decay_every": 100,
    "weight_decay": 0.0, "noise": -1.0, "seed": 0, "checkpoint_every": 0, "resume": "",
}

EVAL_DEFAULTS = {
    "checkpoint": "", "data": "", "out": "eval", "d": 30, "test_systems": 5,
    "regrid": False, "perm": 0, "sweep": "", "values": "", "nrand": 25, "noise": 0.0,
    "seed": 0,
}

INVERT_DEFAULTS = {
    "checkpoint": "", "data": "", "out": "invert", "d": 30, "test_systems": 5,
    "system": 0, "method": "lbfgs", "max_iter": 2000,
}

BENCH_DEFAULTS = {
    "sizes": (441, 1681), "d": 30, "dk": 20, "modes": (5, 5), "layers": 2,
    "samples": 8, "batch": 4, "cap_mb": 4096, "repeats": 1, "seed": 0, "out": "bench",
}

REPORT_DEFAULTS = {"dir": ".", "out": ""}

VARIANT_NAMES = {"nips": "nips", "nao-wp": "nao_wp_linear", "nao-wp-quadratic": "nao_wp_quadratic"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parser

def _common(p, out_help):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--out", help=out_help)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nipslab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample systems and solve every loading")
    _common(p, "dataset file")
    p.add_argument("--systems", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--first-id", dest="first_id", type=int)
    p.add_argument("--scenario", choices=sorted(SCENARIOS), help="preset covariance exponents")
    for key in ("micro_tau", "micro_alpha", "load_tau", "load_alpha"):
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=float)
    p.add_argument("--noise", type=float, help="noise level recorded for training")

    p = sub.add_parser("train", help="fit the kernel map")
    _common(p, "output directory")
    p.add_argument("--data")
    for flag, key, typ in (("--d", "d", int), ("--nrand", "nrand", int),
                           ("--test-systems", "test_systems", int), ("--layers", "layers", int),
                           ("--dk", "dk", int), ("--epochs", "epochs", int), ("--lr", "lr", float),
                           ("--batch", "batch", int), ("--lr-decay", "lr_decay", float),
                           ("--lr-decay-every", "lr_decay_every", int),
                           ("--weight-decay", "weight_decay", float), ("--noise", "noise", float),
                           ("--seed", "seed", int), ("--checkpoint-every", "checkpoint_every", int)):
        p.add_argument(flag, dest=key, type=typ)
    p.add_argument("--modes", help="per-axis retained modes, e.g. 5 or 5,5")
    p.add_argument("--variant", choices=sorted(VARIANT_NAMES))
    p.add_argument("--norm", choices=["first-layer-both", "all-layers-both"])
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="zero-shot errors on held-out systems")
    _common(p, "output directory")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--d", type=int)
    p.add_argument("--test-systems", dest="test_systems", type=int)
    p.add_argument("--regrid", action="store_const", const="true", default=None,
                   help="allow a dataset on a different grid")
    p.add_argument("--perm", type=int, help="orderings for the permutation-stability statistic")
    p.add_argument("--sweep", choices=["n_rand", "d_k", "sigma"])
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--nrand", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("invert", help="recover a microstructure from the learned kernel")
    _common(p, "output directory")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--d", type=int)
    p.add_argument("--test-systems", dest="test_systems", type=int)
    p.add_argument("--system", type=int, help="index within the held-out systems")
    p.add_argument("--method", choices=["lbfgs", "adam"])
    p.add_argument("--max-iter", dest="max_iter", type=int)

    p = sub.add_parser("bench", help="per-epoch time and memory against the dense baseline")
    _common(p, "output directory")
    p.add_argument("--sizes", help="comma-separated token counts (perfect squares)")
    for flag, key in (("--d", "d"), ("--dk", "dk"), ("--layers", "layers"),
                      ("--samples", "samples"), ("--batch", "batch"), ("--cap-mb", "cap_mb"),
                      ("--repeats", "repeats"), ("--seed", "seed")):
        p.add_argument(flag, dest=key, type=int)
    p.add_argument("--modes")

    p = sub.add_parser("report", help="collect run outputs into one summary")
    p.add_argument("--config")
    p.add_argument("--dir")
    p.add_argument("--out", help="summary file (default <dir>/report.json)")
    return ap


# ---------------------------------------------------------------- helpers

def _resolve(defaults, args, keys_from_args) -> dict:
    file_values = read_config(args.config) if getattr(args, "config", None) else {}
    overrides = {k: getattr(args, k, None) for k in keys_from_args}
    return resolve(defaults, file_values, overrides)


def _out_path(value: str) -> Path:
    p = Path(value)
    base = os.environ.get(OUT_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _prepare_dir(path: Path, marker: str, force: bool):
    if (path / marker).exists() and not force:
        raise FileExistsError(f"{path / marker} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _require(cfg, *keys):
    for k in keys:
        if not cfg[k]:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _pair(modes) -> tuple:
    modes = tuple(modes)
    if len(modes) == 1:
        modes = modes * 2
    if len(modes) != 2:
        raise UsageError(f"--modes takes one or two integers, got {modes}")
    return modes


def _split(corpus, n_test):
    return split_by_system(corpus.records, n_test)


def _checked_model(path, n_data, regrid=False) -> NIPSOperator:
    model = NIPSOperator.load(path)
    if model.config_.n != n_data:
        if not regrid:
            raise ValueError(f"checkpoint grid {model.config_.n}x{model.config_.n} does not "
                             f"match dataset grid {n_data}x{n_data}; pass --regrid to transfer")
        model = model.at_resolution(n_data)
    return model


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _resolve(GEN_DEFAULTS, args, ["systems", "pairs", "grid", "seed", "first_id", "micro_tau",
                                        "micro_alpha", "load_tau", "load_alpha", "noise", "out"])
    if args.scenario:
        micro, load_ = SCENARIOS[args.scenario]
        cfg.update(micro_tau=micro["tau"], micro_alpha=micro["alpha"],
                   load_tau=load_["tau"], load_alpha=load_["alpha"])
    if cfg["noise"] < 0:
        raise UsageError("--noise must be non-negative")
    out = _out_path(cfg["out"])
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    micro = {"tau": cfg["micro_tau"], "alpha": cfg["micro_alpha"]}
    load_ = {"tau": cfg["load_tau"], "alpha": cfg["load_alpha"]}
    records = build_darcy_corpus(cfg["systems"], cfg["pairs"], cfg["grid"], micro, load_,
                                 seed=cfg["seed"], first_id=cfg["first_id"])
    save(out, records, {"seed": cfg["seed"], "noise": cfg["noise"],
                        "micro_spec": micro, "load_spec": load_})
    RunConfig(cfg, out.parent).write(out.with_name(out.name + ".cfg"))
    manifest = write_manifest(out, {"config": cfg})
    print(f"wrote {out} ({len(records)} systems x {cfg['pairs']} pairs), manifest {manifest}")
    return 0


def _train_model(cfg, corpus, out, resume_path=None):
    train, _ = _split(corpus, cfg["test_systems"])
    noise = cfg["noise"] if cfg["noise"] >= 0 else float(corpus.header.get("noise", 0.0))
    G, U = stack_samples(training_samples(train, cfg["d"], cfg["nrand"], cfg["seed"], noise))
    modes = _pair(cfg["modes"])
    params = dict(n_layers=cfg["layers"], d_k=cfg["dk"], modes=modes,
                  norm_placement=cfg["norm"], variant=VARIANT_NAMES[cfg["variant"]],
                  learning_rate=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch"],
                  lr_decay=cfg["lr_decay"], lr_decay_every=cfg["lr_decay_every"],
                  weight_decay=cfg["weight_decay"], random_state=cfg["seed"])
    if resume_path:
        model = NIPSOperator.load(resume_path)
        model.set_params(epochs=cfg["epochs"], warm_start=True)
    else:
        model = NIPSOperator(**params)

    def checkpoint(est, epoch):
        est.save(out / f"ckpt_epoch{epoch:05d}.ckpt")

    model.fit(G, U, checkpoint_fn=checkpoint if cfg["checkpoint_every"] else None,
              checkpoint_every=cfg["checkpoint_every"])
    return model


def cmd_train(args) -> int:
    keys = list(TRAIN_DEFAULTS)
    cfg = _resolve(TRAIN_DEFAULTS, args, keys)
    _require(cfg, "data")
    if cfg["variant"] not in VARIANT_NAMES:
        raise UsageError(f"unknown variant {cfg['variant']!r}")
    out = _out_path(cfg["out"])
    _prepare_dir(out, "model.ckpt", args.force)
    corpus = load(cfg["data"])
    run = RunConfig(cfg, out)
    run.write()
    with T.single_threaded():
        model = _train_model(cfg, corpus, out, cfg["resume"] or None)
    model.save(out / "model.ckpt")
    model.report_.write_csv(out / "train_report.csv")
    summary = {**model.report_.summary(), "dataset_sha256": file_sha256(cfg["data"])}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"trained {model.epoch_} epochs, final loss {model.report_.final_loss:.6g}; "
          f"checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(EVAL_DEFAULTS, args, list(EVAL_DEFAULTS))
    _require(cfg, "checkpoint", "data")
    out = _out_path(cfg["out"])
    _prepare_dir(out, "eval_report.json", args.force)
    corpus = load(cfg["data"])
    RunConfig(cfg, out).write()
    train, test = _split(corpus, cfg["test_systems"])
    with T.single_threaded():
        model = _checked_model(cfg["checkpoint"], corpus.n, cfg["regrid"])
        report = evaluate(model, test, cfg["d"], file_sha256(cfg["data"]))
        if cfg["perm"]:
            report.extra["permutation_stability"] = [
                permutation_stability(model, rec, cfg["d"], cfg["perm"], cfg["seed"]) for rec in test]
        report.to_json(out / "eval_report.json")
        if cfg["sweep"]:
            if not cfg["values"]:
                raise UsageError("--sweep needs --values")
            values = [float(v) if cfg["sweep"] == "sigma" else int(v)
                      for v in cfg["values"].split(",")]
            base = {k: v for k, v in model.get_params().items() if k != "warm_start"}
            sweep(cfg["sweep"], values, base, train, test, d=cfg["d"], n_rand=cfg["nrand"],
                  sigma=cfg["noise"], seed=cfg["seed"], csv_path=out / f"sweep_{cfg['sweep']}.csv")
    print(f"E_forward {report.E_forward:.6g}  E_inverse {report.E_inverse:.6g}  -> {out}")
    return 0


def cmd_invert(args) -> int:
    cfg = _resolve(INVERT_DEFAULTS, args, list(INVERT_DEFAULTS))
    _require(cfg, "checkpoint", "data")
    out = _out_path(cfg["out"])
    _prepare_dir(out, "recovery.json", args.force)
    corpus = load(cfg["data"])
    _, test = _split(corpus, cfg["test_systems"])
    if not 0 <= cfg["system"] < len(test):
        raise ValueError(f"--system must index one of the {len(test)} held-out systems")
    rec = test[cfg["system"]]
    RunConfig(cfg, out).write()
    with T.single_threaded():
        model = _checked_model(cfg["checkpoint"], corpus.n)
        G, U = system_stack([rec], cfg["d"])
        K = model.kernel(G, U)[0]
        result = recover_permeability(K, rec.b, method=cfg["method"], max_iter=cfg["max_iter"])
    result.to_json(out / "recovery.json")
    s = rowsum_map(K)
    ratio = np.divide(s, homogeneous_rowsum(rec.n), out=np.zeros_like(s), where=s != 0)
    labels = result.labels if result.labels is not None else np.full_like(rec.b, np.nan)
    phases = (LOW_PHASE, HIGH_PHASE)
    write_panels(out, {"b": rec.b, "g": rec.g[0], "p": rec.p[0], "rowsum": s,
                       "rowsum_ratio": ratio, "labels": np.nan_to_num(labels, nan=LOW_PHASE),
                       "B_star": result.B_star},
                 {"b": phases, "labels": phases, "B_star": phases})
    print(f"microstructure error {result.microstructure_error:.4g}; panels in {out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve(BENCH_DEFAULTS, args, list(BENCH_DEFAULTS))
    out = _out_path(cfg["out"])
    _prepare_dir(out, "bench.csv", args.force)
    RunConfig(cfg, out).write()
    modes = _pair(cfg["modes"])
    rows = run_bench(cfg["sizes"], d=cfg["d"], d_k=cfg["dk"], modes=modes, layers=cfg["layers"],
                     n_samples=cfg["samples"], batch_size=cfg["batch"],
                     memory_cap_bytes=cfg["cap_mb"] * 1024 ** 2, repeats=cfg["repeats"],
                     seed=cfg["seed"], log=lambda r: print(r, flush=True))
    write_table(rows, out / "bench.csv", BENCH_COLUMNS)
    return 0


def cmd_report(args) -> int:
    cfg = _resolve(REPORT_DEFAULTS, args, list(REPORT_DEFAULTS))
    root = Path(cfg["dir"])
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    summary = {}
    for name in ("train_summary.json", "eval_report.json", "recovery.json"):
        for path in sorted(root.rglob(name)):
            data = json.loads(path.read_text())
            if name == "recovery.json":
                data = {k: data[k] for k in ("microstructure_error", "threshold", "iterations")}
            summary[str(path.relative_to(root))] = data
    for path in sorted(root.rglob("*.csv")):
        summary[str(path.relative_to(root))] = path.read_text().splitlines()
    target = Path(cfg["out"]) if cfg["out"] else root / "report.json"
    target.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"collected {len(summary)} artifacts into {target}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "invert": cmd_invert, "bench": cmd_bench, "report": cmd_report}

CONTRACT_ERRORS = (ValueError, OSError, SolverError, CheckpointError, DatasetFormatError,
                   SweepError, TrainingDiagnosticError, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except CONTRACT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
