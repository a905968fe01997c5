"""Command-line interface.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage/config
error. FSDFL_OUT_DIR sets the default output directory; --out overrides.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as datamod
from . import engine, verify
from .fsadmm import ConfigError


def _default_out() -> str:
    return os.environ.get("FSDFL_OUT_DIR", "fsdfl-out")


def _load_cfg(args, overrides: dict) -> engine.ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        overrides["global_seed"] = args.seed
    if args.config is not None:
        return engine.load_config(args.config, overrides)
    return engine.ExperimentConfig(**overrides)


def cmd_run(args) -> int:
    overrides = {}
    if args.algo is not None:
        overrides["algorithm"] = args.algo
    if args.rounds is not None:
        overrides["rounds"] = args.rounds
    cfg = _load_cfg(args, overrides)
    res = engine.run_experiment(cfg, out_dir=args.out)
    print(f"final_avg_acc={res.final.avg_acc:.6f} "
          f"final_acc_gap={res.final.acc_gap:.6f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args, {})
    etas = [float(v) for v in args.etas.split(",")]
    rhos = [float(v) for v in args.rhos.split(",")]
    nus = [float(v) for v in args.nus.split(",")] if args.nus else None
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "sweep.csv")
    rows = engine.sweep(cfg, etas=etas, rhos=rhos, nus=nus, out_path=out_csv)
    best = max(rows, key=lambda r: r["final_avg_acc"])
    print(f"wrote {out_csv} ({len(rows)} cells); "
          f"best eta={best['eta']:g} rho_hat={best['rho_hat']:g} "
          f"nu={best['nu']:g} avg_acc={best['final_avg_acc']:.6f}")
    return 0


def cmd_verify_dynamics(args) -> int:
    report = verify.verify_suite(args.instances, args.seed, tamper=args.tamper)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "dynamics_report.json")
    verify.write_report(report, path)
    print(f"instances={report['instances']} "
          f"max_residual={report['max_residual']:.3e} "
          f"passed={report['passed']} report={path}")
    return 0 if report["passed"] else 1


def cmd_cost(args) -> int:
    cfg = _load_cfg(args, {})
    rep = engine.cost_report(cfg)
    print("paper-scale examples (4-byte quantization):")
    fm = engine.param_sharing_bytes(1_663_432, 4)
    out = engine.output_sharing_bytes(10, 1000, 4)
    print(f"  parameter sharing, 1,663,432 params: {fm} B = {fm / 1e6:.2f} MB")
    print(f"  output sharing, K=10 x 1000 shared:  {out} B = {out / 1e3:.0f} KB")
    print(f"configured run ({rep['algorithm']}):")
    print(f"  bytes per message:         {rep['bytes_per_message']}")
    print(f"  bytes per round (closed):  {rep['bytes_per_round_closed_form']}")
    print(f"  measured over {rep['measured_rounds']} round(s): "
          f"{rep['measured_bytes']}")
    print(f"  exact match: {rep['exact_match']}")
    return 0 if rep["exact_match"] else 1


def cmd_partition_stats(args) -> int:
    cfg = _load_cfg(args, {})
    splits, part, _ = engine.build_data(cfg)
    hist = datamod.label_histogram(part, splits.train)
    kl = datamod.label_kl_from_uniform(part, splits.train)
    print("device  count  kl_from_uniform  label_histogram")
    for dev in range(part.n_devices):
        counts = hist[dev]
        print(f"{dev:6d}  {counts.sum():5d}  {kl[dev]:15.6f}  {list(counts)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsdfl",
                                description="Decentralized federated-learning "
                                            "simulator with function-space ADMM")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=None):
        sp.add_argument("--seed", type=int, default=seed_default,
                        help="global seed override")
        sp.add_argument("--out", default=_default_out(),
                        help="output directory")

    sp = sub.add_parser("run", help="run one experiment")
    sp.add_argument("--config", help="TOML config file")
    sp.add_argument("--algo", choices=engine.ALGORITHMS)
    sp.add_argument("--rounds", type=int)
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="grid sweep over eta and rho_hat")
    sp.add_argument("--config", help="TOML config file")
    sp.add_argument("--etas", default=",".join(f"{v:g}" for v in engine.DEFAULT_ETAS))
    sp.add_argument("--rhos", default=",".join(f"{v:g}" for v in engine.DEFAULT_RHOS))
    sp.add_argument("--nus", default=None, help="optional comma list of nu values")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify-dynamics",
                        help="check the PI decomposition on random instances")
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--tamper", action="store_true",
                    help=argparse.SUPPRESS)   # negative control for tests
    common(sp, seed_default=0)
    sp.set_defaults(func=cmd_verify_dynamics)

    sp = sub.add_parser("cost", help="communication cost report")
    sp.add_argument("--config", help="TOML config file")
    common(sp)
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("partition-stats",
                        help="per-device label histograms and KL divergence")
    sp.add_argument("--config", help="TOML config file")
    common(sp)
    sp.set_defaults(func=cmd_partition_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
