"""Command-line front end.

``dslsr1 run --config cfg.toml [overrides]`` executes a configured
experiment and writes, under the output directory: trajectory.csv/.json,
ledger.csv/.json (distributed variants), report.json, optional
spectrum.csv, and rendered figures next to the delimited files.
``dslsr1 predict`` prints the closed-form per-iteration float counts.

Exit codes: 0 on convergence or a clean iteration-limit stop, 1 on
configuration or usage errors, 2 on numerical aborts, 3 on transport
failures.  Log level comes from DSLSR1_LOG_LEVEL.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, DSLSR1Error, NumericalError, TransportError
from .metrics import (
    build_report,
    compare_variants,
    spectra_to_csv,
    trajectory_to_csv,
    trajectory_to_json,
)
from .optimizer import DSLSR1, NAIVE, SERIAL, run_distributed, run_naive, run_serial
from .problems import make_synthetic
from .transport import SimCluster, TcpCluster, floats_to_gb, predict_floats

log = logging.getLogger("dslsr1")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="dslsr1",
        description="Sampled SR1 trust-region optimization, serial or master-worker",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a configured experiment")
    run_p.add_argument("--config", required=True, help="TOML run configuration")
    run_p.add_argument("--variant", choices=[SERIAL, NAIVE, DSLSR1],
                       help="override the configured variant")
    run_p.add_argument("--variant-compare", choices=[NAIVE, DSLSR1],
                       help="also run this variant and report per-iteration float ratios")
    run_p.add_argument("--workers", type=int, help="override worker count")
    run_p.add_argument("--transport", choices=["sim", "tcp"], help="override backend")
    run_p.add_argument("--seed", type=int, help="override optimizer seed")
    run_p.add_argument("--out", default="out", help="output directory")
    run_p.add_argument("--bytes-per-float", type=int, choices=[4, 8],
                       help="byte width used in ledger byte totals")
    run_p.add_argument("--spectrum-every", type=int,
                       help="dump model eigenvalues every N iterations (exact modes)")
    run_p.add_argument("--jaccard", action="store_true",
                       help="record sketched-vs-exact accepted-set similarity (serial)")
    run_p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    pred_p = sub.add_parser("predict", help="closed-form per-iteration float counts")
    pred_p.add_argument("--d", type=int, required=True)
    pred_p.add_argument("--m", type=int, required=True)
    pred_p.add_argument("--cg-iters", type=int, default=0)
    pred_p.add_argument("--bytes-per-float", type=int, choices=[4, 8], default=4)
    return parser


def _apply_overrides(cfg, args):
    opt = cfg["optimizer"]
    updates = {}
    if args.variant:
        updates["variant"] = args.variant
        updates["acceptance"] = None
    if args.workers:
        updates["workers"] = args.workers
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.bytes_per_float:
        updates["bytes_per_float"] = args.bytes_per_float
    if args.spectrum_every is not None:
        updates["spectrum_every"] = args.spectrum_every
    if args.jaccard:
        updates["record_jaccard"] = True
    if updates.get("variant") == SERIAL:
        updates["workers"] = 1
    if updates:
        opt = dataclasses.replace(opt, **updates)
    cfg["optimizer"] = opt
    if args.transport:
        cfg["backend"] = args.transport
    return cfg


def _make_problem(cfg, workers):
    spec = dict(cfg["problem"])
    kind = spec.pop("kind")
    return make_synthetic(
        kind,
        d=int(spec["d"]),
        n=int(spec["n"]),
        seed=int(spec.get("seed", 0)),
        n_shards=workers,
        cond=float(spec.get("cond", 100.0)),
        l2=float(spec.get("l2", 1e-2)),
        noise=float(spec.get("noise", 0.1)),
        hidden=int(spec.get("hidden", 4)),
    )


def _make_cluster(cfg, opt, d):
    if cfg["backend"] == "sim":
        return SimCluster(opt.workers)
    handshake = {"d": d, "m": opt.m, "seed": opt.seed}
    return TcpCluster(opt.workers, handshake, addresses=cfg["tcp_addresses"])


def _execute(cfg, opt):
    problem = _make_problem(cfg, opt.workers)
    d = problem.full.dim
    if opt.variant == SERIAL:
        return run_serial(problem.full, opt), d
    cluster = _make_cluster(cfg, opt, d)
    runner = run_distributed if opt.variant == DSLSR1 else run_naive
    return runner(list(problem.shards), opt, cluster), d


def _write_outputs(result, d, out_dir, render_figures, compare=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    traj_csv = out / "trajectory.csv"
    trajectory_to_csv(result.records, traj_csv)
    files["trajectory_csv"] = str(traj_csv)
    traj_json = out / "trajectory.json"
    trajectory_to_json(result.records, traj_json)
    files["trajectory_json"] = str(traj_json)
    if result.ledger is not None:
        bpf = result.config.bytes_per_float
        ledger_csv = out / "ledger.csv"
        result.ledger.to_csv(ledger_csv, bpf)
        files["ledger_csv"] = str(ledger_csv)
        ledger_json = out / "ledger.json"
        result.ledger.to_json(ledger_json, bpf)
        files["ledger_json"] = str(ledger_json)
    if any(r.spectrum is not None for r in result.records):
        spec_csv = out / "spectrum.csv"
        spectra_to_csv(result.records, spec_csv)
        files["spectrum_csv"] = str(spec_csv)

    if render_figures:
        from . import plots

        files["convergence_png"] = str(
            plots.save_convergence_figure(result.records, out / "convergence.png"))
        if result.ledger is not None:
            path = plots.save_comm_figure(result.ledger, out / "communication.png")
            if path:
                files["communication_png"] = str(path)
        path = plots.save_comm_scaling_figure(result.config.m, out / "comm_scaling.png")
        files["comm_scaling_png"] = str(path)
        path = plots.save_jaccard_figure(result.records, out / "jaccard.png")
        if path:
            files["jaccard_png"] = str(path)
        path = plots.save_spectrum_figure(result.records, out / "spectrum.png")
        if path:
            files["spectrum_png"] = str(path)

    report = build_report(result, d, files=files, compare=compare)
    report_path = out / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, default=str)
    files["report_json"] = str(report_path)
    return report


def _cmd_run(args):
    cfg = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    opt = cfg["optimizer"]
    log.info("running variant=%s workers=%d backend=%s", opt.variant, opt.workers,
             cfg["backend"])
    result, d = _execute(cfg, opt)

    compare = None
    if args.variant_compare:
        other_opt = dataclasses.replace(opt, variant=args.variant_compare,
                                        acceptance=None)
        if other_opt.variant == SERIAL:
            other_opt = dataclasses.replace(other_opt, workers=1)
        cfg_other = dict(cfg)
        cfg_other["optimizer"] = other_opt
        other_result, _ = _execute(cfg_other, other_opt)
        compare = compare_variants(result, other_result, d)

    report = _write_outputs(result, d, args.out, not args.no_figures, compare)
    print(json.dumps({
        "variant": opt.variant,
        "stop_reason": result.stop_reason,
        "iterations": report["iterations"],
        "final_f": report["final_f"],
        "final_grad_norm": report["final_grad_norm"],
        "out": str(Path(args.out)),
    }, indent=2, default=str))
    if result.stop_reason == "numerical_abort":
        return 2
    return 0


def _cmd_predict(args):
    rows = []
    for variant in (DSLSR1, NAIVE):
        pred = predict_floats(args.d, args.m, args.m, args.cg_iters, variant)
        rows.append({
            "variant": variant,
            **pred,
            "noncommon_gb": floats_to_gb(pred["noncommon_delta"], args.bytes_per_float),
        })
    print(json.dumps(rows, indent=2))
    return 0


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("DSLSR1_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_predict(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except DSLSR1Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
