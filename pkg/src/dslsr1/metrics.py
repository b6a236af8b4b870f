"""Run reports: trajectory export, ledger cross-checks, similarity, speedup.

A report is fully reconstructible from the trajectory and the config; it
carries no state of its own.  Ledger totals are cross-checked against the
closed-form per-iteration float counts, and byte totals are quoted at both
4 and 8 bytes per float (gigabytes use the 2**30-byte convention).
"""

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidArgumentError
from .optimizer import DSLSR1, NAIVE, jaccard_similarity  # noqa: F401  (re-export)
from .transport import floats_to_gb, predict_floats


def amdahl_bound(t, n_nodes):
    """Speedup ceiling 1 / (t + (1 - t)/K) for serial fraction t on K nodes."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"serial fraction must lie in [0, 1], got {t}")
    if n_nodes < 1:
        raise InvalidArgumentError(f"need at least one node, got {n_nodes}")
    return 1.0 / (t + (1.0 - t) / n_nodes)


def trajectory_to_csv(records, path):
    fields = [
        "k", "f", "grad_norm", "rho", "delta", "step_accepted", "cg_iters",
        "cg_status", "n_accepted", "accepted_pairs", "safety_rejected",
        "floats_broadcast", "floats_reduced", "jaccard", "wall_time",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for r in records:
            writer.writerow([
                r.k, repr(r.f), repr(r.grad_norm), repr(r.rho), repr(r.delta),
                int(r.step_accepted), r.cg_iters, r.cg_status,
                len(r.accepted_pairs),
                ";".join(str(i) for i in r.accepted_pairs),
                r.safety_rejected, r.floats_broadcast, r.floats_reduced,
                "" if r.jaccard is None else repr(r.jaccard),
                f"{r.wall_time:.6f}",
            ])


def trajectory_to_json(records, path):
    payload = []
    for r in records:
        row = asdict(r)
        row["accepted_pairs"] = list(r.accepted_pairs)
        row["spectrum"] = None if r.spectrum is None else list(r.spectrum)
        payload.append(row)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_safe)


def spectra_to_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "eigenvalues"])
        for r in records:
            if r.spectrum is not None:
                writer.writerow([r.k, ";".join(repr(v) for v in r.spectrum)])


def _json_safe(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    raise TypeError(f"cannot serialize {type(obj)}")


@dataclass
class LedgerCheck:
    iteration: int
    measured_delta: int
    predicted_delta: int
    measured_cg: int
    predicted_cg: int

    @property
    def exact(self):
        return (self.measured_delta == self.predicted_delta
                and self.measured_cg == self.predicted_cg)


def crosscheck_ledger(result, d):
    """Compare measured per-iteration ledger sums to the closed forms.

    Only full iterations (those that ran the pair and step phases) are
    checked; terminal evaluation-only records are skipped.
    """
    config = result.config
    if result.ledger is None or config.variant not in (NAIVE, DSLSR1):
        return []
    checks = []
    for r in result.records:
        if not r.cg_status:  # evaluation-only record
            continue
        pred = predict_floats(d, config.m, len(r.accepted_pairs), r.cg_iters,
                              config.variant)
        checks.append(LedgerCheck(
            iteration=r.k,
            measured_delta=result.ledger.noncommon_delta(r.k),
            predicted_delta=pred["noncommon_delta"],
            measured_cg=result.ledger.cg_total(r.k),
            predicted_cg=pred["cg"],
        ))
    return checks


def jaccard_summary(records):
    values = [r.jaccard for r in records if r.jaccard is not None]
    if not values:
        return None
    return {
        "iterations": len(values),
        "mean": float(np.mean(values)),
        "min": float(np.min(values)),
        "fraction_perfect": float(np.mean([v == 1.0 for v in values])),
    }


def serial_fraction_estimate(result):
    """Crude serial fraction: master wall time over total iteration time.

    Master compute is approximated from the flop meter at an assumed rate;
    this feeds the speedup ceiling as an estimate, nothing more.
    """
    if result.meter is None or not result.records:
        return None
    total_wall = sum(r.wall_time for r in result.records)
    if total_wall <= 0:
        return None
    # Assume 1e9 master flops/s; the bound is monotone in t, so quoting the
    # assumption keeps the number interpretable.
    master_time = result.meter.total() / 1e9
    return float(min(1.0, master_time / total_wall))


def build_report(result, d, files=None, compare=None):
    config = result.config
    ledger = result.ledger
    checks = crosscheck_ledger(result, d)
    report = {
        "config": {
            "variant": config.variant,
            "workers": config.workers,
            "m": config.m,
            "eta": config.eta,
            "seed": config.seed,
            "max_iters": config.max_iters,
            "acceptance": config.resolved_acceptance,
            "grad_norm_tol": config.grad_norm_tol,
            "delta0": config.delta0,
            "bytes_per_float": config.bytes_per_float,
            "d": d,
        },
        "stop_reason": result.stop_reason,
        "iterations": len(result.records),
        "final_f": result.final_f,
        "final_grad_norm": result.final_grad_norm,
        "files": files or {},
        "ledger": None,
        "ledger_check": {
            "iterations_checked": len(checks),
            "all_exact": all(c.exact for c in checks) if checks else None,
        },
        "jaccard": jaccard_summary(result.records),
        "amdahl": None,
    }
    if ledger is not None:
        report["ledger"] = {
            "total_floats": ledger.total_floats(),
            "bytes_at_4": ledger.total_bytes(4),
            "bytes_at_8": ledger.total_bytes(8),
            "gb_at_4": floats_to_gb(ledger.total_floats(), 4),
            "gb_at_8": floats_to_gb(ledger.total_floats(), 8),
        }
    t_est = serial_fraction_estimate(result)
    if t_est is not None:
        report["amdahl"] = {
            "serial_fraction_estimate": t_est,
            "workers": config.workers,
            "su_bound": amdahl_bound(t_est, config.workers),
            "su_bound_table": {
                str(k): amdahl_bound(t_est, k) for k in (1, 2, 4, 8, 16)
            },
        }
    if compare is not None:
        report["comparison"] = compare
    return report


def compare_variants(result_a, result_b, d):
    """Per-iteration float ratio between two runs of different variants."""
    la, lb = result_a.ledger, result_b.ledger
    rows = []
    for ra, rb in zip(result_a.records, result_b.records):
        if not ra.cg_status or not rb.cg_status:
            continue
        da = la.noncommon_delta(ra.k)
        db = lb.noncommon_delta(rb.k)
        rows.append({
            "k": ra.k,
            result_a.config.variant: da,
            result_b.config.variant: db,
            "ratio": da / db if db else None,
        })
    pred_a = predict_floats(d, result_a.config.m, result_a.config.m, 0,
                            result_a.config.variant)["noncommon_delta"]
    pred_b = predict_floats(d, result_b.config.m, result_b.config.m, 0,
                            result_b.config.variant)["noncommon_delta"]
    return {
        "per_iteration": rows,
        "formula_ratio_full_memory": pred_a / pred_b,
    }
