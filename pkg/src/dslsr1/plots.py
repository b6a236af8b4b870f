"""Figure rendering for run reports.

Every function takes already-computed run data and writes one PNG next to
the delimited outputs; nothing here feeds back into the optimizer.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .transport import predict_floats


def save_convergence_figure(records, path):
    ks = [r.k for r in records]
    fs = [r.f for r in records]
    gns = [r.grad_norm for r in records]
    deltas = [r.delta for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(ks, fs, "o-", ms=3, label="objective")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("f")
    fmin = min(fs)
    if fmin > 0:
        ax1.set_yscale("log")
    ax1.legend(frameon=False)
    ax2.semilogy(ks, gns, "o-", ms=3, label="|grad|")
    ax2.semilogy(ks, deltas, "s--", ms=3, label="radius")
    ax2.set_xlabel("iteration")
    ax2.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_comm_figure(ledger, path):
    iterations = ledger.iterations()
    if not iterations:
        return None
    phases = ("eval", "pair", "cg", "step")
    bottoms = np.zeros(len(iterations))
    fig, ax = plt.subplots(figsize=(6, 3.4))
    for phase in phases:
        vals = np.array([
            sum(r.floats for r in ledger.iteration_records(k) if r.phase == phase)
            for k in iterations
        ], dtype=float)
        ax.bar(iterations, vals, bottom=bottoms, label=phase)
        bottoms += vals
    ax.set_xlabel("iteration")
    ax.set_ylabel("floats moved")
    ax.legend(frameon=False, ncol=4, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_comm_scaling_figure(m, path, dims=None):
    """Analytic per-iteration float curves vs dimension for both variants."""
    if dims is None:
        dims = np.logspace(2, 7, 40)
    eff = [predict_floats(int(d), m, m, 0, "dslsr1")["noncommon_delta"] for d in dims]
    naive = [predict_floats(int(d), m, m, 0, "naive")["noncommon_delta"] for d in dims]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.loglog(dims, naive, label=f"naive (2md+d+1), m={m}")
    ax.loglog(dims, eff, label=f"efficient (m^2+2d+2m+1), m={m}")
    ax.set_xlabel("dimension d")
    ax.set_ylabel("floats/iteration (non-common)")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_jaccard_figure(records, path):
    pts = [(r.k, r.jaccard) for r in records if r.jaccard is not None]
    if not pts:
        return None
    ks, vals = zip(*pts)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(ks, vals, "o-", ms=3)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("iteration")
    ax.set_ylabel("accepted-set Jaccard")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_spectrum_figure(records, path):
    rows = [(r.k, r.spectrum) for r in records if r.spectrum is not None]
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for k, spec in rows:
        ax.plot([k] * len(spec), spec, "k.", ms=4, alpha=0.6)
    ax.set_xlabel("iteration")
    ax.set_ylabel("model eigenvalues")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
