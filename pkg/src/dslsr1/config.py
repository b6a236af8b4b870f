"""Versioned TOML run configuration.

A config file selects the problem, the optimizer variant with its
constants, and the transport backend.  ``version = 1`` is required so the
format can evolve.  Example:

    version = 1

    [run]
    variant = "dslsr1"
    workers = 4
    seed = 42
    max_iters = 50
    transport = "sim"

    [problem]
    kind = "logistic_l2"
    d = 50
    n = 1024
    l2 = 0.01
    seed = 7

    [memory]
    m = 16
    eta = 1e-8

    [trust_region]
    delta0 = 1.0

    [transport.tcp]
    workers = ["127.0.0.1:0", "127.0.0.1:0"]

Keys mirror OptimizerConfig fields; unknown keys are rejected so typos
surface immediately.
"""

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .optimizer import OptimizerConfig, VARIANTS
from .sampling import GAUSSIAN_OVER_M, PRNG_SPEC
from .trust_region import TrustRegionParams

_RUN_KEYS = {
    "variant", "workers", "seed", "max_iters", "transport", "bytes_per_float",
    "acceptance", "grad_norm_tol", "target_fval", "jaccard", "spectrum_every",
    "checksum_every",
}
_PROBLEM_KEYS = {"kind", "d", "n", "l2", "cond", "noise", "seed", "hidden"}
_MEMORY_KEYS = {"m", "eta", "sampler", "radius"}
_TR_KEYS = {"delta0", "eta1", "eta2", "eta3", "gamma1", "zeta1", "zeta2",
            "delta_min", "delta_max"}


def _reject_unknown(section, keys, allowed, path):
    unknown = set(keys) - allowed
    if unknown:
        raise ConfigError(
            f"{path}: unknown key(s) {sorted(unknown)} in [{section}]"
        )


def load_config(path):
    """Parse and validate a run configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw.get("version") != 1:
        raise ConfigError(f"{path}: requires 'version = 1', got {raw.get('version')!r}")

    run = raw.get("run", {})
    problem = raw.get("problem", {})
    memory = raw.get("memory", {})
    tr = raw.get("trust_region", {})
    transport = raw.get("transport", {})
    _reject_unknown("run", run, _RUN_KEYS, path)
    _reject_unknown("problem", problem, _PROBLEM_KEYS, path)
    _reject_unknown("memory", memory, _MEMORY_KEYS, path)
    _reject_unknown("trust_region", tr, _TR_KEYS, path)

    for section, required in (("run", run), ("problem", problem), ("memory", memory)):
        if not required:
            raise ConfigError(f"{path}: missing [{section}] section")
    for key in ("variant", "max_iters"):
        if key not in run:
            raise ConfigError(f"{path}: [run] needs {key!r}")
    if run["variant"] not in VARIANTS:
        raise ConfigError(f"{path}: unknown variant {run['variant']!r}")
    for key in ("kind", "d", "n"):
        if key not in problem:
            raise ConfigError(f"{path}: [problem] needs {key!r}")
    if "m" not in memory:
        raise ConfigError(f"{path}: [memory] needs 'm'")

    try:
        params = TrustRegionParams(
            eta1=tr.get("eta1", 1e-4),
            eta2=tr.get("eta2", 0.75),
            eta3=tr.get("eta3", 0.1),
            gamma1=tr.get("gamma1", 0.5),
            zeta1=tr.get("zeta1", 2.0),
            zeta2=tr.get("zeta2", 0.5),
            delta_min=tr.get("delta_min", 1e-12),
            delta_max=tr.get("delta_max", 1e12),
        )
        opt = OptimizerConfig(
            m=int(memory["m"]),
            eta=float(memory.get("eta", 1e-8)),
            sampler_mode=memory.get("sampler", GAUSSIAN_OVER_M),
            sampling_radius=float(memory.get("radius", 0.01)),
            max_iters=int(run["max_iters"]),
            seed=int(run.get("seed", 0)),
            variant=run["variant"],
            workers=int(run.get("workers", 1)),
            tr=params,
            delta0=float(tr.get("delta0", 1.0)),
            grad_norm_tol=float(run.get("grad_norm_tol", 1e-6)),
            target_fval=run.get("target_fval"),
            acceptance=run.get("acceptance"),
            record_jaccard=bool(run.get("jaccard", False)),
            spectrum_every=int(run.get("spectrum_every", 0)),
            bytes_per_float=int(run.get("bytes_per_float", 8)),
            checksum_every=int(run.get("checksum_every", 1)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    tcp = transport.get("tcp", {})
    addresses = None
    if "workers" in tcp:
        addresses = []
        for entry in tcp["workers"]:
            host, _, port = entry.rpartition(":")
            if not host:
                raise ConfigError(f"{path}: worker address {entry!r} is not host:port")
            addresses.append((host, int(port)))

    return {
        "optimizer": opt,
        "problem": dict(problem),
        "backend": run.get("transport", "sim"),
        "tcp_addresses": addresses,
        "prng": PRNG_SPEC,
        "path": str(path),
    }
