"""Seed-shared construction of displacement columns and local curvature.

Every node regenerates the same d-by-m displacement matrix from
``(seed, iteration)`` alone, so the matrix itself never travels over the
wire.  Reproducibility contract: the counter-based Philox4x64-10 bit
generator is keyed directly with the seed, the stream position is the
iteration number shifted into the high counter words (iterations can never
overlap), and the d*m standard-normal draws fill the matrix column-major
(column index outer).  This mapping is bitwise stable across platforms and
is pinned as ``PRNG_SPEC``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericalError

#: Pinned generator identity recorded in run configs and reports.
PRNG_SPEC = "philox4x64-10/numpy-generator/column-major/v1"

GAUSSIAN_OVER_M = "gaussian_over_m"
RADIUS = "radius"


@dataclass(frozen=True)
class CurvatureFactory:
    """Deterministic per-iteration sampler for displacement columns.

    ``gaussian_over_m`` draws entries N(0, 1/m), the production sampler.
    ``radius`` is the sequential-sampling compatibility mode: each column is
    ``-r`` times a unit random direction (the displacement from stepping to
    a point sampled at radius ``r`` around the iterate).
    """

    seed: int
    d: int
    m: int
    mode: str = GAUSSIAN_OVER_M
    radius: float = 0.01

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise InvalidArgumentError(f"need d, m >= 1, got d={self.d}, m={self.m}")
        if self.mode not in (GAUSSIAN_OVER_M, RADIUS):
            raise InvalidArgumentError(f"unknown sampling mode {self.mode!r}")
        if self.mode == RADIUS and not self.radius > 0:
            raise InvalidArgumentError(f"radius must be positive, got {self.radius}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidArgumentError("seed must fit in 64 unsigned bits")

    def generate(self, iteration):
        """Displacement columns for one iteration, identical on every node."""
        if iteration < 0:
            raise InvalidArgumentError(f"iteration must be >= 0, got {iteration}")
        bitgen = np.random.Philox(key=int(self.seed), counter=int(iteration) << 128)
        rng = np.random.Generator(bitgen)
        flat = rng.standard_normal(self.d * self.m)
        cols = flat.reshape((self.d, self.m), order="F")
        if self.mode == GAUSSIAN_OVER_M:
            return cols / np.sqrt(self.m)
        norms = np.linalg.norm(cols, axis=0)
        if np.any(norms == 0.0):
            raise NumericalError("degenerate zero direction while sampling")
        return -self.radius * (cols / norms)


def generate_S(factory, iteration):
    """Module-level alias for :meth:`CurvatureFactory.generate`."""
    return factory.generate(iteration)


def local_Y(shard, w, s_cols):
    """Apply the shard's local Hessian to every displacement column.

    Shard means over equal partitions average to the global curvature, so
    the driver mean-reduces these blocks.  Non-finite outputs abort with the
    offending iterate attached.
    """
    w = np.asarray(w, dtype=float)
    s_cols = np.asarray(s_cols, dtype=float)
    if s_cols.ndim != 2 or s_cols.shape[0] != w.shape[0]:
        raise InvalidArgumentError(
            f"displacement columns {s_cols.shape} do not match iterate {w.shape}"
        )
    out = np.empty_like(s_cols)
    for i in range(s_cols.shape[1]):
        out[:, i] = shard.hessvec(w, s_cols[:, i])
    if not np.all(np.isfinite(out)):
        raise NumericalError(
            f"non-finite curvature column at iterate with |w|={np.linalg.norm(w):.3e}"
        )
    return out
