"""Trust-region step computation and radius management.

The subproblem  min  g.p + 1/2 p.B.p  subject to  ||p|| <= delta  is solved
by truncated conjugate gradients with boundary exits (CG-Steihaug).  The
solver only touches ``B`` through a caller-supplied hessvec callback and is
agnostic to whether that callback is a local product or a blocking
collective exchange.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidArgumentError

INTERIOR_CONVERGED = "interior_converged"
BOUNDARY_NEGATIVE_CURVATURE = "boundary_negative_curvature"
BOUNDARY_RADIUS = "boundary_radius"
MAX_ITER = "max_iter"

#: Relative threshold classifying d.Bd as nonpositive curvature.
CURVATURE_TOL = 1e-14


@dataclass(frozen=True)
class TrustRegionParams:
    """Radius-management constants.

    eta1 is the step-acceptance threshold; eta2/eta3 split the ratio range
    for growing, keeping, or shrinking the radius; gamma1 decides whether a
    very successful step was long enough to warrant growth; zeta1 > 1 grows
    and zeta2 in (0,1) shrinks.
    """

    eta1: float = 1e-4
    eta2: float = 0.75
    eta3: float = 0.1
    gamma1: float = 0.5
    zeta1: float = 2.0
    zeta2: float = 0.5
    delta_min: float = 1e-12
    delta_max: float = 1e12

    def __post_init__(self):
        if not 0 <= self.eta3 < self.eta2 < 1:
            raise InvalidArgumentError(f"need 0 <= eta3 < eta2 < 1, got {self.eta3}, {self.eta2}")
        if not 0 < self.gamma1 < 1:
            raise InvalidArgumentError(f"gamma1 must lie in (0,1), got {self.gamma1}")
        if not self.zeta1 > 1:
            raise InvalidArgumentError(f"zeta1 must exceed 1, got {self.zeta1}")
        if not 0 < self.zeta2 < 1:
            raise InvalidArgumentError(f"zeta2 must lie in (0,1), got {self.zeta2}")
        if not 0 < self.eta1 <= self.eta2:
            raise InvalidArgumentError(f"eta1 must lie in (0, eta2], got {self.eta1}")
        if not 0 < self.delta_min < self.delta_max:
            raise InvalidArgumentError("need 0 < delta_min < delta_max")


@dataclass(frozen=True)
class TrustRegionState:
    """Current radius plus the last acceptance ratio seen."""

    delta: float
    params: TrustRegionParams
    rho: float = float("nan")

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidArgumentError(f"delta must be positive, got {self.delta}")


@dataclass(frozen=True)
class CgResult:
    p: np.ndarray
    status: str
    iterations: int
    model_decrease: float
    model_values: tuple = ()


def default_cg_tolerance(grad_norm):
    """Inexact-Newton forcing term min(0.1, sqrt(|g|)) * |g|, floored at 1e-12."""
    return max(min(0.1, math.sqrt(grad_norm)) * grad_norm, 1e-12)


def boundary_tau(z, dvec, delta, mode="positive_root", model=None):
    """Step length tau >= 0 with ||z + tau d|| = delta.

    Requires ||z|| < delta and d != 0, which puts the two real roots on
    opposite sides of zero.  ``positive_root`` returns the nonnegative one;
    ``model_argmin`` evaluates ``model(tau)`` on every nonnegative root and
    returns the minimizer (with negative curvature the ray is concave, so
    this is the positive root as well).
    """
    z = np.asarray(z, dtype=float)
    dvec = np.asarray(dvec, dtype=float)
    a = float(dvec @ dvec)
    if a == 0.0:
        raise InvalidArgumentError("direction must be nonzero")
    b = 2.0 * float(z @ dvec)
    c = float(z @ z) - float(delta) ** 2
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        raise InvalidArgumentError(
            f"no boundary crossing: ||z||^2 - delta^2 = {c:.3e}, disc = {disc:.3e}"
        )
    sq = math.sqrt(disc)
    # Stable pairing: q/a and c/q never subtract nearly equal numbers.
    q = -0.5 * (b + math.copysign(sq, b)) if b != 0.0 else 0.5 * sq
    roots = [q / a]
    if q != 0.0:
        roots.append(c / q)
    else:
        roots.append(-b / a - roots[0])
    nonneg = [t for t in roots if t >= 0.0]
    if not nonneg:
        raise InvalidArgumentError("no nonnegative boundary root; is ||z|| < delta?")
    if mode == "positive_root" or model is None:
        return max(nonneg)
    return min(nonneg, key=model)


def cg_steihaug(grad, hessvec, delta, eps=None, max_iter=None, meter=None):
    """Truncated CG for the trust-region subproblem.

    Exits at the boundary on nonpositive curvature (choosing the
    model-minimizing crossing) or when the iterate leaves the region;
    otherwise iterates the residual below ``eps``.  ``iterations`` counts
    hessvec applications.  Since the curvature models here have rank at
    most j (zero initial matrix), at most j+1 iterations occur before a
    zero-curvature boundary exit.  Hitting ``max_iter`` returns the current
    interior iterate rather than raising.

    ``meter``, when given, is charged for the O(d) vector work done by the
    caller's role (the hessvec callback meters itself).
    """
    g = np.asarray(grad, dtype=float)
    dim = g.shape[0]
    if not delta > 0:
        raise InvalidArgumentError(f"delta must be positive, got {delta}")
    gnorm = float(np.linalg.norm(g))
    if eps is None:
        eps = default_cg_tolerance(gnorm)
    if not eps > 0:
        raise InvalidArgumentError(f"eps must be positive, got {eps}")
    if max_iter is None:
        max_iter = dim
    if meter is not None:
        meter.charge("cg_setup", 2 * dim)
    if gnorm < eps:
        return CgResult(np.zeros(dim), INTERIOR_CONVERGED, 0, 0.0, (0.0,))

    z = np.zeros(dim)
    r = g.copy()
    dvec = -r
    rr = float(r @ r)
    m_val = 0.0
    model_values = [0.0]
    for it in range(1, max_iter + 1):
        Bd = hessvec(dvec)
        dBd = float(dvec @ Bd)
        dd = float(dvec @ dvec)
        rd = float(r @ dvec)
        if meter is not None:
            for op in ("cg_dBd", "cg_dd", "cg_rd", "cg_z_update", "cg_r_update",
                       "cg_residual_norm"):
                meter.charge(op, 2 * dim)
        if dBd <= CURVATURE_TOL * dd:
            tau = boundary_tau(
                z, dvec, delta, mode="model_argmin",
                model=lambda t: m_val + t * rd + 0.5 * t * t * dBd,
            )
            m_end = m_val + tau * rd + 0.5 * tau * tau * dBd
            model_values.append(m_end)
            return CgResult(
                z + tau * dvec, BOUNDARY_NEGATIVE_CURVATURE, it, -m_end,
                tuple(model_values),
            )
        alpha = rr / dBd
        z_next = z + alpha * dvec
        if float(np.linalg.norm(z_next)) >= delta:
            tau = boundary_tau(z, dvec, delta)
            m_end = m_val + tau * rd + 0.5 * tau * tau * dBd
            model_values.append(m_end)
            return CgResult(
                z + tau * dvec, BOUNDARY_RADIUS, it, -m_end, tuple(model_values)
            )
        m_val += alpha * rd + 0.5 * alpha * alpha * dBd
        model_values.append(m_val)
        z = z_next
        r = r + alpha * Bd
        rr_next = float(r @ r)
        if math.sqrt(rr_next) < eps:
            return CgResult(z, INTERIOR_CONVERGED, it, -m_val, tuple(model_values))
        beta = rr_next / rr
        rr = rr_next
        dvec = -r + beta * dvec
    return CgResult(z, MAX_ITER, max_iter, -m_val, tuple(model_values))


def adjust_radius(state, rho, step_norm):
    """One radius-management update; exactly one branch fires.

    ratio > eta2 and a step no longer than gamma1*delta: keep the radius;
    ratio > eta2 with a longer step: grow by zeta1; eta3 <= ratio <= eta2:
    keep; otherwise shrink by zeta2.  A NaN ratio (flagged degenerate model
    decrease) falls through to the shrink branch.  The result is clamped to
    [delta_min, delta_max].
    """
    p = state.params
    delta = state.delta
    if rho > p.eta2:
        new = delta if step_norm <= p.gamma1 * delta else p.zeta1 * delta
    elif rho >= p.eta3:
        new = delta
    else:
        new = p.zeta2 * delta
    new = min(max(new, p.delta_min), p.delta_max)
    return replace(state, delta=new, rho=float(rho))
