"""Compact symmetric rank-1 curvature models built from pair inner products.

Given candidate curvature pairs packed as columns of ``S`` (displacements)
and ``Y`` (curvature responses), the low-rank model over an accepted subset
``a`` is

    B = Y_a M^{-1} Y_a^T,        M[p, q] = s_max(p,q) . y_min(p,q),

i.e. ``M`` is the lower triangle of the accepted block of ``S^T Y`` mirrored
onto the upper triangle (diagonal ``s_i . y_i``).  ``M`` grows one row and
column per accepted pair and its inverse is maintained by a bordered-inverse
update, so no matrix is ever inverted.

Acceptance test from inner products alone
-----------------------------------------
A candidate pair ``(s, y)`` (index ``c``) is accepted when

    | s.(y - B s) |  >=  eta * ||s|| * ||y - B s||,

with ``B`` the model built from previously accepted pairs.  Everything in
this test reduces to entries of the Gram blocks ``ss = S^T S``,
``sy = S^T Y``, ``yy = Y^T Y`` and the current inverse ``M^{-1}``.  Writing
``w = sy[c, a]`` (entries ``s_c . y_i`` for accepted ``i``),
``u = yy[a, c]`` and ``G = yy[a, a]``:

    s.Bs    = w  M^{-1} w
    y.Bs    = u  M^{-1} w                     (B s has coefficients M^{-1} w)
    s.B^2 s = (M^{-1} w)  G  (M^{-1} w)
    s.(y - Bs)      = sy[c, c] - s.Bs
    ||y - Bs||^2    = yy[c, c] - 2 y.Bs + s.B^2 s      (clamped at zero)
    ||s||^2         = ss[c, c]

The quantity ``sy[c, c] - s.Bs`` is simultaneously the bordered-inverse
denominator ``c - v M^{-1} v`` (with ``v = w``), so acceptance and the
inverse update share one number.  When ``yy`` is the sketched product
``(S^T Y)^T (S^T Y)`` instead of the exact ``Y^T Y``, only the right-hand
side norm is affected; the test tolerates that approximation.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, SingularUpdateError, UnsupportedDiagnosticError

#: Default threshold for the pair-acceptance inequality.
DEFAULT_ETA = 1e-8

#: Relative guard on the bordered-inverse denominator, applied as
#: ``|denom| >= DENOMINATOR_GUARD * (|s.y| + 1)``.
DENOMINATOR_GUARD = 1e-12

#: Largest dimension the dense reference constructor will materialize.
DENSE_ORACLE_MAX_DIM = 64


@dataclass(frozen=True)
class GramTriple:
    """The three m-by-m inner-product blocks of a candidate pair set.

    ``yy`` is either the exact ``Y^T Y`` or, when ``sketched`` is true, the
    reconstruction ``(S^T Y)^T (S^T Y)``.  Instances are treated as
    immutable; do not write into the arrays.
    """

    ss: np.ndarray
    sy: np.ndarray
    yy: np.ndarray
    sketched: bool = False

    def __post_init__(self):
        for name in ("ss", "sy", "yy"):
            mat = np.asarray(getattr(self, name), dtype=float)
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise InvalidArgumentError(f"{name} must be square, got {mat.shape}")
            object.__setattr__(self, name, mat)
        if not (self.ss.shape == self.sy.shape == self.yy.shape):
            raise InvalidArgumentError(
                "gram blocks disagree: "
                f"ss {self.ss.shape}, sy {self.sy.shape}, yy {self.yy.shape}"
            )

    @property
    def m(self):
        return self.ss.shape[0]


def build_gram(s_cols, y_cols):
    """Form exact ``S^T S``, ``S^T Y``, ``Y^T Y`` from full pair columns.

    Serial and test path only; the distributed path never materializes the
    aggregated ``Y`` and assembles the triple from reduced blocks instead.
    """
    s_cols = np.asarray(s_cols, dtype=float)
    y_cols = np.asarray(y_cols, dtype=float)
    if s_cols.shape != y_cols.shape:
        raise InvalidArgumentError(
            f"pair column shapes differ: {s_cols.shape} vs {y_cols.shape}"
        )
    if s_cols.ndim != 2 or s_cols.shape[1] < 1:
        raise InvalidArgumentError(f"expected d-by-m columns, got {s_cols.shape}")
    return GramTriple(
        ss=s_cols.T @ s_cols,
        sy=s_cols.T @ y_cols,
        yy=y_cols.T @ y_cols,
        sketched=False,
    )


def sketch_yy(sy, ss):
    """Reconstruct an approximation to ``Y^T Y`` from ``S^T Y`` alone.

    With ``S`` sampled N(0, I/m) the product ``Y^T (S S^T) Y`` is an
    unbiased sketch of ``Y^T Y``, and its contraction over the ambient
    dimension is exactly ``sy^T sy``.  ``ss`` participates only as a shape
    check: the sketch is already fully contracted.
    """
    sy = np.asarray(sy, dtype=float)
    ss = np.asarray(ss, dtype=float)
    if sy.ndim != 2 or sy.shape[0] != sy.shape[1]:
        raise InvalidArgumentError(f"sy must be square, got {sy.shape}")
    if ss.shape != sy.shape:
        raise InvalidArgumentError(f"ss shape {ss.shape} does not match sy {sy.shape}")
    return sy.T @ sy


def sketched_gram(ss, sy):
    """Assemble a GramTriple whose ``yy`` block is the sketch of ``Y^T Y``."""
    return GramTriple(ss=ss, sy=sy, yy=sketch_yy(sy, ss), sketched=True)


@dataclass(frozen=True)
class MInverseLadder:
    """Inverse of the growing pair matrix ``M``, one accepted pair at a time.

    ``inv`` holds the j-by-j inverse for the ``j`` accepted pairs listed in
    ``accepted`` (indices into the candidate set, in acceptance order).
    Growing the ladder returns a new instance; rows and columns of the old
    block change only through the rank-1 correction of the bordered-inverse
    formula.
    """

    inv: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    accepted: tuple = ()

    @property
    def j(self):
        return self.inv.shape[0]


def minverse_append(ladder, v, c, index=None):
    """Extend ``M^{-1}`` for one more pair without inverting anything.

    ``v`` holds the inner products of the new displacement against the
    accepted curvature columns and ``c = s_new . y_new``.  The bordered
    inverse is

        [ inv + z q q^T   -z q ]            q = inv @ v,
        [    -z q^T         z  ]            z = 1 / (c - v . q),

    which with ``j = 0`` degenerates to ``[[1/c]]``.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    j = ladder.j
    if v.shape != (j,):
        raise InvalidArgumentError(f"border vector has shape {v.shape}, expected ({j},)")
    c = float(c)
    if j == 0:
        denom = c
        q = np.zeros(0)
    else:
        q = ladder.inv @ v
        denom = c - float(v @ q)
    if abs(denom) < DENOMINATOR_GUARD * (abs(c) + 1.0):
        raise SingularUpdateError(
            f"bordered-inverse denominator {denom:.3e} below guard for |c|={abs(c):.3e}"
        )
    zeta = 1.0 / denom
    new = np.empty((j + 1, j + 1))
    if j:
        new[:j, :j] = ladder.inv + zeta * np.outer(q, q)
        new[:j, j] = -zeta * q
        new[j, :j] = -zeta * q
    new[j, j] = zeta
    if index is None:
        index = j
    return MInverseLadder(inv=new, accepted=ladder.accepted + (int(index),))


def pair_matrix(sy, indices):
    """Rebuild ``M`` for the given accepted indices from ``S^T Y`` entries.

    Used by tests and invariant checks; the production path only ever holds
    the inverse.
    """
    sy = np.asarray(sy, dtype=float)
    idx = list(indices)
    block = sy[np.ix_(idx, idx)]
    return np.tril(block) + np.tril(block, -1).T


@dataclass(frozen=True)
class PairAcceptance:
    """Outcome of the sequential acceptance sweep."""

    accepted: tuple
    ladder: MInverseLadder
    safety_rejected: tuple = ()


def accept_pairs(gram, eta=DEFAULT_ETA):
    """Run the sequential pair-acceptance sweep on a Gram triple.

    Candidates are visited in column order.  Each is tested against the
    model built from the pairs accepted so far, using only Gram entries and
    the current ``M^{-1}`` (see the module docstring for the contractions).
    Pairs passing the inequality but whose bordered-inverse denominator
    falls under the numerical guard are rejected and reported separately.
    """
    if not isinstance(gram, GramTriple):
        raise InvalidArgumentError("gram must be a GramTriple")
    if not eta > 0:
        raise InvalidArgumentError(f"eta must be positive, got {eta}")
    ss, sy, yy = gram.ss, gram.sy, gram.yy
    ladder = MInverseLadder()
    safety = []
    for c in range(gram.m):
        acc = list(ladder.accepted)
        w = sy[c, acc]
        if ladder.j:
            qw = ladder.inv @ w
            s_bs = float(w @ qw)
            y_bs = float(yy[acc, c] @ qw)
            s_b2s = float(qw @ (yy[np.ix_(acc, acc)] @ qw))
        else:
            qw = w
            s_bs = y_bs = s_b2s = 0.0
        syc = float(sy[c, c])
        t = syc - s_bs
        res_sq = float(yy[c, c]) - 2.0 * y_bs + s_b2s
        rhs = eta * np.sqrt(max(float(ss[c, c]), 0.0)) * np.sqrt(max(res_sq, 0.0))
        if abs(t) < rhs:
            continue
        if abs(t) < DENOMINATOR_GUARD * (abs(syc) + 1.0):
            safety.append(c)
            continue
        ladder = minverse_append(ladder, w, syc, index=c)
    return PairAcceptance(
        accepted=ladder.accepted, ladder=ladder, safety_rejected=tuple(safety)
    )


def acceptance_flop_estimate(m, accepted):
    """Master-side flop count of one acceptance sweep, from its outcome.

    The sweep's cost is fully determined by how large the ladder was when
    each candidate was tested, which is reconstructable from the accepted
    index list.  Contractions cost about ``4j^2 + 8j`` per candidate and a
    bordered append about ``3(j+1)^2``.
    """
    accepted = set(accepted)
    flops = 0
    j = 0
    for c in range(m):
        flops += 4 * j * j + 8 * j + 12
        if c in accepted:
            flops += 3 * (j + 1) ** 2
            j += 1
    return flops


@dataclass(frozen=True)
class CompactHessian:
    """Low-rank curvature model ``B = Y M^{-1} Y^T`` over accepted pairs.

    ``y_cols`` holds the accepted curvature columns (d-by-j); in distributed
    runs each node holds only its local shard of these columns and this
    class is used on full columns only (serial driver, naive master, tests).
    """

    y_cols: np.ndarray
    ladder: MInverseLadder
    gram: GramTriple = None

    def __post_init__(self):
        y = np.asarray(self.y_cols, dtype=float)
        if y.ndim != 2:
            raise InvalidArgumentError(f"y_cols must be d-by-j, got {y.shape}")
        if y.shape[1] != self.ladder.j:
            raise InvalidArgumentError(
                f"{y.shape[1]} curvature columns vs ladder of size {self.ladder.j}"
            )
        object.__setattr__(self, "y_cols", y)

    @property
    def dim(self):
        return self.y_cols.shape[0]

    @property
    def rank_bound(self):
        return self.ladder.j


def from_pairs(s_cols, y_cols, eta=DEFAULT_ETA):
    """Serial convenience: exact Gram, acceptance sweep, compact model."""
    gram = build_gram(s_cols, y_cols)
    outcome = accept_pairs(gram, eta)
    model = CompactHessian(
        y_cols=np.asarray(y_cols, dtype=float)[:, list(outcome.accepted)],
        ladder=outcome.ladder,
        gram=gram,
    )
    return model, outcome


def compact_hessvec(model, v):
    """Apply ``B = Y M^{-1} Y^T`` to a vector in O(jd + j^2).

    The three factors are applied right to left; with an empty model the
    result is the zero vector.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (model.dim,):
        raise InvalidArgumentError(f"vector shape {v.shape}, expected ({model.dim},)")
    if model.ladder.j == 0:
        return np.zeros_like(v)
    return model.y_cols @ (model.ladder.inv @ (model.y_cols.T @ v))


def compact_spectrum(model):
    """Nonzero eigenvalues of the low-rank model, sorted descending.

    They coincide with the eigenvalues of the j-by-j product
    ``M^{-1} (Y^T Y)`` restricted to the accepted pairs, so no d-by-d matrix
    is formed.  Requires the exact ``Y^T Y``: the sketched block is licensed
    for the acceptance test only, not for spectral diagnostics.
    """
    if model.gram is None:
        raise InvalidArgumentError("model carries no Gram triple")
    if model.gram.sketched:
        raise UnsupportedDiagnosticError(
            "spectrum requires exact Y^T Y; the sketched block is acceptance-only"
        )
    j = model.ladder.j
    if j < 1:
        raise InvalidArgumentError("spectrum undefined for an empty model")
    acc = list(model.ladder.accepted)
    yy_acc = model.gram.yy[np.ix_(acc, acc)]
    eigs = np.linalg.eigvals(model.ladder.inv @ yy_acc)
    eigs = np.real(eigs)
    return np.sort(eigs)[::-1]


def dense_sr1_matrix(s_cols, y_cols, accepted, gamma=0.0):
    """Materialize the rank-one update recursion as a dense d-by-d matrix.

    Starts from ``gamma * I`` and applies, for each accepted pair in order,

        B <- B + r r^T / (r . s),      r = y - B s.

    Reference path for tests and small diagnostics only; refuses dimensions
    above ``DENSE_ORACLE_MAX_DIM``.
    """
    s_cols = np.asarray(s_cols, dtype=float)
    y_cols = np.asarray(y_cols, dtype=float)
    if s_cols.shape != y_cols.shape or s_cols.ndim != 2:
        raise InvalidArgumentError("pair columns must share a d-by-m shape")
    d = s_cols.shape[0]
    if d > DENSE_ORACLE_MAX_DIM:
        raise InvalidArgumentError(
            f"dense reference limited to d <= {DENSE_ORACLE_MAX_DIM}, got {d}"
        )
    if gamma < 0:
        raise InvalidArgumentError(f"gamma must be nonnegative, got {gamma}")
    B = gamma * np.eye(d)
    for idx in accepted:
        s = s_cols[:, idx]
        y = y_cols[:, idx]
        r = y - B @ s
        denom = float(r @ s)
        if abs(denom) < 1e-12:
            raise SingularUpdateError(
                f"rank-one denominator {denom:.3e} below 1e-12 at pair {idx}"
            )
        B = B + np.outer(r, r) / denom
    return B
