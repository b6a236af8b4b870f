"""Shardable finite-sum objectives with value, gradient, and hessvec.

Every objective is a mean over local samples plus an L2 term, so shard
means with equal sample counts average to the merged objective exactly in
the infinite-precision sense (drivers mean-reduce the shard quantities).
Quadratic and logistic shards expose analytic Hessian-vector products; the
tiny tanh network falls back to central differences of its gradient.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

QUADRATIC = "quadratic"
LOGISTIC_L2 = "logistic_l2"
MLP_TINY = "mlp_tiny"

#: Base step for finite-difference Hessian-vector products, scaled by 1+|w|.
FD_STEP = 1e-4


def _check_finite(w, label="input"):
    if not np.all(np.isfinite(w)):
        raise InvalidArgumentError(f"non-finite {label}")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class ObjectiveShard:
    """Interface shared by all shard kinds (and by test-defined objectives)."""

    kind = None

    @property
    def dim(self):
        raise NotImplementedError

    @property
    def n_samples(self):
        raise NotImplementedError

    def value(self, w):
        raise NotImplementedError

    def gradient(self, w):
        raise NotImplementedError

    def hessvec(self, w, v):
        raise NotImplementedError


class QuadraticShard(ObjectiveShard):
    """Mean of 0.5*(x_i.w)^2 minus a linear term, plus L2.

    The shard Hessian is X^T X / n + l2*I; with rows designed so that the
    merged second-moment matrix has a prescribed spectrum, this gives exact,
    cheap curvature for equivalence tests.
    """

    kind = QUADRATIC

    def __init__(self, X, b, l2=0.0):
        self.X = np.asarray(X, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if self.X.ndim != 2 or self.X.shape[1] != self.b.shape[0]:
            raise InvalidArgumentError("rows of X must match b")
        self.l2 = float(l2)

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def n_samples(self):
        return self.X.shape[0]

    def value(self, w):
        _check_finite(w)
        margins = self.X @ w
        return float(
            0.5 * np.mean(margins**2) - self.b @ w + 0.5 * self.l2 * (w @ w)
        )

    def gradient(self, w):
        _check_finite(w)
        margins = self.X @ w
        return self.X.T @ margins / self.n_samples - self.b + self.l2 * w

    def hessvec(self, w, v):
        _check_finite(v, "direction")
        return self.X.T @ (self.X @ v) / self.n_samples + self.l2 * v


class LogisticShard(ObjectiveShard):
    """L2-regularized logistic loss over labels in {-1, +1}."""

    kind = LOGISTIC_L2

    def __init__(self, X, y, l2=0.0):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise InvalidArgumentError("X rows must match y")
        if not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise InvalidArgumentError("labels must be -1 or +1")
        self.l2 = float(l2)

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def n_samples(self):
        return self.X.shape[0]

    def value(self, w):
        _check_finite(w)
        margins = self.y * (self.X @ w)
        return float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * self.l2 * (w @ w))

    def gradient(self, w):
        _check_finite(w)
        margins = self.y * (self.X @ w)
        coeff = -self.y * _sigmoid(-margins)
        return self.X.T @ coeff / self.n_samples + self.l2 * w

    def hessvec(self, w, v):
        _check_finite(v, "direction")
        # sigma'(z) = sigma(z)(1 - sigma(z)) is even in the label sign.
        sig = _sigmoid(self.X @ w)
        weights = sig * (1.0 - sig)
        return self.X.T @ (weights * (self.X @ v)) / self.n_samples + self.l2 * v


class MlpTinyShard(ObjectiveShard):
    """One tanh hidden layer, scalar output, squared loss, plus L2.

    Smooth activations keep the Hessian defined everywhere.  The gradient is
    analytic (backprop); hessvec uses central differences of the gradient
    with step FD_STEP * (1 + |w|).
    """

    kind = MLP_TINY

    def __init__(self, X, y, hidden=4, l2=0.0):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise InvalidArgumentError("X rows must match y")
        self.hidden = int(hidden)
        self.l2 = float(l2)

    @property
    def n_inputs(self):
        return self.X.shape[1]

    @property
    def dim(self):
        h, p = self.hidden, self.n_inputs
        return h * p + h + h + 1

    @property
    def n_samples(self):
        return self.X.shape[0]

    def _unpack(self, w):
        h, p = self.hidden, self.n_inputs
        W1 = w[: h * p].reshape(h, p)
        b1 = w[h * p : h * p + h]
        w2 = w[h * p + h : h * p + 2 * h]
        b2 = w[-1]
        return W1, b1, w2, b2

    def value(self, w):
        _check_finite(w)
        W1, b1, w2, b2 = self._unpack(np.asarray(w, dtype=float))
        hidden = np.tanh(self.X @ W1.T + b1)
        pred = hidden @ w2 + b2
        resid = pred - self.y
        return float(0.5 * np.mean(resid**2) + 0.5 * self.l2 * (w @ w))

    def gradient(self, w):
        _check_finite(w)
        w = np.asarray(w, dtype=float)
        W1, b1, w2, b2 = self._unpack(w)
        act = self.X @ W1.T + b1
        hidden = np.tanh(act)
        pred = hidden @ w2 + b2
        resid = (pred - self.y) / self.n_samples
        g_w2 = hidden.T @ resid
        g_b2 = float(np.sum(resid))
        back = (resid[:, None] * w2) * (1.0 - hidden**2)
        g_W1 = back.T @ self.X
        g_b1 = back.sum(axis=0)
        return np.concatenate([g_W1.ravel(), g_b1, g_w2, [g_b2]]) + self.l2 * w

    def hessvec(self, w, v):
        _check_finite(v, "direction")
        w = np.asarray(w, dtype=float)
        v = np.asarray(v, dtype=float)
        h = FD_STEP * (1.0 + float(np.linalg.norm(w)))
        return (self.gradient(w + h * v) - self.gradient(w - h * v)) / (2.0 * h)


def merge_shards(shards):
    """Reassemble one shard from a partition (sample-count weighted)."""
    if not shards:
        raise InvalidArgumentError("nothing to merge")
    kind = shards[0].kind
    if any(s.kind != kind for s in shards):
        raise InvalidArgumentError("cannot merge shards of different kinds")
    X = np.vstack([s.X for s in shards])
    if kind == QUADRATIC:
        return QuadraticShard(X, shards[0].b, l2=shards[0].l2)
    y = np.concatenate([s.y for s in shards])
    if kind == LOGISTIC_L2:
        return LogisticShard(X, y, l2=shards[0].l2)
    return MlpTinyShard(X, y, hidden=shards[0].hidden, l2=shards[0].l2)


def _split(shard, n_shards):
    n = shard.n_samples
    if n % n_shards:
        raise InvalidArgumentError(
            f"{n} samples do not split into {n_shards} equal shards"
        )
    step = n // n_shards
    out = []
    for i in range(n_shards):
        rows = slice(i * step, (i + 1) * step)
        if shard.kind == QUADRATIC:
            out.append(QuadraticShard(shard.X[rows], shard.b, l2=shard.l2))
        elif shard.kind == LOGISTIC_L2:
            out.append(LogisticShard(shard.X[rows], shard.y[rows], l2=shard.l2))
        else:
            out.append(
                MlpTinyShard(shard.X[rows], shard.y[rows], hidden=shard.hidden, l2=shard.l2)
            )
    return out


@dataclass(frozen=True)
class SyntheticProblem:
    full: ObjectiveShard
    shards: tuple


def make_synthetic(kind, d, n, seed, n_shards=1, cond=100.0, l2=1e-2, noise=0.1, hidden=4):
    """Deterministic synthetic dataset split into equal shards.

    quadratic: sample rows are built so the mean second-moment matrix has a
    geometric spectrum from 1 to ``cond`` exactly (requires n >= d).
    logistic_l2: linearly separable direction plus label noise.
    mlp_tiny: targets from a random teacher network plus noise.
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    if kind == QUADRATIC:
        if n < d:
            raise InvalidArgumentError("quadratic generator needs n >= d")
        lams = np.geomspace(1.0, float(cond), d)
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        Z, _ = np.linalg.qr(rng.standard_normal((n, d)))
        X = np.sqrt(n) * Z * np.sqrt(lams) @ Q.T
        b = rng.standard_normal(d)
        full = QuadraticShard(X, b, l2=l2)
    elif kind == LOGISTIC_L2:
        w_star = rng.standard_normal(d)
        w_star /= np.linalg.norm(w_star)
        X = rng.standard_normal((n, d))
        margins = X @ w_star + noise * rng.standard_normal(n)
        y = np.where(margins >= 0.0, 1.0, -1.0)
        full = LogisticShard(X, y, l2=l2)
    elif kind == MLP_TINY:
        p = max(2, d // 8)
        X = rng.standard_normal((n, p))
        teacher = MlpTinyShard(X, np.zeros(n), hidden=hidden, l2=0.0)
        w_teacher = rng.standard_normal(teacher.dim)
        W1, b1, w2, b2 = teacher._unpack(w_teacher)
        y = np.tanh(X @ W1.T + b1) @ w2 + b2 + noise * rng.standard_normal(n)
        full = MlpTinyShard(X, y, hidden=hidden, l2=l2)
    else:
        raise InvalidArgumentError(f"unknown problem kind {kind!r}")
    return SyntheticProblem(full=full, shards=tuple(_split(full, n_shards)))


def save_dataset(path, X, y, meta=None):
    """Write samples as column-major float64 with a JSON sidecar."""
    path = Path(path)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    with open(path, "wb") as fh:
        fh.write(np.asfortranarray(X).tobytes(order="F"))
        fh.write(y.astype("<f8").tobytes())
    sidecar = {
        "n": int(X.shape[0]),
        "d": int(X.shape[1]),
        "dtype": "<f8",
        "order": "F",
        "meta": meta or {},
    }
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return path


def load_dataset(path):
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as fh:
        sidecar = json.load(fh)
    n, d = sidecar["n"], sidecar["d"]
    raw = np.fromfile(path, dtype="<f8")
    X = raw[: n * d].reshape((n, d), order="F")
    y = raw[n * d :]
    if y.shape[0] != n:
        raise InvalidArgumentError(f"dataset {path} truncated")
    return X, y, sidecar.get("meta", {})


def load_csv(path):
    """Samples from CSV: feature columns followed by one label column."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            rows.append([float(v) for v in row])
    data = np.asarray(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] < 2:
        raise InvalidArgumentError(f"{path}: need at least one feature and a label")
    return data[:, :-1], data[:, -1]
