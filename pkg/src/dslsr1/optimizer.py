"""The three optimization drivers and the worker state machine.

``run_serial`` executes the sampled SR1 trust-region loop in one process.
``run_distributed`` executes the communication-efficient schedule: per
iteration it broadcasts the iterate, reduces value and gradient, reduces
the displacement/curvature inner-product block (the displacement matrix is
regenerated from the shared seed and never travels), runs the acceptance
sweep and inverse ladder at the master, solves the subproblem with
collective hessvec rounds, and finishes with a step phase that reduces the
curvature applied to the step plus the trial value.  ``run_naive`` is the
baseline that reduces the raw d-by-m pair matrices and does acceptance, CG,
and all Hessian-vector products at the master.

Per-iteration float counts over the fixed schedule (excluding the common
iterate/gradient/value traffic and the CG rounds) come to
m^2 + 2d + 2j + 1 for the efficient variant and 2md + d + 1 for the naive
one, and each CG round moves j^2 + 2j + 2d; the ledger is checked against
these forms exactly.  Master-side work is charged to a flop meter at every
call site so the work-placement claim is testable.

Workers are sequential state machines: they block on the next broadcast and
dispatch on its category, so the master alone decides whether an iteration
proceeds to the pair phase, how many CG rounds run, and when to stop.
"""

import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError, ProtocolError
from .flops import FlopMeter
from .sampling import GAUSSIAN_OVER_M, RADIUS, CurvatureFactory, local_Y
from .sr1 import (
    DEFAULT_ETA,
    CompactHessian,
    GramTriple,
    accept_pairs,
    acceptance_flop_estimate,
    build_gram,
    compact_hessvec,
    compact_spectrum,
    sketch_yy,
)
from .transport import (
    FLAG_PAIR_GO,
    FLAG_STOP,
    CommLedger,
    MasterCollectives,
    Section,
    WorkerCollectives,
    COMBINE_EQUAL,
    COMBINE_FIRST,
)
from .trust_region import (
    TrustRegionParams,
    TrustRegionState,
    adjust_radius,
    cg_steihaug,
    default_cg_tolerance,
)

SERIAL = "serial"
NAIVE = "naive"
DSLSR1 = "dslsr1"
VARIANTS = (SERIAL, NAIVE, DSLSR1)

ACCEPT_EXACT = "exact"
ACCEPT_SKETCHED = "sketched"

#: Steps whose predicted model decrease falls under this guard (relative to
#: 1 + |f|) are rejected outright and the radius shrunk.
MODEL_DECREASE_GUARD = 1e-14


@dataclass(frozen=True)
class OptimizerConfig:
    m: int
    max_iters: int
    seed: int = 0
    variant: str = SERIAL
    workers: int = 1
    eta: float = DEFAULT_ETA
    tr: TrustRegionParams = field(default_factory=TrustRegionParams)
    delta0: float = 1.0
    grad_norm_tol: float = 1e-6
    target_fval: float = None
    acceptance: str = None  # None resolves per variant
    sampler_mode: str = GAUSSIAN_OVER_M
    sampling_radius: float = 0.01
    record_jaccard: bool = False
    track_iterates: bool = False
    spectrum_every: int = 0
    bytes_per_float: int = 8
    initial_iterate: np.ndarray = None
    checksum_every: int = 1

    def __post_init__(self):
        if self.m < 1:
            raise InvalidArgumentError(f"memory must be >= 1, got {self.m}")
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"unknown variant {self.variant!r}")
        if self.workers < 1:
            raise InvalidArgumentError("workers must be >= 1")
        if self.variant == SERIAL and self.workers != 1:
            raise InvalidArgumentError("serial variant runs with workers=1")
        if self.bytes_per_float not in (4, 8):
            raise InvalidArgumentError("bytes_per_float must be 4 or 8")
        if self.acceptance not in (None, ACCEPT_EXACT, ACCEPT_SKETCHED):
            raise InvalidArgumentError(f"unknown acceptance mode {self.acceptance!r}")
        if self.sampler_mode not in (GAUSSIAN_OVER_M, RADIUS):
            raise InvalidArgumentError(f"unknown sampler {self.sampler_mode!r}")

    @property
    def resolved_acceptance(self):
        if self.acceptance is not None:
            return self.acceptance
        return ACCEPT_SKETCHED if self.variant == DSLSR1 else ACCEPT_EXACT

    def factory(self, d):
        return CurvatureFactory(
            seed=self.seed, d=d, m=self.m,
            mode=self.sampler_mode, radius=self.sampling_radius,
        )


@dataclass(frozen=True)
class IterationRecord:
    k: int
    f: float
    grad_norm: float
    rho: float
    delta: float
    step_accepted: bool
    accepted_pairs: tuple
    safety_rejected: int
    cg_iters: int
    cg_status: str
    floats_broadcast: int
    floats_reduced: int
    wall_time: float
    jaccard: float = None
    spectrum: tuple = None


@dataclass
class RunResult:
    records: list
    w_final: np.ndarray
    stop_reason: str
    config: OptimizerConfig
    ledger: CommLedger = None
    meter: FlopMeter = None
    iterates: list = None

    @property
    def final_f(self):
        return self.records[-1].f if self.records else float("nan")

    @property
    def final_grad_norm(self):
        return self.records[-1].grad_norm if self.records else float("nan")


def step_acceptance(f_curr, f_trial, model_decrease, eta1):
    """Ratio test: accept when (f - f_trial) / decrease >= eta1 (inclusive).

    A decrease under the relative guard is flagged degenerate and rejected;
    the caller shrinks the radius.
    """
    if model_decrease < MODEL_DECREASE_GUARD * (1.0 + abs(f_curr)):
        return False, float("nan")
    rho = (f_curr - f_trial) / model_decrease
    return rho >= eta1, rho


def jaccard_similarity(set_a, set_b):
    """|A ∩ B| / |A ∪ B|, defined as 1.0 when both sets are empty."""
    set_a, set_b = set(set_a), set(set_b)
    union = set_a | set_b
    if not union:
        return 1.0
    return len(set_a & set_b) / len(union)


def _grams_for(ss, sy, y_cols=None, yy=None):
    exact = None
    if yy is not None:
        exact = GramTriple(ss=ss, sy=sy, yy=yy, sketched=False)
    elif y_cols is not None:
        exact = GramTriple(ss=ss, sy=sy, yy=y_cols.T @ y_cols, sketched=False)
    sketched = GramTriple(ss=ss, sy=sy, yy=sketch_yy(sy, ss), sketched=True)
    return exact, sketched


# ---------------------------------------------------------------------------
# Serial driver
# ---------------------------------------------------------------------------

def run_serial(problem, config):
    """Sampled SR1 trust-region loop in one process.

    Per iteration: evaluate, resample the displacement columns, apply the
    problem curvature to them, run the acceptance sweep on the (exact or
    sketched) inner products, solve the subproblem, and apply the ratio
    test.  With ``record_jaccard`` the sweep also runs in the other
    acceptance mode and the index-set similarity is recorded.
    """
    if config.variant != SERIAL:
        raise InvalidArgumentError("run_serial requires variant='serial'")
    d = problem.dim
    w = _initial_iterate(config, d)
    factory = config.factory(d)
    state = TrustRegionState(config.delta0, config.tr)
    records = []
    iterates = [] if config.track_iterates else None
    stop_reason = "max_iters"
    sketch_mode = config.resolved_acceptance == ACCEPT_SKETCHED

    for k in range(config.max_iters):
        tick = time.perf_counter()
        f = problem.value(w)
        g = problem.gradient(w)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            records.append(_eval_record(k, f, float("nan"), state, tick))
            stop_reason = "numerical_abort"
            break
        gn = float(np.linalg.norm(g))
        if gn <= config.grad_norm_tol:
            records.append(_eval_record(k, f, gn, state, tick))
            stop_reason = "gradient_tolerance"
            break
        if config.target_fval is not None and f <= config.target_fval:
            records.append(_eval_record(k, f, gn, state, tick))
            stop_reason = "target_fval"
            break

        S = factory.generate(k)
        Y = local_Y(problem, w, S)
        ss = S.T @ S
        sy = S.T @ Y
        exact_gram, sketched_gram_ = _grams_for(ss, sy, y_cols=Y)
        gram = sketched_gram_ if sketch_mode else exact_gram
        outcome = accept_pairs(gram, config.eta)
        jac = None
        if config.record_jaccard:
            other = accept_pairs(sketched_gram_ if not sketch_mode else exact_gram, config.eta)
            jac = jaccard_similarity(outcome.accepted, other.accepted)
        acc = list(outcome.accepted)
        model = CompactHessian(Y[:, acc], outcome.ladder, gram=exact_gram)

        spectrum = None
        if config.spectrum_every and k % config.spectrum_every == 0 and acc:
            spectrum = tuple(compact_spectrum(model))

        cg = cg_steihaug(
            g, lambda v: compact_hessvec(model, v), state.delta,
            eps=default_cg_tolerance(gn),
        )
        p = cg.p
        pnorm = float(np.linalg.norm(p))
        Bp = compact_hessvec(model, p)
        decrease = -(float(g @ p) + 0.5 * float(p @ Bp))

        if decrease < MODEL_DECREASE_GUARD * (1.0 + abs(f)):
            accepted_step, rho = False, float("nan")
        else:
            f_trial = problem.value(w + p)
            accepted_step, rho = step_acceptance(f, f_trial, decrease, config.tr.eta1)
            if accepted_step:
                w = w + p
        delta_used = state.delta
        state = adjust_radius(state, rho, pnorm)

        records.append(IterationRecord(
            k=k, f=f, grad_norm=gn, rho=rho, delta=delta_used,
            step_accepted=accepted_step, accepted_pairs=tuple(acc),
            safety_rejected=len(outcome.safety_rejected),
            cg_iters=cg.iterations, cg_status=cg.status,
            floats_broadcast=0, floats_reduced=0,
            wall_time=time.perf_counter() - tick,
            jaccard=jac, spectrum=spectrum,
        ))
        if iterates is not None:
            iterates.append(w.copy())
    return RunResult(
        records=records, w_final=w, stop_reason=stop_reason, config=config,
        iterates=iterates,
    )


def _initial_iterate(config, d):
    if config.initial_iterate is None:
        return np.zeros(d)
    w0 = np.asarray(config.initial_iterate, dtype=float)
    if w0.shape != (d,):
        raise InvalidArgumentError(f"initial iterate shape {w0.shape}, expected ({d},)")
    return w0.copy()


def _eval_record(k, f, gn, state, tick):
    return IterationRecord(
        k=k, f=float(f), grad_norm=gn, rho=float("nan"), delta=state.delta,
        step_accepted=False, accepted_pairs=(), safety_rejected=0,
        cg_iters=0, cg_status="", floats_broadcast=0, floats_reduced=0,
        wall_time=time.perf_counter() - tick,
    )


# ---------------------------------------------------------------------------
# Worker state machine
# ---------------------------------------------------------------------------

def _checksum(w):
    return np.array([zlib.crc32(np.ascontiguousarray(w, dtype="<f8").tobytes())],
                    dtype=np.int64)


def _scaled(arr, scale):
    return arr if scale == 1.0 else arr * scale


def worker_loop(rank, endpoint, shard, config, scale):
    """Run one worker until the master broadcasts a stop.

    Dispatches on the category of each incoming broadcast: a new iterate
    starts an evaluation, a pair-go trigger starts local curvature work, a
    CG direction runs one collective hessvec round, and a step broadcast
    runs the final hessvec round plus the trial evaluation.
    """
    wc = WorkerCollectives(endpoint)
    d = shard.dim
    factory = config.factory(d)
    exact_mode = config.resolved_acceptance == ACCEPT_EXACT
    w = None
    Y = None
    y_acc = None
    minv = np.zeros((0, 0))
    k = -1
    while True:
        frame = wc.recv()
        cat = frame.category
        if cat == "iterate_w":
            if frame.flag == FLAG_STOP:
                return
            k += 1
            w = frame.sections[0].data
            f_i = shard.value(w)
            g_i = shard.gradient(w)
            fval_secs = [Section(np.array([_scaled(f_i, scale)]))]
            if config.checksum_every and k % config.checksum_every == 0:
                fval_secs.append(
                    Section(_checksum(w), counted=False, combine=COMBINE_EQUAL)
                )
            wc.send_reduce("fval_reduce", "eval", fval_secs)
            wc.send_reduce("grad_reduce", "eval", [Section(_scaled(g_i, scale))])
        elif cat == "misc" and frame.flag == FLAG_PAIR_GO:
            S = factory.generate(k)
            Y = local_Y(shard, w, S)
            if config.variant == NAIVE:
                wc.send_reduce("misc", "pair", [
                    Section(_scaled(S, scale).ravel()),
                    Section(_scaled(Y, scale).ravel()),
                ])
                continue
            sy_i = S.T @ Y
            sections = [
                Section(_scaled(sy_i, scale).ravel()),
                # Seed-derived on every node: rides uncounted, rank 0's copy wins.
                Section((S.T @ S).ravel(), counted=False, combine=COMBINE_FIRST),
            ]
            if exact_mode:
                sections.append(Section(_scaled(Y, scale).ravel()))
            wc.send_reduce("gram_sy_reduce", "pair", sections)
            accept_frame = wc.recv()
            idx = accept_frame.sections[0].data
            y_acc = Y[:, idx] if idx.size else Y[:, :0]
            minv = np.zeros((0, 0))
        elif cat == "cg_direction_broadcast":
            dvec = frame.sections[0].data
            minv_frame = wc.recv()
            j = y_acc.shape[1]
            minv = minv_frame.sections[0].data.reshape((j, j))
            partial = minv @ (y_acc.T @ dvec)
            wc.send_reduce("hessvec_partial_reduce", "cg", [Section(_scaled(partial, scale))])
            mid = wc.recv().sections[0].data
            wc.send_reduce("hessvec_final_reduce", "cg", [Section(y_acc @ mid)])
        elif cat == "step_p":
            p = frame.sections[0].data
            if config.variant == NAIVE:
                f_trial = shard.value(w + p)
                wc.send_reduce("fval_reduce", "step",
                               [Section(np.array([_scaled(f_trial, scale)]))])
                continue
            partial = minv @ (y_acc.T @ p)
            wc.send_reduce("hessvec_partial_reduce", "step", [Section(_scaled(partial, scale))])
            mid = wc.recv().sections[0].data
            wc.send_reduce("hessvec_final_reduce", "step", [Section(y_acc @ mid)])
            f_trial = shard.value(w + p)
            wc.send_reduce("fval_reduce", "step",
                           [Section(np.array([_scaled(f_trial, scale)]))])
        else:
            raise ProtocolError(f"worker {rank} cannot dispatch {cat}/{frame.flag}")


# ---------------------------------------------------------------------------
# Distributed drivers
# ---------------------------------------------------------------------------

def _shard_scales(shards):
    counts = [s.n_samples for s in shards]
    total = sum(counts)
    k = len(shards)
    return [c * k / total for c in counts]


def run_distributed(problem_shards, config, cluster):
    """Drive the communication-efficient variant over a worker cluster."""
    if config.variant != DSLSR1:
        raise InvalidArgumentError("run_distributed requires variant='dslsr1'")
    return _run_master(problem_shards, config, cluster)


def run_naive(problem_shards, config, cluster):
    """Drive the naive baseline (raw pair matrices reduced to the master)."""
    if config.variant != NAIVE:
        raise InvalidArgumentError("run_naive requires variant='naive'")
    return _run_master(problem_shards, config, cluster)


def _run_master(shards, config, cluster):
    if len(shards) != cluster.n_workers or len(shards) != config.workers:
        raise InvalidArgumentError(
            f"{len(shards)} shards for {cluster.n_workers} workers "
            f"(config says {config.workers})"
        )
    d = shards[0].dim
    m = config.m
    ledger = CommLedger()
    meter = FlopMeter()
    mc = MasterCollectives(cluster, ledger, meter)
    scales = _shard_scales(shards)
    cluster.start(worker_loop, [(shards[r], config, scales[r]) for r in range(len(shards))])

    w = _initial_iterate(config, d)
    factory = config.factory(d)
    state = TrustRegionState(config.delta0, config.tr)
    records = []
    iterates = [] if config.track_iterates else None
    stop_reason = "max_iters"
    exact_mode = config.resolved_acceptance == ACCEPT_EXACT
    naive = config.variant == NAIVE

    try:
        for k in range(config.max_iters):
            tick = time.perf_counter()
            mc.iteration = meter.iteration = k
            mc.broadcast("iterate_w", "eval", [Section(w)])
            f = float(mc.reduce("fval_reduce", "eval")[0][0])
            g = mc.reduce("grad_reduce", "eval")[0]
            if not (np.isfinite(f) and np.all(np.isfinite(g))):
                records.append(_ledgered(_eval_record(k, f, float("nan"), state, tick), ledger, k))
                stop_reason = "numerical_abort"
                break
            meter.charge("grad_norm", 2 * d)
            gn = float(np.linalg.norm(g))
            if gn <= config.grad_norm_tol:
                records.append(_ledgered(_eval_record(k, f, gn, state, tick), ledger, k))
                stop_reason = "gradient_tolerance"
                break
            if config.target_fval is not None and f <= config.target_fval:
                records.append(_ledgered(_eval_record(k, f, gn, state, tick), ledger, k))
                stop_reason = "target_fval"
                break

            # Pair phase.  The trigger stands in for the pair-phase broadcast:
            # the displacement block is regenerated from the shared seed, so
            # the frame carries no floats.
            mc.broadcast("misc", "pair", flag=FLAG_PAIR_GO)
            if naive:
                blocks = mc.reduce("misc", "pair")
                S_red = blocks[0].reshape((d, m))
                Y_red = blocks[1].reshape((d, m))
                meter.charge("gram_ss", 2 * m * m * d)
                meter.charge("gram_sy", 2 * m * m * d)
                meter.charge("gram_yy", 2 * m * m * d)
                gram = build_gram(S_red, Y_red)
                y_for_model = Y_red
            else:
                blocks = mc.reduce("gram_sy_reduce", "pair")
                sy = blocks[0].reshape((m, m))
                ss = blocks[1].reshape((m, m))
                if exact_mode:
                    y_red = blocks[2].reshape((d, m))
                    meter.charge("gram_yy_exact_mode", 2 * m * m * d)
                    gram = GramTriple(ss=ss, sy=sy, yy=y_red.T @ y_red, sketched=False)
                else:
                    meter.charge("gram_yy_sketch", 2 * m * m * m)
                    gram = GramTriple(ss=ss, sy=sy, yy=sketch_yy(sy, ss), sketched=True)
                y_for_model = None
            outcome = accept_pairs(gram, config.eta)
            meter.charge("pair_acceptance", acceptance_flop_estimate(m, outcome.accepted))
            acc = list(outcome.accepted)
            j = len(acc)
            minv = outcome.ladder.inv
            if not naive:
                mc.broadcast("misc", "pair",
                             [Section(np.asarray(acc, dtype=np.int64), counted=False)])
                hessvec = _collective_hessvec(mc, minv)
            else:
                model = CompactHessian(y_for_model[:, acc], outcome.ladder, gram=gram)
                hessvec = _metered_hessvec(model, meter, j, d)

            cg = cg_steihaug(
                g, hessvec, state.delta, eps=default_cg_tolerance(gn), meter=meter,
            )
            p = cg.p
            meter.charge("step_norm", 2 * d)
            pnorm = float(np.linalg.norm(p))

            # Step phase.
            mc.broadcast("step_p", "step", [Section(p)])
            if naive:
                Bp = hessvec(p)
                f_trial = float(mc.reduce("fval_reduce", "step")[0][0])
            else:
                partial = mc.reduce("hessvec_partial_reduce", "step")[0]
                mc.broadcast("hessvec_partial_reduce", "step", [Section(partial)])
                Bp = mc.reduce("hessvec_final_reduce", "step")[0]
                f_trial = float(mc.reduce("fval_reduce", "step")[0][0])
            meter.charge("model_decrease_gp", 2 * d)
            meter.charge("model_decrease_pBp", 2 * d)
            decrease = -(float(g @ p) + 0.5 * float(p @ Bp))
            accepted_step, rho = step_acceptance(f, f_trial, decrease, config.tr.eta1)
            if accepted_step:
                meter.charge("iterate_update", d)
                w = w + p
            delta_used = state.delta
            state = adjust_radius(state, rho, pnorm)

            records.append(_ledgered(IterationRecord(
                k=k, f=f, grad_norm=gn, rho=rho, delta=delta_used,
                step_accepted=accepted_step, accepted_pairs=tuple(acc),
                safety_rejected=len(outcome.safety_rejected),
                cg_iters=cg.iterations, cg_status=cg.status,
                floats_broadcast=0, floats_reduced=0,
                wall_time=time.perf_counter() - tick,
            ), ledger, k))
            if iterates is not None:
                iterates.append(w.copy())
        clean_exit = True
    except BaseException:
        clean_exit = False
        raise
    finally:
        # Best-effort shutdown; never mask an in-flight exception.
        mc.iteration = len(records)
        try:
            mc.broadcast("iterate_w", "eval", flag=FLAG_STOP)
            cluster.join()
        except Exception:
            if clean_exit:
                raise
        finally:
            cluster.close()
    return RunResult(
        records=records, w_final=w, stop_reason=stop_reason, config=config,
        ledger=ledger, meter=meter, iterates=iterates,
    )


def _collective_hessvec(mc, minv):
    """Hessvec through two broadcast/reduce rounds; the master only relays.

    The reduced first leg is already the inverse applied to the stacked
    column inner products (workers apply the inverse locally), so the master
    broadcasts it back verbatim and reduces the final d-vector.
    """
    minv_flat = minv.ravel()

    def hv(dvec):
        mc.broadcast("cg_direction_broadcast", "cg", [Section(dvec)])
        mc.broadcast("minv_matrix", "cg", [Section(minv_flat)])
        partial = mc.reduce("hessvec_partial_reduce", "cg")[0]
        mc.broadcast("hessvec_partial_reduce", "cg", [Section(partial)])
        return mc.reduce("hessvec_final_reduce", "cg")[0]

    return hv


def _metered_hessvec(model, meter, j, d):
    def hv(v):
        meter.charge("hessvec_local", 4 * j * d + 2 * j * j)
        return compact_hessvec(model, v)

    return hv


def _ledgered(record, ledger, k):
    bcast = sum(r.floats for r in ledger.iteration_records(k) if r.direction == "broadcast")
    red = sum(r.floats for r in ledger.iteration_records(k) if r.direction == "reduce")
    return replace(record, floats_broadcast=bcast, floats_reduced=red)
