"""Master-worker collectives with a byte-exact ledger of every float moved.

Two backends share one contract: the master issues a collective and blocks
until completion; each worker blocks on the next expected collective; one
collective is in flight at a time.  Reduces are combined at the master with
a fixed ascending-rank pairwise tree, so aggregation is bitwise
reproducible for a given worker count.

Accounting is logical: a broadcast of n floats costs n (not n per worker)
and a reduce costs the length of one contributed block.  That is the only
reading under which the per-iteration float totals quoted for the two
distributed variants are internally consistent.  Integer metadata (accepted
index lists) and blocks every node can regenerate from the shared seed
(displacement inner products) ride along uncounted; see the sections'
``counted`` flag.

Wire format (TCP backend)
-------------------------
Frames are length-prefixed: a little-endian u32 holding the byte length of
header plus body, then a 16-byte header

    magic   u32   0x44534C31 ("1LSD" on the wire, little-endian)
    version u16   1
    category u8   index into CATEGORIES
    direction u8  0 broadcast, 1 reduce
    phase   u8    index into PHASES
    flag    u8    0 none, 1 stop, 2 pair-go
    counted u32   ledger-counted float payload of this frame
    reserved u16  zero

then a u16 section count and, per section: dtype u8 (0 float64, 1 int64),
semantics u8 (bit 0 counted, bits 1-2 combine mode), count u32, and the raw
little-endian payload.  The connection handshake exchanges
(version, rank, d, m, K, seed) packed as little-endian u64 fields.
"""

import json
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ProtocolError, TransportError

CATEGORIES = (
    "iterate_w",
    "step_p",
    "minv_matrix",
    "grad_reduce",
    "fval_reduce",
    "gram_sy_reduce",
    "hessvec_partial_reduce",
    "hessvec_final_reduce",
    "cg_direction_broadcast",
    "misc",
)
PHASES = ("eval", "pair", "cg", "step")
BROADCAST = "broadcast"
REDUCE = "reduce"

FLAG_NONE = 0
FLAG_STOP = 1
FLAG_PAIR_GO = 2

COMBINE_MEAN = "mean"
COMBINE_SUM = "sum"
COMBINE_FIRST = "first"
COMBINE_EQUAL = "equal"
_COMBINE_CODES = (COMBINE_MEAN, COMBINE_SUM, COMBINE_FIRST, COMBINE_EQUAL)

_MAGIC = 0x44534C31
_VERSION = 1
_HEADER = struct.Struct("<IHBBBBIH")
_SECTION_HEAD = struct.Struct("<BBI")
_HANDSHAKE = struct.Struct("<IHHQQQQQ")  # magic, version, reserved, rank, d, m, K, seed

DEFAULT_TIMEOUT = 120.0


@dataclass(frozen=True)
class Section:
    """One typed block inside a frame.

    ``counted`` marks the block as ledger-visible float traffic; integer
    blocks are never counted.  ``combine`` selects the reduce semantics:
    mean or sum over workers, ``first`` for seed-identical replicas, and
    ``equal`` for replicas that must match bitwise (divergence check).
    """

    data: np.ndarray
    counted: bool = True
    combine: str = COMBINE_MEAN

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype.kind == "f":
            arr = np.ascontiguousarray(arr, dtype="<f8")
        elif arr.dtype.kind in "iu":
            arr = np.ascontiguousarray(arr, dtype="<i8")
        else:
            raise InvalidArgumentError(f"unsupported section dtype {arr.dtype}")
        object.__setattr__(self, "data", arr)
        if self.combine not in _COMBINE_CODES:
            raise InvalidArgumentError(f"unknown combine mode {self.combine!r}")

    @property
    def counted_floats(self):
        return self.data.size if (self.counted and self.data.dtype.kind == "f") else 0


@dataclass(frozen=True)
class Frame:
    category: str
    phase: str
    direction: str
    flag: int = FLAG_NONE
    sections: tuple = ()

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise InvalidArgumentError(f"unknown category {self.category!r}")
        if self.phase not in PHASES:
            raise InvalidArgumentError(f"unknown phase {self.phase!r}")
        object.__setattr__(self, "sections", tuple(self.sections))

    @property
    def counted_floats(self):
        return sum(sec.counted_floats for sec in self.sections)


def encode_frame(frame):
    body = [struct.pack("<H", len(frame.sections))]
    for sec in frame.sections:
        dtype_code = 0 if sec.data.dtype.kind == "f" else 1
        sem = (1 if sec.counted else 0) | (_COMBINE_CODES.index(sec.combine) << 1)
        body.append(_SECTION_HEAD.pack(dtype_code, sem, sec.data.size))
        body.append(sec.data.tobytes())
    body = b"".join(body)
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        CATEGORIES.index(frame.category),
        0 if frame.direction == BROADCAST else 1,
        PHASES.index(frame.phase),
        frame.flag,
        frame.counted_floats,
        0,
    )
    return struct.pack("<I", len(header) + len(body)) + header + body


def decode_frame(payload):
    if len(payload) < _HEADER.size:
        raise ProtocolError("short frame")
    magic, version, cat, direction, phase, flag, _, _ = _HEADER.unpack_from(payload, 0)
    if magic != _MAGIC:
        raise ProtocolError(f"bad frame magic {magic:#x}")
    if version != _VERSION:
        raise ProtocolError(f"unsupported frame version {version}")
    off = _HEADER.size
    (nsec,) = struct.unpack_from("<H", payload, off)
    off += 2
    sections = []
    for _ in range(nsec):
        dtype_code, sem, count = _SECTION_HEAD.unpack_from(payload, off)
        off += _SECTION_HEAD.size
        dtype = "<f8" if dtype_code == 0 else "<i8"
        nbytes = count * 8
        data = np.frombuffer(payload, dtype=dtype, count=count, offset=off).copy()
        off += nbytes
        sections.append(
            Section(data, counted=bool(sem & 1), combine=_COMBINE_CODES[sem >> 1])
        )
    return Frame(
        category=CATEGORIES[cat],
        phase=PHASES[phase],
        direction=BROADCAST if direction == 0 else REDUCE,
        flag=flag,
        sections=tuple(sections),
    )


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LedgerRecord:
    iteration: int
    phase: str
    category: str
    direction: str
    floats: int


class CommLedger:
    """Append-only per-collective float counts, queryable per iteration.

    The "eval" phase holds the traffic common to every variant (iterate
    broadcast, gradient and current-value reduces); "pair" and "step" hold
    the fixed per-iteration schedule whose sum is the variants' headline
    cost; "cg" scales with the subproblem iteration count.
    """

    def __init__(self):
        self.records = []

    def log(self, iteration, phase, category, direction, floats):
        if phase not in PHASES or category not in CATEGORIES:
            raise InvalidArgumentError(f"bad ledger key {phase}/{category}")
        self.records.append(
            LedgerRecord(int(iteration), phase, category, direction, int(floats))
        )

    def iteration_records(self, k):
        return [r for r in self.records if r.iteration == k]

    def _sum(self, k=None, phases=None):
        return sum(
            r.floats
            for r in self.records
            if (k is None or r.iteration == k) and (phases is None or r.phase in phases)
        )

    def common_total(self, k=None):
        return self._sum(k, phases=("eval",))

    def noncommon_delta(self, k=None):
        """Fixed-schedule floats outside the common and CG categories."""
        return self._sum(k, phases=("pair", "step"))

    def cg_total(self, k=None):
        return self._sum(k, phases=("cg",))

    def total_floats(self, k=None):
        return self._sum(k)

    def iterations(self):
        return sorted({r.iteration for r in self.records})

    def category_totals(self):
        out = {}
        for r in self.records:
            key = (r.category, r.direction)
            out[key] = out.get(key, 0) + r.floats
        return out

    def total_bytes(self, bytes_per_float=8):
        if bytes_per_float not in (4, 8):
            raise InvalidArgumentError("bytes_per_float must be 4 or 8")
        return self.total_floats() * bytes_per_float

    def to_csv(self, path, bytes_per_float=8):
        with open(path, "w") as fh:
            fh.write("iteration,phase,category,direction,floats,bytes\n")
            for r in self.records:
                fh.write(
                    f"{r.iteration},{r.phase},{r.category},{r.direction},"
                    f"{r.floats},{r.floats * bytes_per_float}\n"
                )

    def to_json(self, path, bytes_per_float=8):
        payload = {
            "bytes_per_float": bytes_per_float,
            "total_floats": self.total_floats(),
            "total_bytes": self.total_bytes(bytes_per_float),
            "records": [
                {
                    "iteration": r.iteration,
                    "phase": r.phase,
                    "category": r.category,
                    "direction": r.direction,
                    "floats": r.floats,
                    "bytes": r.floats * bytes_per_float,
                }
                for r in self.records
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)


def predict_floats(d, m, j_accepted, cg_iters, variant):
    """Closed-form per-iteration float counts for one distributed iteration.

    The fixed (non-CG) delta on top of the common traffic is
    ``m^2 + 2d + 2j + 1`` for the communication-efficient variant (inner
    product block, step broadcast, the two j-sized hessvec legs, the final
    d-sized hessvec reduce, and the trial value) and ``2md + d + 1`` for the
    naive variant (raw pair blocks, trial broadcast, trial value).  Each CG
    iteration of the efficient variant moves ``j^2 + 2j + 2d`` floats
    (direction and inverse broadcast, the two j-sized legs, the final
    reduce).  With every candidate accepted, j = m.
    """
    if min(d, m, j_accepted, cg_iters) < 0:
        raise InvalidArgumentError("counts must be nonnegative")
    if j_accepted > m:
        raise InvalidArgumentError(f"accepted {j_accepted} exceeds memory {m}")
    d, m, j = int(d), int(m), int(j_accepted)
    common = 2 * d + 1
    if variant == "dslsr1":
        fixed = m * m + 2 * d + 2 * j + 1
        per_cg = j * j + 2 * j + 2 * d
        cg = int(cg_iters) * per_cg
    elif variant == "naive":
        fixed = 2 * m * d + d + 1
        per_cg = 0
        cg = 0
    else:
        raise InvalidArgumentError(f"unknown variant {variant!r}")
    return {
        "common": common,
        "noncommon_delta": fixed,
        "per_cg_iteration": per_cg,
        "cg": cg,
        "total": common + fixed + cg,
    }


def floats_to_gb(floats, bytes_per_float=4):
    """Gigabytes with the 2**30-byte convention used in the cost analysis."""
    return floats * bytes_per_float / 2**30


# ---------------------------------------------------------------------------
# Collectives over a cluster
# ---------------------------------------------------------------------------

def _tree_sum(blocks):
    blocks = list(blocks)
    ops = []
    while len(blocks) > 1:
        merged = []
        for i in range(0, len(blocks) - 1, 2):
            merged.append(blocks[i] + blocks[i + 1])
            ops.append(blocks[i].size)
        if len(blocks) % 2:
            merged.append(blocks[-1])
        blocks = merged
    return blocks[0], ops


class MasterCollectives:
    """Ledgered broadcast/reduce as seen from the master role."""

    def __init__(self, cluster, ledger, meter=None):
        self.cluster = cluster
        self.ledger = ledger
        self.meter = meter
        self.iteration = 0

    def broadcast(self, category, phase, sections=(), flag=FLAG_NONE):
        frame = Frame(category, phase, BROADCAST, flag, tuple(sections))
        self.ledger.log(self.iteration, phase, category, BROADCAST, frame.counted_floats)
        self.cluster.broadcast_frame(frame)
        return frame

    def reduce(self, category, phase):
        """Gather one frame per worker and combine section-wise.

        Returns the list of combined arrays.  All workers must contribute
        the same category and section layout.
        """
        frames = self.cluster.gather_frames()
        ref = frames[0]
        for rank, fr in enumerate(frames):
            if fr.category != category or fr.phase != phase or fr.direction != REDUCE:
                raise ProtocolError(
                    f"worker {rank} sent {fr.phase}/{fr.category}/{fr.direction}, "
                    f"expected {phase}/{category}/reduce"
                )
            if len(fr.sections) != len(ref.sections):
                raise ProtocolError(f"worker {rank} sent a different section layout")
        combined = []
        for si, ref_sec in enumerate(ref.sections):
            datas = [fr.sections[si].data for fr in frames]
            for rank, (fr, data) in enumerate(zip(frames, datas)):
                sec = fr.sections[si]
                if data.shape != ref_sec.data.shape or sec.combine != ref_sec.combine:
                    raise ProtocolError(f"worker {rank} section {si} mismatches rank 0")
            if ref_sec.combine in (COMBINE_MEAN, COMBINE_SUM):
                total, ops = _tree_sum(datas)
                if self.meter is not None:
                    for n in ops:
                        self.meter.charge("reduce_combine", n)
                if ref_sec.combine == COMBINE_MEAN:
                    total = total / len(datas)
                    if self.meter is not None:
                        self.meter.charge("reduce_scale", total.size)
                combined.append(total)
            elif ref_sec.combine == COMBINE_FIRST:
                combined.append(datas[0])
            else:  # COMBINE_EQUAL: replicated state must match bitwise
                for rank, data in enumerate(datas[1:], start=1):
                    if not np.array_equal(data, datas[0]):
                        raise ProtocolError(
                            f"worker {rank} diverged from rank 0 in {category}"
                        )
                combined.append(datas[0])
        self.ledger.log(self.iteration, phase, category, REDUCE, ref.counted_floats)
        return combined


class WorkerCollectives:
    """The worker half of the contract: block on frames, answer reduces."""

    def __init__(self, endpoint):
        self.endpoint = endpoint

    def recv(self):
        frame = self.endpoint.recv_frame()
        if frame.direction != BROADCAST:
            raise ProtocolError(f"worker received a non-broadcast {frame.category}")
        return frame

    def send_reduce(self, category, phase, sections):
        self.endpoint.send_frame(Frame(category, phase, REDUCE, FLAG_NONE, tuple(sections)))


# ---------------------------------------------------------------------------
# In-process simulator backend
# ---------------------------------------------------------------------------

_ERROR = "__worker_error__"


class _SimWorkerEndpoint:
    def __init__(self, rank, inbox, outbox, timeout):
        self.rank = rank
        self.inbox = inbox
        self.outbox = outbox
        self.timeout = timeout

    def recv_frame(self):
        try:
            item = self.inbox.get(timeout=self.timeout)
        except queue.Empty as exc:
            raise TransportError(f"worker {self.rank} timed out", self.rank) from exc
        return item

    def send_frame(self, frame):
        self.outbox.put(frame)


class SimCluster:
    """Workers as threads in one process, channels as queues.

    The lockstep protocol (one collective in flight) makes scheduling
    immaterial: values are combined at the master in fixed rank order, so
    runs are bitwise reproducible.
    """

    def __init__(self, n_workers, timeout=DEFAULT_TIMEOUT):
        if n_workers < 1:
            raise InvalidArgumentError("need at least one worker")
        self.n_workers = n_workers
        self.timeout = timeout
        self._to_worker = [queue.Queue() for _ in range(n_workers)]
        self._to_master = [queue.Queue() for _ in range(n_workers)]
        self._threads = []
        self._errors = [None] * n_workers

    def start(self, worker_fn, worker_args):
        if len(worker_args) != self.n_workers:
            raise InvalidArgumentError("one argument tuple per worker required")

        def guard(rank, endpoint, args):
            try:
                worker_fn(rank, endpoint, *args)
            except Exception as exc:  # propagated to the master on next gather
                self._errors[rank] = exc
                self._to_master[rank].put((_ERROR, rank, repr(exc)))

        for rank in range(self.n_workers):
            endpoint = _SimWorkerEndpoint(
                rank, self._to_worker[rank], self._to_master[rank], self.timeout
            )
            th = threading.Thread(
                target=guard, args=(rank, endpoint, worker_args[rank]), daemon=True
            )
            self._threads.append(th)
            th.start()

    def broadcast_frame(self, frame):
        # One shared read-only copy per section; workers never write into it.
        sections = []
        for sec in frame.sections:
            data = sec.data.copy()
            data.flags.writeable = False
            sections.append(Section(data, counted=sec.counted, combine=sec.combine))
        shared = Frame(frame.category, frame.phase, frame.direction, frame.flag, tuple(sections))
        for q in self._to_worker:
            q.put(shared)

    def gather_frames(self):
        frames = []
        for rank, q in enumerate(self._to_master):
            try:
                item = q.get(timeout=self.timeout)
            except queue.Empty as exc:
                raise TransportError(f"no frame from worker {rank}", rank) from exc
            if isinstance(item, tuple) and item and item[0] == _ERROR:
                raise TransportError(
                    f"worker {item[1]} failed: {item[2]}", item[1]
                ) from self._errors[item[1]]
            frames.append(item)
        return frames

    def join(self, timeout=DEFAULT_TIMEOUT):
        for rank, th in enumerate(self._threads):
            th.join(timeout)
            if th.is_alive():
                raise TransportError(f"worker {rank} did not exit", rank)
            if self._errors[rank] is not None:
                raise TransportError(
                    f"worker {rank} failed: {self._errors[rank]!r}", rank
                ) from self._errors[rank]

    def close(self):
        pass


# ---------------------------------------------------------------------------
# TCP backend
# ---------------------------------------------------------------------------

def _recv_exact(sock, nbytes, rank):
    chunks = []
    remaining = nbytes
    while remaining:
        try:
            chunk = sock.recv(remaining)
        except OSError as exc:
            raise TransportError(f"socket error talking to worker {rank}", rank) from exc
        if not chunk:
            raise TransportError(f"worker {rank} disconnected", rank)
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _send_frame(sock, frame, rank):
    try:
        sock.sendall(encode_frame(frame))
    except OSError as exc:
        raise TransportError(f"socket error talking to worker {rank}", rank) from exc


def _recv_frame(sock, rank):
    (length,) = struct.unpack("<I", _recv_exact(sock, 4, rank))
    return decode_frame(_recv_exact(sock, length, rank))


class _TcpWorkerEndpoint:
    def __init__(self, rank, sock):
        self.rank = rank
        self.sock = sock

    def recv_frame(self):
        return _recv_frame(self.sock, self.rank)

    def send_frame(self, frame):
        _send_frame(self.sock, frame, self.rank)


class TcpCluster:
    """Socket-backed collectives; workers listen, the master dials each one.

    Worker addresses come from configuration as host:port entries (port 0
    lets the OS choose, for self-contained in-process runs).  The handshake
    exchanges (version, rank, d, m, K, seed) and both ends validate it.
    """

    def __init__(self, n_workers, handshake, addresses=None, timeout=DEFAULT_TIMEOUT):
        if n_workers < 1:
            raise InvalidArgumentError("need at least one worker")
        self.n_workers = n_workers
        self.timeout = timeout
        self.handshake = dict(handshake)
        if addresses is None:
            addresses = [("127.0.0.1", 0)] * n_workers
        if len(addresses) != n_workers:
            raise InvalidArgumentError("one address per worker required")
        self._listeners = []
        self.addresses = []
        for host, port in addresses:
            srv = socket.create_server((host, int(port)))
            srv.settimeout(timeout)
            self._listeners.append(srv)
            self.addresses.append(srv.getsockname()[:2])
        self._master_socks = [None] * n_workers
        self._threads = []
        self._errors = [None] * n_workers

    def _handshake_bytes(self, rank):
        return _HANDSHAKE.pack(
            _MAGIC,
            _VERSION,
            0,
            rank,
            self.handshake["d"],
            self.handshake["m"],
            self.n_workers,
            self.handshake["seed"],
        )

    def _check_handshake(self, payload, rank):
        magic, version, _, peer_rank, d, m, k, seed = _HANDSHAKE.unpack(payload)
        if magic != _MAGIC or version != _VERSION:
            raise ProtocolError(f"bad handshake from rank {rank}")
        expected = (rank, self.handshake["d"], self.handshake["m"], self.n_workers,
                    self.handshake["seed"])
        if (peer_rank, d, m, k, seed) != expected:
            raise ProtocolError(
                f"handshake mismatch with worker {rank}: "
                f"got {(peer_rank, d, m, k, seed)}, expected {expected}"
            )

    def start(self, worker_fn, worker_args):
        if len(worker_args) != self.n_workers:
            raise InvalidArgumentError("one argument tuple per worker required")

        def serve(rank, srv, args):
            try:
                conn, _ = srv.accept()
                conn.settimeout(self.timeout)
                self._check_handshake(_recv_exact(conn, _HANDSHAKE.size, rank), rank)
                conn.sendall(self._handshake_bytes(rank))
                worker_fn(rank, _TcpWorkerEndpoint(rank, conn), *args)
                conn.close()
            except Exception as exc:
                self._errors[rank] = exc
            finally:
                srv.close()

        for rank in range(self.n_workers):
            th = threading.Thread(
                target=serve, args=(rank, self._listeners[rank], worker_args[rank]),
                daemon=True,
            )
            self._threads.append(th)
            th.start()
        for rank, (host, port) in enumerate(self.addresses):
            sock = socket.create_connection((host, port), timeout=self.timeout)
            sock.sendall(self._handshake_bytes(rank))
            self._check_handshake(_recv_exact(sock, _HANDSHAKE.size, rank), rank)
            self._master_socks[rank] = sock

    def broadcast_frame(self, frame):
        payload = encode_frame(frame)
        for rank, sock in enumerate(self._master_socks):
            try:
                sock.sendall(payload)
            except OSError as exc:
                raise TransportError(f"broadcast to worker {rank} failed", rank) from exc

    def gather_frames(self):
        frames = []
        for rank, sock in enumerate(self._master_socks):
            if self._errors[rank] is not None:
                raise TransportError(
                    f"worker {rank} failed: {self._errors[rank]!r}", rank
                ) from self._errors[rank]
            frames.append(_recv_frame(sock, rank))
        return frames

    def join(self, timeout=DEFAULT_TIMEOUT):
        for rank, th in enumerate(self._threads):
            th.join(timeout)
            if th.is_alive():
                raise TransportError(f"worker {rank} did not exit", rank)
            if self._errors[rank] is not None:
                raise TransportError(
                    f"worker {rank} failed: {self._errors[rank]!r}", rank
                ) from self._errors[rank]

    def close(self):
        for sock in self._master_socks:
            if sock is not None:
                sock.close()
