"""Sampled limited-memory SR1 trust-region optimization.

Serial and master-worker drivers over a pluggable transport with exact
float-level communication accounting.  See the README for the CLI and the
per-module docs for the mathematics.
"""

from .errors import (
    ConfigError,
    DSLSR1Error,
    InvalidArgumentError,
    NumericalError,
    ProtocolError,
    SingularUpdateError,
    TransportError,
    UnsupportedDiagnosticError,
)
from .flops import FlopMeter
from .metrics import amdahl_bound, build_report
from .optimizer import (
    DSLSR1,
    NAIVE,
    SERIAL,
    IterationRecord,
    OptimizerConfig,
    RunResult,
    jaccard_similarity,
    run_distributed,
    run_naive,
    run_serial,
    step_acceptance,
)
from .problems import (
    LogisticShard,
    MlpTinyShard,
    ObjectiveShard,
    QuadraticShard,
    make_synthetic,
    merge_shards,
)
from .sampling import CurvatureFactory, generate_S, local_Y
from .sr1 import (
    CompactHessian,
    GramTriple,
    MInverseLadder,
    PairAcceptance,
    accept_pairs,
    build_gram,
    compact_hessvec,
    compact_spectrum,
    dense_sr1_matrix,
    minverse_append,
    pair_matrix,
    sketch_yy,
)
from .transport import (
    CommLedger,
    SimCluster,
    TcpCluster,
    floats_to_gb,
    predict_floats,
)
from .trust_region import (
    CgResult,
    TrustRegionParams,
    TrustRegionState,
    adjust_radius,
    boundary_tau,
    cg_steihaug,
    default_cg_tolerance,
)

__version__ = "0.1.0"
