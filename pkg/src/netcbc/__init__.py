"""netcbc: probabilistic safety certificates for control loops over lossy links."""

from .augment import (
    AffineMatrix,
    AugDims,
    AugmentedSystem,
    AugState,
    assemble_realized,
    build,
    dimensions,
    pack,
    unpack,
)
from .certificate import (
    BetaNotAboveEta,
    Certificate,
    barrier_value,
    drift_constant,
    expected_next_barrier,
    initial_level,
    safety_bound,
    synthesize,
    unsafe_level,
)
from .lmi import (
    DeltaSearchConfig,
    DeltaWeights,
    ExhaustedSearch,
    FeasibilityOutcome,
    LmiConstraint,
    SolverSettings,
    SynthesisResult,
    find_barrier_and_gain,
    solve_feasibility,
    stage1_find_P,
    stage2_find_F,
    verify_master_inequality,
)
from .netsim import Aggregate, RunResult, SimConfig, monte_carlo, run
from .sysmodel import (
    Box,
    ChannelSpec,
    ConfigError,
    SafetySpec,
    SystemSpec,
    ValidationReport,
    box_disjoint,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "AffineMatrix", "AugDims", "AugmentedSystem", "AugState",
    "assemble_realized", "build", "dimensions", "pack", "unpack",
    "BetaNotAboveEta", "Certificate", "barrier_value", "drift_constant",
    "expected_next_barrier", "initial_level", "safety_bound", "synthesize",
    "unsafe_level",
    "DeltaSearchConfig", "DeltaWeights", "ExhaustedSearch",
    "FeasibilityOutcome", "LmiConstraint", "SolverSettings",
    "SynthesisResult", "find_barrier_and_gain", "solve_feasibility",
    "stage1_find_P", "stage2_find_F", "verify_master_inequality",
    "Aggregate", "RunResult", "SimConfig", "monte_carlo", "run",
    "Box", "ChannelSpec", "ConfigError", "SafetySpec", "SystemSpec",
    "ValidationReport", "box_disjoint", "validate",
]
