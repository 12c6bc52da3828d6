"""krn: a small parallel array kernel language with reverse-mode AD.

The package parses kernel-language source, performs activity/race/taping
analyses, generates gradient functions by source transformation, executes
programs on a deterministic multi-threaded interpreter, and verifies
gradients against finite differences and an analytic oracle.
"""

from .adjoint import (
    GradientPlan,
    InactiveReturn,
    NotFeasible,
    UnknownFunction,
    differentiate,
)
from .analysis import (
    ActivityResult,
    RaceFlag,
    RaceResult,
    TapingVerdict,
    TapingViolation,
    UnknownParameter,
    activity,
    race_analysis,
    taping_feasibility,
)
from .parser import ParseError, ValidationError, parse
from .partials import NonDifferentiableOp
from .printer import emit
from .runtime import (
    ConflictRecord,
    ConflictReport,
    ExecResult,
    ExecutionConfig,
    NonFiniteDetected,
    OutOfBounds,
    ShapeMismatch,
    ViewStorage,
    detect_conflicts,
    execute,
    load_tensor,
    save_tensor,
)
from .verify import (
    BenchResult,
    GradientReport,
    ad_gradient,
    bench_ratio,
    check_gradient,
    finite_difference_gradient,
    laplacian_oracle,
)

__version__ = "0.1.0"

__all__ = [
    "ActivityResult",
    "BenchResult",
    "ConflictRecord",
    "ConflictReport",
    "ExecResult",
    "ExecutionConfig",
    "GradientPlan",
    "GradientReport",
    "InactiveReturn",
    "NonDifferentiableOp",
    "NonFiniteDetected",
    "NotFeasible",
    "OutOfBounds",
    "ParseError",
    "RaceFlag",
    "RaceResult",
    "ShapeMismatch",
    "TapingVerdict",
    "TapingViolation",
    "UnknownFunction",
    "UnknownParameter",
    "ValidationError",
    "ViewStorage",
    "activity",
    "ad_gradient",
    "bench_ratio",
    "check_gradient",
    "detect_conflicts",
    "differentiate",
    "emit",
    "execute",
    "finite_difference_gradient",
    "laplacian_oracle",
    "load_tensor",
    "parse",
    "race_analysis",
    "save_tensor",
    "taping_feasibility",
    "__version__",
]
