"""Numerics for fully nonlinear integro-differential operators.

Grids with exterior closures, extremal operators over kernel classes,
envelope and touching-measure machinery, barrier construction, regularized
envelopes of semicontinuous data, fixed-point solvers, and regularity
estimators, plus a CLI that writes every experiment as delimited text.
"""

from .barriers import (
    BarrierError,
    BarrierParams,
    barrier_function,
    build_phi,
    cap_coefficients,
    choose_p,
    verify_subsolution,
)
from .convolutions import (
    ComparisonReport,
    ConvolutionError,
    ConvolutionParams,
    comparison_check,
    inf_convolution,
    semiconvexity_check,
    sup_convolution,
)
from .envelope import (
    CubeDecomposition,
    CubeRecord,
    EnvelopeError,
    EnvelopeResult,
    abp_bound,
    concave_envelope,
    cube_decompose,
    initial_cube_diameter,
    ring_estimate,
)
from .exceptions import NpdeError
from .grid import (
    GridError,
    GridFunction,
    GridSpec,
    constant_closure,
    power_decay_closure,
    radial_table_closure,
    read_grid_csv,
    sample_function,
    sign_step_closure,
    write_grid_csv,
    zero_closure,
)
from .kernels import (
    Kernel,
    KernelClass,
    KernelError,
    finite_class,
    fractional_kernel,
    kernel_from_config,
    kernel_value,
    l0_class,
    l1_class,
    matrix_kernel,
    truncated_class,
    truncated_kernel,
)
from .operators import (
    OperatorError,
    OperatorSpec,
    QuadratureSpec,
    apply,
    apply_sweep,
    extremal_operator,
    isaacs_operator,
    isaacs_sandwich_check,
    linear_operator,
    near_field_extremal,
    second_difference,
)
from .limits import (
    LimitError,
    LimitReport,
    calibrate_cn,
    sigma_limit_error,
)
from .regularity import (
    Certificate,
    RegularityError,
    RegularityReport,
    RegularityRow,
    certify_solution,
    harnack_measure,
    holder_fit,
    incremental_quotient_field,
    regularity_row,
    tail_fit,
)
from .solver import (
    DirichletProblem,
    SolveReport,
    SolverError,
    omega_ball,
    omega_cube,
    residual,
    solve,
    weight_budget,
)

__version__ = "0.1.0"

__all__ = [
    "NpdeError",
    "GridError",
    "GridSpec",
    "GridFunction",
    "sample_function",
    "constant_closure",
    "power_decay_closure",
    "sign_step_closure",
    "zero_closure",
    "radial_table_closure",
    "write_grid_csv",
    "read_grid_csv",
    "KernelError",
    "Kernel",
    "KernelClass",
    "fractional_kernel",
    "matrix_kernel",
    "truncated_kernel",
    "kernel_value",
    "kernel_from_config",
    "l0_class",
    "l1_class",
    "finite_class",
    "truncated_class",
    "OperatorError",
    "OperatorSpec",
    "QuadratureSpec",
    "second_difference",
    "near_field_extremal",
    "apply",
    "apply_sweep",
    "linear_operator",
    "extremal_operator",
    "isaacs_operator",
    "isaacs_sandwich_check",
    "ConvolutionError",
    "ConvolutionParams",
    "ComparisonReport",
    "sup_convolution",
    "inf_convolution",
    "semiconvexity_check",
    "comparison_check",
    "EnvelopeError",
    "EnvelopeResult",
    "CubeRecord",
    "CubeDecomposition",
    "concave_envelope",
    "ring_estimate",
    "initial_cube_diameter",
    "cube_decompose",
    "abp_bound",
    "BarrierError",
    "BarrierParams",
    "choose_p",
    "cap_coefficients",
    "barrier_function",
    "build_phi",
    "verify_subsolution",
    "SolverError",
    "DirichletProblem",
    "SolveReport",
    "omega_ball",
    "omega_cube",
    "weight_budget",
    "residual",
    "solve",
    "RegularityError",
    "Certificate",
    "RegularityRow",
    "RegularityReport",
    "certify_solution",
    "holder_fit",
    "harnack_measure",
    "tail_fit",
    "incremental_quotient_field",
    "regularity_row",
    "LimitError",
    "LimitReport",
    "calibrate_cn",
    "sigma_limit_error",
    "__version__",
]
