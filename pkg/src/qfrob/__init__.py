"""Exact quantization engine for semisimple frobenius-manifold potentials."""

from __future__ import annotations

__version__ = "0.1.0"

from .coefficients import (
    BigComplexField,
    BigComplexNumber,
    DEFAULT_PRECISION,
    RationalField,
    bernoulli_number,
)
from .errors import (
    CapExceededError,
    GradingError,
    NonSymplecticError,
    QfrobError,
    WindowError,
)
from .fock import Caps, FockElement, FockVector, correlator, total_exp, total_log
from .kdvtau import (
    HodgeParameters,
    dvv_correlator,
    hodge_deform,
    hodge_integral,
    solve_tau,
    tau_correlator,
)
from .quantize import (
    DarbouxFrame,
    QuadHamiltonian,
    QuantizedOperator,
    act_lower,
    act_upper,
    apply_quantized,
    cocycle,
    hamiltonian_of,
    poisson_bracket,
    quantize,
    series_hamiltonian,
)
from .series import MatrixZSeries, Polynomial, SymplecticKind
from .virasoro import (
    VirasoroIndexData,
    VirasoroOperator,
    annihilation_residual,
    bracket_defect,
    conformal_virasoro,
    point_virasoro,
)
