"""Volatility-surface derivative pricing with a Gaussian-process surrogate.

The package builds parameterized arbitrage-aware volatility surfaces, prices
variance swaps (static replication) and American puts (finite differences)
against them, and trains a Gaussian-process regressor that maps the risk
factors straight to the valuations, trading a one-off training cost for
near-instant batch pricing.
"""

from .analytics import EuropeanQuote, bs_call, bs_put, norm_cdf
from .dataset import (
    Dataset,
    EvalReport,
    RangeSpec,
    default_ranges,
    evaluate,
    generate,
    read_dataset,
    relative_error,
    sample,
)
from .exceptions import ButterflyArbitrageError, ConvergenceError, ParameterError
from .fdsolver import (
    GridSpec,
    PdeProblem,
    PdeSolution,
    default_grid,
    greeks_at,
    solve,
)
from .gpr import GprSurrogate, log_marginal_likelihood, rbf_kernel
from .varswap import VarSwapInputs, fair_strike, strike_vol
from .volsurface import (
    LocalVarianceGrid,
    SurfaceParams,
    SviSlice,
    atm_bs_vol,
    local_variance,
    local_variance_grid,
    term_factor,
    total_variance_slice,
    total_variance_surface,
)

__version__ = "0.1.0"

__all__ = [
    "EuropeanQuote", "bs_call", "bs_put", "norm_cdf",
    "Dataset", "EvalReport", "RangeSpec", "default_ranges", "evaluate",
    "generate", "read_dataset", "relative_error", "sample",
    "ButterflyArbitrageError", "ConvergenceError", "ParameterError",
    "GridSpec", "PdeProblem", "PdeSolution", "default_grid", "greeks_at", "solve",
    "GprSurrogate", "log_marginal_likelihood", "rbf_kernel",
    "VarSwapInputs", "fair_strike", "strike_vol",
    "LocalVarianceGrid", "SurfaceParams", "SviSlice", "atm_bs_vol",
    "local_variance", "local_variance_grid", "term_factor",
    "total_variance_slice", "total_variance_surface",
    "__version__",
]
