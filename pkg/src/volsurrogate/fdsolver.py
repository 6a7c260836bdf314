"""Finite-difference pricer for American and European puts and calls.

The Black-Scholes operator with a (possibly state- and time-dependent) local
variance is discretized with central differences on a uniform price grid and
marched backward in time with a theta scheme. The first steps after expiry
are replaced by half-length fully implicit sub-steps to damp oscillations
from the payoff kink; the remaining steps use Crank-Nicolson weighting.
American early exercise is enforced each step by projected SOR on the
resulting linear complementarity system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from ._validation import as_float_array
from .exceptions import ConvergenceError, ParameterError
from .volsurface import LocalVarianceGrid

__all__ = [
    "GridSpec",
    "PdeProblem",
    "PdeSolution",
    "default_grid",
    "build_operator",
    "step",
    "psor_project",
    "solve",
    "greeks_at",
]

#: PSOR defaults: relaxation factor, max-norm residual tolerance, sweep cap.
PSOR_OMEGA = 1.2
PSOR_TOL = 1e-8
PSOR_MAX_ITER = 10_000

#: A constrained node counts as exercised when its complementarity residual
#: exceeds this multiple of the PSOR tolerance.
BINDING_RESIDUAL_FACTOR = 10.0


@dataclass(frozen=True)
class GridSpec:
    """Uniform discretization: price intervals, time steps, scheme weights.

    ``rannacher_steps`` counts the half-length fully implicit sub-steps at
    the start of the backward march; it must be even so the march realigns
    with the regular time levels.
    """

    n_s: int = 500
    n_t: int = 500
    s_max: float = 3.0
    theta: float = 0.5
    rannacher_steps: int = 4

    def __post_init__(self):
        if self.n_s < 16 or self.n_t < 16:
            raise ParameterError("n_s and n_t must both be at least 16")
        if not self.s_max > 0:
            raise ParameterError(f"s_max must be > 0, got {self.s_max}")
        if not 0.0 <= self.theta <= 1.0:
            raise ParameterError(f"theta must lie in [0, 1], got {self.theta}")
        if self.rannacher_steps < 0 or self.rannacher_steps % 2:
            raise ParameterError("rannacher_steps must be even and >= 0")
        if self.rannacher_steps // 2 >= self.n_t:
            raise ParameterError("rannacher_steps covers the whole march")

    @property
    def s_axis(self) -> np.ndarray:
        return np.linspace(0.0, self.s_max, self.n_s + 1)

    def t_axis(self, maturity: float) -> np.ndarray:
        return np.linspace(0.0, maturity, self.n_t + 1)


def default_grid(strike: float, spot: float = 1.0, n: int = 500) -> GridSpec:
    """Default grid: ``n x n`` with the upper bound at three times the larger
    of strike and spot, wide enough to hold the lognormal mass for vols up to
    about 0.5."""
    return GridSpec(n_s=n, n_t=n, s_max=3.0 * max(strike, spot))


@dataclass(frozen=True)
class PdeProblem:
    """One pricing problem: payoff, exercise style, rate and variance source.

    ``variance`` is either a flat local variance (float) or a
    :class:`LocalVarianceGrid` aligned with the solver grid (interior price
    nodes by full time levels).
    """

    kind: str
    style: str
    strike: float
    rate: float
    variance: float | LocalVarianceGrid
    maturity: float = 1.0

    def __post_init__(self):
        if self.kind not in ("put", "call"):
            raise ParameterError(f"kind must be 'put' or 'call', got {self.kind!r}")
        if self.style not in ("american", "european"):
            raise ParameterError(
                f"style must be 'american' or 'european', got {self.style!r}"
            )
        if not self.strike > 0:
            raise ParameterError(f"strike must be > 0, got {self.strike}")
        if not self.maturity > 0:
            raise ParameterError(f"maturity must be > 0, got {self.maturity}")
        if not math.isfinite(self.rate):
            raise ParameterError(f"rate must be finite, got {self.rate}")
        if isinstance(self.variance, (int, float)):
            if not 0.0 <= float(self.variance) or not math.isfinite(float(self.variance)):
                raise ParameterError("flat variance must be finite and >= 0")
        elif not isinstance(self.variance, LocalVarianceGrid):
            raise ParameterError("variance must be a float or a LocalVarianceGrid")

    def payoff(self, s) -> np.ndarray:
        s = as_float_array(s, "s")
        if self.kind == "put":
            return np.maximum(self.strike - s, 0.0)
        return np.maximum(s - self.strike, 0.0)


@dataclass
class PdeSolution:
    """Backward-march result plus the valuation extracted at the spot.

    ``values[k]`` is the option value on the price axis at time ``t_values[k]``
    (calendar time, ``t=0`` today). ``exercise_boundary[k]`` is the largest
    price whose early-exercise constraint binds at that level, NaN where no
    node binds (and at the expiry level, where nothing is solved).
    """

    problem: PdeProblem
    grid: GridSpec
    spot: float
    s_values: np.ndarray
    t_values: np.ndarray
    values: np.ndarray
    exercise_boundary: np.ndarray
    value: float = field(init=False)
    delta: float = field(init=False)
    gamma: float = field(init=False)
    theta: float = field(init=False)

    def __post_init__(self):
        self.value, self.delta, self.gamma, self.theta = greeks_at(self, self.spot)


class _VarianceSource:
    """Resolves the local variance on interior nodes at an arbitrary time.

    Grid sources must align with the solver axes; rows at the half-length
    startup sub-steps are interpolated linearly in time between the two
    enclosing full levels.
    """

    def __init__(self, problem: PdeProblem, grid: GridSpec):
        self._interior = grid.s_axis[1:-1]
        self._t_axis = grid.t_axis(problem.maturity)
        source = problem.variance
        if isinstance(source, LocalVarianceGrid):
            if source.s_values.shape != self._interior.shape or not np.allclose(
                source.s_values, self._interior, rtol=1e-9, atol=1e-12
            ):
                raise ParameterError(
                    "variance grid price axis must match the interior solver nodes"
                )
            if source.t_values.shape != self._t_axis.shape or not np.allclose(
                source.t_values, self._t_axis, rtol=1e-9, atol=1e-12
            ):
                raise ParameterError(
                    "variance grid time axis must match the solver time levels"
                )
            self._table = source.values
        else:
            self._table = None
            self._flat = np.full(self._interior.size, float(source))

    def row(self, t: float) -> np.ndarray:
        if self._table is None:
            return self._flat
        t_axis = self._t_axis
        j = int(np.searchsorted(t_axis, t))
        if j < t_axis.size and abs(t_axis[j] - t) <= 1e-9 * max(1.0, abs(t)):
            return self._table[:, j]
        lo = j - 1
        weight = (t - t_axis[lo]) / (t_axis[j] - t_axis[lo])
        return (1.0 - weight) * self._table[:, lo] + weight * self._table[:, j]


def _boundary_values(problem: PdeProblem, grid: GridSpec, t: float) -> tuple[float, float]:
    discounted = problem.strike * math.exp(-problem.rate * (problem.maturity - t))
    if problem.kind == "put":
        # American: immediate exercise dominates at S=0, so the full strike.
        left = problem.strike if problem.style == "american" else discounted
        return left, 0.0
    return 0.0, grid.s_max - discounted


def build_operator(problem: PdeProblem, grid: GridSpec, t: float,
                   variance_row: np.ndarray | None = None):
    """Discrete Black-Scholes operator at time ``t`` on the interior nodes.

    Returns ``(lower, diag, upper, (left_bc, right_bc))`` where the bands hold
    the true central-difference couplings of each interior row, including the
    couplings into the boundary nodes, and the pair carries the Dirichlet
    values at this time. Applying the operator to a constant vector yields
    ``-rate`` on every interior row.
    """
    s_int = grid.s_axis[1:-1]
    h = grid.s_axis[1] - grid.s_axis[0]
    if variance_row is None:
        variance_row = _VarianceSource(problem, grid).row(t)
    diffusion = 0.5 * variance_row * s_int**2 / h**2
    drift = problem.rate * s_int / (2.0 * h)
    lower = diffusion - drift
    upper = diffusion + drift
    diag = -2.0 * diffusion - problem.rate
    return lower, diag, upper, _boundary_values(problem, grid, t)


def _assemble_step(v_old, op_old, op_new, dt: float, theta: float):
    """Banded system ``M x = rhs`` for the next (earlier) time level.

    ``M = I - theta*dt*L_new`` on the interior; the explicit side applies
    ``L_old`` to the known level including its stored boundary values, and the
    implicit couplings into the new boundary values move to the right-hand
    side.
    """
    lower_o, diag_o, upper_o, _ = op_old
    lower_n, diag_n, upper_n, (left_bc, right_bc) = op_new

    v_int = v_old[1:-1]
    rhs = v_int.copy()
    if theta < 1.0:
        explicit = diag_o * v_int + lower_o * v_old[:-2] + upper_o * v_old[2:]
        rhs += (1.0 - theta) * dt * explicit
    rhs[0] += theta * dt * lower_n[0] * left_bc
    rhs[-1] += theta * dt * upper_n[-1] * right_bc

    m_sub = -theta * dt * lower_n
    m_sub[0] = 0.0
    m_diag = 1.0 - theta * dt * diag_n
    m_sup = -theta * dt * upper_n
    m_sup[-1] = 0.0
    return m_sub, m_diag, m_sup, rhs


def _solve_banded_system(m_sub, m_diag, m_sup, rhs) -> np.ndarray:
    ab = np.zeros((3, m_diag.size))
    ab[0, 1:] = m_sup[:-1]
    ab[1] = m_diag
    ab[2, :-1] = m_sub[1:]
    return solve_banded((1, 1), ab, rhs, check_finite=False)


def step(v_old, op_old, op_new, dt: float, theta: float) -> np.ndarray:
    """One unconstrained theta-scheme step; returns the full next level.

    ``v_old`` is the known level including boundary nodes; the result carries
    the new Dirichlet boundary values. With a zero operator on both levels the
    interior passes through unchanged.
    """
    v_old = as_float_array(v_old, "v_old")
    m_sub, m_diag, m_sup, rhs = _assemble_step(v_old, op_old, op_new, dt, theta)
    interior = _solve_banded_system(m_sub, m_diag, m_sup, rhs)
    left_bc, right_bc = op_new[3]
    return np.concatenate(([left_bc], interior, [right_bc]))


def _complementarity_violation(m_sub, m_diag, m_sup, rhs, payoff, x) -> np.ndarray:
    """Per-node violation of the complementarity conditions at a candidate x.

    Free nodes must satisfy ``M x = rhs``; constrained nodes (x at the
    payoff) must satisfy ``M x >= rhs``.
    """
    mx = m_diag * x
    mx[1:] += m_sub[1:] * x[:-1]
    mx[:-1] += m_sup[:-1] * x[1:]
    residual = mx - rhs
    binding = x <= payoff
    return np.where(binding, np.maximum(-residual, 0.0), np.abs(residual))


def psor_project(
    m_sub,
    m_diag,
    m_sup,
    rhs,
    payoff,
    start=None,
    *,
    omega: float = PSOR_OMEGA,
    tol: float = PSOR_TOL,
    max_iter: int = PSOR_MAX_ITER,
):
    """Projected SOR solve of ``M x = rhs`` subject to ``x >= payoff``.

    Each sweep relaxes the Gauss-Seidel update with factor ``omega`` and
    projects onto the constraint, so the result satisfies ``x >= payoff``
    exactly; convergence is declared when the max-norm of the projected
    residual (plain residual on free nodes, negative-part residual on
    constrained nodes) drops below ``tol``. Returns ``(x, sweeps)``.

    When ``start`` is None the iteration is seeded with the projected
    unconstrained solve, which starts with the correct values on almost the
    whole free region and leaves only the mismatch near the exercise boundary
    to the sweeps.
    """
    if not 0.0 < omega < 2.0:
        raise ParameterError(f"omega must lie in (0, 2), got {omega}")
    n = m_diag.size
    if start is None:
        start = np.maximum(_solve_banded_system(m_sub, m_diag, m_sup, rhs), payoff)
    # plain-list inner loop: the sweep is sequential by definition of SOR and
    # list indexing is markedly faster than ndarray scalar access here
    a = [0.0] + list(m_sub)
    inv_d = [0.0] + [1.0 / v for v in m_diag]
    c = [0.0] + list(m_sup)
    b = [0.0] + list(rhs)
    phi = [0.0] + list(payoff)
    x = [0.0] + [max(v, p) for v, p in zip(start, payoff)] + [0.0]

    for sweep in range(1, max_iter + 1):
        for i in range(1, n + 1):
            gauss = (b[i] - a[i] * x[i - 1] - c[i] * x[i + 1]) * inv_d[i]
            candidate = x[i] + omega * (gauss - x[i])
            x[i] = candidate if candidate > phi[i] else phi[i]
        arr = np.array(x[1:-1])
        violation = _complementarity_violation(m_sub, m_diag, m_sup, rhs, payoff, arr)
        if violation.max() < tol:
            return arr, sweep
    raise ConvergenceError(
        f"PSOR did not reach tolerance {tol:g} within {max_iter} sweeps"
    )


def _march_plan(grid: GridSpec, maturity: float):
    """Sequence of (t_from, t_to, dt, theta, landing_level) backward steps."""
    n_t = grid.n_t
    dt = maturity / n_t
    half = dt / 2.0
    replaced = grid.rannacher_steps // 2
    plan = []
    for j in range(grid.rannacher_steps):
        t_from = maturity - j * half
        t_to = maturity - (j + 1) * half
        land = n_t - (j + 1) // 2 if (j + 1) % 2 == 0 else None
        plan.append((t_from, t_to, half, 1.0, land))
    t_axis = grid.t_axis(maturity)
    for k in range(n_t - replaced - 1, -1, -1):
        plan.append((t_axis[k + 1], t_axis[k], dt, grid.theta, k))
    return plan


def solve(problem: PdeProblem, grid: GridSpec, spot: float = 1.0) -> PdeSolution:
    """Price by marching the theta scheme backward from the terminal payoff.

    European steps solve the banded system directly; American steps run PSOR
    against the payoff constraint. The solution records every full time
    level, the exercise boundary per level and the valuation (value, delta,
    gamma, theta) extracted at ``spot``.
    """
    if grid.s_max <= problem.strike:
        raise ParameterError("grid.s_max must exceed the strike")
    s_axis = grid.s_axis
    t_axis = grid.t_axis(problem.maturity)
    variance = _VarianceSource(problem, grid)
    payoff_full = problem.payoff(s_axis)
    payoff_int = payoff_full[1:-1]
    american = problem.style == "american"

    values = np.empty((grid.n_t + 1, grid.n_s + 1))
    values[-1] = payoff_full
    boundary = np.full(grid.n_t + 1, np.nan)

    v = payoff_full.copy()
    plan = _march_plan(grid, problem.maturity)
    op_old = build_operator(problem, grid, plan[0][0], variance.row(plan[0][0]))
    for t_from, t_to, dt, theta, land in plan:
        op_new = build_operator(problem, grid, t_to, variance.row(t_to))
        m_sub, m_diag, m_sup, rhs = _assemble_step(v, op_old, op_new, dt, theta)
        if american:
            interior, _ = psor_project(m_sub, m_diag, m_sup, rhs, payoff_int)
        else:
            interior = _solve_banded_system(m_sub, m_diag, m_sup, rhs)
        left_bc, right_bc = op_new[3]
        v = np.concatenate(([left_bc], interior, [right_bc]))
        if land is not None:
            values[land] = v
            if american:
                mx = m_diag * interior
                mx[1:] += m_sub[1:] * interior[:-1]
                mx[:-1] += m_sup[:-1] * interior[1:]
                binding = (mx - rhs) > BINDING_RESIDUAL_FACTOR * PSOR_TOL
                if binding.any():
                    boundary[land] = s_axis[1:-1][binding].max()
        op_old = op_new

    return PdeSolution(
        problem=problem,
        grid=grid,
        spot=spot,
        s_values=s_axis,
        t_values=t_axis,
        values=values,
        exercise_boundary=boundary,
    )


def greeks_at(solution: PdeSolution, spot: float) -> tuple[float, float, float, float]:
    """Extract (value, delta, gamma, theta) at a spot inside the grid.

    Delta and gamma come from central differences at the two nodes bracketing
    the spot, combined by linear interpolation; theta is the forward
    difference between the first two time levels, per calendar time.
    """
    s = solution.s_values
    h = s[1] - s[0]
    if not s[1] <= spot <= s[-2]:
        raise ValueError(
            f"spot {spot!r} lies outside the grid interior [{s[1]:g}, {s[-2]:g}]"
        )
    i = min(int(np.searchsorted(s, spot, side="right")) - 1, s.size - 3)
    weight = (spot - s[i]) / h

    def interp(level: np.ndarray) -> tuple[float, float, float]:
        vals = []
        for j in (i, i + 1):
            v = level[j]
            d = (level[j + 1] - level[j - 1]) / (2.0 * h)
            g = (level[j + 1] - 2.0 * level[j] + level[j - 1]) / h**2
            vals.append((v, d, g))
        (v0, d0, g0), (v1, d1, g1) = vals
        return (
            (1.0 - weight) * v0 + weight * v1,
            (1.0 - weight) * d0 + weight * d1,
            (1.0 - weight) * g0 + weight * g1,
        )

    value, delta, gamma = interp(solution.values[0])
    value_next = interp(solution.values[1])[0]
    dt = solution.t_values[1] - solution.t_values[0]
    theta = (value_next - value) / dt
    return value, delta, gamma, theta
