"""Entropic optimal transport scaling solvers and the progressive-mass controller.

The balanced solver alternates the classic diagonal-scaling updates. The
partial solver appends a zero-cost slack column that absorbs the untransported
1 - rho mass, pins the slack marginal with a huge relaxation weight, and runs
the generalized scaling updates

    a <- alpha / (Q b),    b <- (beta / (Q^T a)) ** f,    f = lambda / (lambda + eps),

elementwise. Iterations run in the linear domain for speed; scaling vectors
are absorbed into log potentials whenever an entry leaves [1e-30, 1e30], with
an exact log-domain sweep as a fallback, so small epsilon stays stable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp, xlogy

from .errors import ConfigError

_ABSORB_HI = 1e30
_ABSORB_LO = 1e-30


@dataclass(frozen=True)
class SolverConfig:
    """Scaling-solver knobs shared by the balanced and partial solvers."""

    epsilon: float = 0.05
    lambda_kl: float = 10.0
    iota: float = 1e9
    max_iters: int = 30000
    marginal_tol: float = 1e-6
    b_tol: float = 1e-9

    def __post_init__(self):
        if self.epsilon <= 0 or self.lambda_kl <= 0 or self.marginal_tol <= 0:
            raise ConfigError("epsilon, lambda_kl and marginal_tol must be positive")
        if self.iota < 1e6 * self.lambda_kl:
            raise ConfigError("iota must be at least 1e6 * lambda_kl")
        if self.max_iters < 1 or self.b_tol <= 0:
            raise ConfigError("max_iters must be >= 1 and b_tol > 0")


@dataclass
class BalancedPlan:
    """Result of a balanced solve: N x M coupling plus scaling diagnostics."""

    values: np.ndarray
    converged: bool
    iterations: int
    log_a: np.ndarray
    log_b: np.ndarray


@dataclass
class TransportPlan:
    """Partial-OT coupling including the slack column.

    ``values`` is N x (M+1); the final column holds the untransported mass.
    ``log_a``/``log_b`` are the final log scaling vectors, reusable as a warm
    start and sufficient to reconstruct the plan from the kernel.
    """

    values: np.ndarray
    rho: float
    converged: bool
    iterations: int
    log_a: np.ndarray
    log_b: np.ndarray
    warning: str | None = None

    @property
    def transported(self) -> np.ndarray:
        """The N x M block excluding the slack column."""
        return self.values[:, :-1]

    @property
    def slack(self) -> np.ndarray:
        return self.values[:, -1]

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)


def cosine_cost(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """C = 1 - cosine similarity between feature rows and prototype rows.

    Row norms are floored at 1e-12; the result is clipped into [0, 2] to
    absorb floating-point excursions.
    """
    f = np.asarray(features, dtype=np.float64)
    p = np.asarray(prototypes, dtype=np.float64)
    if f.ndim != 2 or p.ndim != 2 or f.shape[1] != p.shape[1]:
        raise ValueError(f"dimension mismatch: features {f.shape} vs prototypes {p.shape}")
    fn = np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    pn = np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
    cost = 1.0 - (f / fn) @ (p / pn).T
    return np.clip(cost, 0.0, 2.0)


def generalized_kl(x: np.ndarray, y: np.ndarray) -> float:
    """Sum of x*log(x/y) - x + y; equals the plain KL when totals match."""
    x = np.asarray(x, dtype=np.float64)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), x.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(x > 0, x / np.where(y > 0, y, 1.0), 1.0)
        terms = xlogy(x, ratio) - x + y
        terms = np.where((x > 0) & (y == 0), np.inf, terms)
    return float(terms.sum())


def partial_objective(transported: np.ndarray, cost: np.ndarray, rho: float, lambda_kl: float) -> float:
    """Objective of the direct partial problem evaluated at an N x M block."""
    t = np.asarray(transported, dtype=np.float64)
    m = t.shape[1]
    target = np.full(m, rho / m)
    return float((t * cost).sum()) + lambda_kl * generalized_kl(t.sum(axis=0), target)


_ACCEL_EVERY = 40


def _scaling_loop(log_kernel, log_alpha, log_beta, f, max_iters, b_tol, warm=None):
    """Generalized scaling fixed-point loop.

    Returns (log_a, log_b, iterations, converged). Iterations run in the
    linear domain; scaling vectors are absorbed into log offsets when they
    leave [1e-30, 1e30], with an exact log-domain sweep as the fallback.

    Two refinements keep the lambda >> epsilon regime practical:
    - an Aitken extrapolation on log b periodically jumps along the dominant
      geometric mode (contraction ~ lambda / (lambda + epsilon) per sweep);
      every jump is validated by a trial sweep and reverted unless it landed
      strictly closer to the fixed point, so it can only save iterations;
    - convergence is the l-inf change of b dropping below b_tol, with a
      plan-stationarity escape for the degenerate case where an active
      nonnegativity constraint sends dual potentials drifting forever while
      the coupling itself has stopped moving.
    """
    n, m = log_kernel.shape
    zero_cols = np.isneginf(log_beta)
    alpha = np.exp(log_alpha)
    if warm is None:
        au = np.zeros(n)
        av = np.where(zero_cols, -np.inf, 0.0)
    else:
        au = np.array(warm[0], dtype=np.float64, copy=True)
        av = np.array(warm[1], dtype=np.float64, copy=True)
        av[zero_cols] = -np.inf
    u = np.ones(n)
    v = np.ones(m)

    def rebuild():
        with np.errstate(over="ignore"):
            return np.exp(log_kernel + au[:, None] + av[None, :])

    def materialized():
        with np.errstate(divide="ignore", invalid="ignore"):
            log_a = au + np.log(u)
            plan = np.exp(log_a[:, None] + log_kernel + log_b_prev[None, :])
        return np.nan_to_num(plan, nan=0.0, posinf=0.0)

    kernel = rebuild()
    log_b_prev = av.copy()
    log_b_prev2 = None
    log_b_prev3 = None
    checkpoint = None
    delta = np.inf
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        if iters % _ACCEL_EVERY == 0 and np.isfinite(delta):
            plan = materialized()
            if checkpoint is not None:
                per_sweep = float(np.abs(plan - checkpoint).max()) / _ACCEL_EVERY
                scale = max(float(plan.max()), 1e-300)
                if per_sweep < b_tol * scale:
                    converged = True
                    break
            checkpoint = plan
        if iters % _ACCEL_EVERY == 0 and log_b_prev3 is not None and np.isfinite(delta):
            jumped = _aitken_jump((log_b_prev, log_b_prev2, log_b_prev3), zero_cols)
            if jumped is not None:
                # trial sweep from the extrapolated point; commit only when it
                # lands strictly closer to the fixed point than the plain path
                with np.errstate(over="ignore"):
                    kernel_j = np.exp(log_kernel + au[:, None] + jumped[None, :])
                kv = kernel_j @ np.ones(m)
                if np.all(kv > 0) and np.all(np.isfinite(kv)):
                    u_j = alpha / kv
                    w = kernel_j.T @ u_j
                    with np.errstate(divide="ignore", invalid="ignore"):
                        log_b_trial = f * (log_beta - np.log(w) + jumped)
                    log_b_trial[zero_cols] = -np.inf
                    with np.errstate(invalid="ignore"):
                        diff = np.abs(log_b_trial - jumped)
                    finite = np.isfinite(diff)
                    trial_delta = float(diff[finite].max()) if finite.any() else 0.0
                    if np.all(np.isfinite(log_b_trial[~zero_cols])) and trial_delta < 0.5 * delta:
                        u, av, kernel = u_j, jumped, kernel_j
                        with np.errstate(invalid="ignore"):
                            v = np.where(zero_cols, 0.0, np.exp(log_b_trial - av))
                        delta = trial_delta
                        log_b_prev3 = None  # history restarts after a jump
                        log_b_prev2 = jumped
                        log_b_prev = log_b_trial
                        if delta < b_tol:
                            converged = True
                            break
                        continue
        kv = kernel @ v
        stable = bool(np.all(kv > 0) and np.all(np.isfinite(kv)))
        if stable:
            u = alpha / kv
            w = kernel.T @ u
            with np.errstate(divide="ignore", invalid="ignore"):
                log_b = f * (log_beta - np.log(w) + av)
            log_b[zero_cols] = -np.inf
            stable = bool(np.all(np.isfinite(log_b[~zero_cols])))
        if not stable:
            # exact log-domain sweep, then restart the linear iteration from it
            log_a = log_alpha - logsumexp(log_kernel + log_b_prev[None, :], axis=1)
            log_y = logsumexp(log_kernel + log_a[:, None], axis=0)
            log_b = f * (log_beta - log_y)
            log_b[zero_cols] = -np.inf
            au, av = log_a, log_b.copy()
            u = np.ones(n)
            v = np.ones(m)
            kernel = rebuild()
        else:
            with np.errstate(invalid="ignore"):
                v = np.where(zero_cols, 0.0, np.exp(log_b - av))
            extremes = False
            for vec in (u, v[~zero_cols]):
                pos = vec[vec > 0]
                if pos.size and (pos.max() > _ABSORB_HI or pos.min() < _ABSORB_LO):
                    extremes = True
                    break
            if extremes:
                with np.errstate(divide="ignore"):
                    au = au + np.log(u)
                av = log_b.copy()
                u = np.ones(n)
                v = np.ones(m)
                kernel = rebuild()
        with np.errstate(invalid="ignore"):
            diff = np.abs(log_b - log_b_prev)
        finite = np.isfinite(diff)
        delta = float(diff[finite].max()) if finite.any() else 0.0
        log_b_prev3 = log_b_prev2
        log_b_prev2 = log_b_prev
        log_b_prev = log_b
        if delta < b_tol:
            converged = True
            break
    with np.errstate(divide="ignore"):
        log_u = np.log(u)
    return au + log_u, log_b_prev, iters, converged


def _aitken_jump(history, zero_cols):
    """Propose an extrapolation along the dominant geometric mode of log b.

    The per-sweep contraction ratio is fit by least squares over the last two
    increments; the caller validates the proposal with a trial sweep and only
    commits when it lands strictly closer to the fixed point.
    """
    curr_b, prev_b, prev2_b = history
    live = ~zero_cols
    d1 = prev_b[live] - prev2_b[live]
    d2 = curr_b[live] - prev_b[live]
    if not (np.all(np.isfinite(d1)) and np.all(np.isfinite(d2))):
        return None
    denom = float(d1 @ d1)
    if denom == 0:
        return None
    ratio = float(d2 @ d1) / denom
    if not 1e-6 < abs(ratio) < 0.99999:
        return None
    step = d2 * (ratio / (1.0 - ratio))
    if float(np.abs(step).max()) > 200.0:
        return None
    out = curr_b.copy()
    out[live] = curr_b[live] + step
    return out


def _materialize(log_kernel, log_a, log_b):
    with np.errstate(invalid="ignore"):
        plan = np.exp(log_a[:, None] + log_kernel + log_b[None, :])
    return np.nan_to_num(plan, nan=0.0, posinf=0.0)


def sinkhorn_balanced(
    cost: np.ndarray, mu: np.ndarray, nu: np.ndarray, config: SolverConfig
) -> BalancedPlan:
    """Entropic OT with both marginals enforced exactly.

    Returns the coupling diag(a) exp(-C/eps) diag(b); ``converged`` is set
    only when the scaling fixed point is reached and both marginals sit
    within ``config.marginal_tol``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if cost.shape != (mu.size, nu.size):
        raise ValueError(f"cost shape {cost.shape} incompatible with marginals {(mu.size, nu.size)}")
    for name, marg in (("mu", mu), ("nu", nu)):
        if np.any(marg < 0) or abs(marg.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} must be a probability vector (sum 1 within 1e-9)")
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
        log_nu = np.log(nu)
    log_a, log_b, iters, fixed_point = _scaling_loop(
        -cost / config.epsilon, log_mu, log_nu, np.ones(nu.size), config.max_iters, config.b_tol
    )
    values = _materialize(-cost / config.epsilon, log_a, log_b)
    row_err = float(np.abs(values.sum(axis=1) - mu).max())
    col_err = float(np.abs(values.sum(axis=0) - nu).max())
    converged = fixed_point and row_err < config.marginal_tol and col_err < config.marginal_tol
    return BalancedPlan(values, converged, iters, log_a, log_b)


def solve_partial(
    cost: np.ndarray,
    rho: float,
    config: SolverConfig,
    warm_start: tuple[np.ndarray, np.ndarray] | None = None,
) -> TransportPlan:
    """Transport a fraction ``rho`` of a uniform source onto the target columns.

    Implements the slack-column form: the cost gains a zero column, the
    column prior is [rho/M, ..., rho/M, 1-rho], and the slack column's KL
    weight is the large ``iota`` so its mass is pinned to 1 - rho. Row sums
    are held at 1/N. The returned plan keeps all M+1 columns.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must be in (0, 1], got {rho}")
    n, m = cost.shape
    ext_cost = np.concatenate([cost, np.zeros((n, 1))], axis=1)
    beta = np.concatenate([np.full(m, rho / m), [1.0 - rho]])
    lam = np.concatenate([np.full(m, config.lambda_kl), [config.iota]])
    f = lam / (lam + config.epsilon)
    with np.errstate(divide="ignore"):
        log_beta = np.log(beta)
    log_kernel = -ext_cost / config.epsilon
    log_alpha = np.full(n, -np.log(n))
    log_a, log_b, iters, fixed_point = _scaling_loop(
        log_kernel, log_alpha, log_beta, f, config.max_iters, config.b_tol, warm=warm_start
    )
    values = _materialize(log_kernel, log_a, log_b)
    row_err = float(np.abs(values.sum(axis=1) - 1.0 / n).max())
    mass_err = abs(float(values[:, :m].sum()) - rho)
    slack_err = abs(float(values[:, m].sum()) - (1.0 - rho))
    converged = (
        fixed_point
        and row_err < config.marginal_tol
        and mass_err < config.marginal_tol
        and slack_err < config.marginal_tol
    )
    return TransportPlan(values, rho, converged, iters, log_a, log_b)


def pot_scan(
    cost: np.ndarray,
    rho0: float,
    stride: float,
    stop: Callable[[TransportPlan], bool],
    config: SolverConfig,
) -> TransportPlan:
    """Progressively raise the transported fraction until the stop probe fires.

    Solves at rho = rho0, rho0 + stride, ... capped at 1 (warm-starting each
    step from the previous scalings) and returns the last plan before the
    probe fired, or the rho = 1 plan if it never fires. A probe firing on the
    very first step returns that plan with a warning set.
    """
    if not 0.0 < rho0 < 1.0:
        raise ConfigError(f"rho0 must be in (0, 1), got {rho0}")
    if stride <= 0:
        raise ConfigError("stride must be positive")
    previous: TransportPlan | None = None
    rho = rho0
    while True:
        rho = min(round(rho, 12), 1.0)
        warm = (previous.log_a, previous.log_b) if previous is not None else None
        plan = solve_partial(cost, rho, config, warm_start=warm)
        if stop(plan):
            if previous is None:
                plan.warning = "stop probe fired at the initial transport fraction"
                return plan
            return previous
        previous = plan
        if rho >= 1.0:
            return plan
        rho += stride
