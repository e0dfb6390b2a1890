"""Equality-constrained smooth minimization of least-squares type.

The solver runs an augmented Lagrangian outer loop with projected
Gauss-Newton/Levenberg-Marquardt inner solves. Simple variable bounds are
handled by projection inside the inner iteration; the constraint penalty
supplies Gauss-Newton curvature, and problems may optionally expose extra
curvature of the objective (a residual decomposition or a Hessian callback)
to speed up the inner model. Everything is deterministic: no randomness, no
wall-clock dependence, so repeated solves from the same data are
bitwise identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
DIVERGED = "diverged"


@dataclass(frozen=True)
class SolverConfig:
    tol_feas: float = 1e-6
    tol_opt: float = 1e-6
    max_outer: int = 50
    max_inner: int = 200
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    # grow the penalty when feasibility improved by less than this factor
    feas_slowdown: float = 4.0
    penalty_max: float = 1e12
    nu_init: float = 1e-4
    nu_max: float = 1e15
    objective_floor: float = -1e18


@dataclass(frozen=True, eq=False)
class NlpProblem:
    """Smooth objective with equality constraints and simple bounds.

    ``objective`` maps z to (value, gradient); ``constraints`` maps z to
    (residual vector, Jacobian) and may be None for bound-only problems.
    Jacobians may be dense arrays or scipy sparse matrices.

    ``residuals`` and ``objective_hessian`` are optional curvature hooks:
    when ``residuals`` is given the objective must equal the squared norm of
    the residual vector (the solver then evaluates the objective through
    it), and ``objective_hessian`` supplies an explicit Hessian. Neither is
    required; without them the inner solve falls back to a damped model.
    """

    n: int
    objective: Callable
    constraints: Optional[Callable] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    residuals: Optional[Callable] = None
    objective_hessian: Optional[Callable] = None

    def bounds(self):
        lb = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        ub = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        return lb, ub


@dataclass(frozen=True, eq=False)
class NlpSolution:
    z: np.ndarray
    multipliers: np.ndarray
    feasibility: float
    stationarity: float
    status: str
    iterations: int
    objective: float
    message: str = ""
    offending_iterate: Optional[np.ndarray] = None


class _Diverged(Exception):
    def __init__(self, offending):
        super().__init__("non-finite callback value")
        self.offending = offending


def _is_sparse(mat):
    return sp.issparse(mat)


def _eval_objective(problem, z):
    """Returns (value, gradient, residual_pair_or_None)."""
    if problem.residuals is not None:
        r, jac = problem.residuals(z)
        r = np.asarray(r, dtype=float)
        value = float(r @ r)
        grad = 2.0 * (jac.T @ r)
        grad = np.asarray(grad).reshape(-1)
        return value, grad, (r, jac)
    value, grad = problem.objective(z)
    return float(value), np.asarray(grad, dtype=float).reshape(-1), None


def _eval_constraints(problem, z):
    if problem.constraints is None:
        return np.zeros(0), None
    c, jac = problem.constraints(z)
    return np.asarray(c, dtype=float).reshape(-1), jac


def _objective_curvature(problem, z, res_pair):
    if res_pair is not None:
        _, jac = res_pair
        return 2.0 * (jac.T @ jac)
    if problem.objective_hessian is not None:
        return problem.objective_hessian(z)
    return None


def _combine_model(h_obj, c_jac, rho, n):
    """Gauss-Newton model Hessian: objective curvature + rho * Jc^T Jc."""
    parts = []
    if h_obj is not None:
        parts.append(h_obj)
    if c_jac is not None and c_jac.shape[0] > 0:
        parts.append(rho * (c_jac.T @ c_jac))
    if not parts:
        return None, False
    sparse = any(_is_sparse(p) for p in parts)
    if sparse:
        total = sp.csc_array((n, n))
        for p in parts:
            total = total + (sp.csc_array(p) if not _is_sparse(p) else sp.csc_array(p))
        return total, True
    total = np.zeros((n, n))
    for p in parts:
        total = total + p
    return total, False


def _solve_model(h_base, sparse, nu, grad, n):
    """Solve (H + nu I) step = -grad; returns None on factorization trouble."""
    try:
        if h_base is None:
            return -grad / nu
        if sparse:
            hnu = (h_base + nu * sp.identity(n, format="csc")).tocsc()
            step = spla.splu(hnu).solve(-grad)
        else:
            hnu = h_base + nu * np.eye(n)
            step = np.linalg.solve(hnu, -grad)
    except (RuntimeError, np.linalg.LinAlgError, ValueError):
        return None
    if not np.all(np.isfinite(step)):
        return None
    return step


def _inner_minimize(problem, z, mult, rho, tol, config, lb, ub):
    """Minimize the augmented Lagrangian over the box; returns (z, iters, status)."""

    def evaluate(point):
        f, g, res_pair = _eval_objective(problem, point)
        c, c_jac = _eval_constraints(problem, point)
        shifted = mult + rho * c
        phi = f + float(mult @ c) + 0.5 * rho * float(c @ c)
        gphi = g if c_jac is None else g + np.asarray(c_jac.T @ shifted).reshape(-1)
        return phi, gphi, c_jac, res_pair

    phi, gphi, c_jac, res_pair = evaluate(z)
    if not np.isfinite(phi) or not np.all(np.isfinite(gphi)):
        raise _Diverged(z)

    nu = config.nu_init
    nonfinite_streak = 0
    iters = 0
    for _ in range(config.max_inner):
        pg = z - np.clip(z - gphi, lb, ub)
        if np.max(np.abs(pg), initial=0.0) <= tol:
            return z, iters, "stationary"
        h_obj = _objective_curvature(problem, z, res_pair)
        h_base, sparse = _combine_model(h_obj, c_jac, rho, problem.n)
        iters += 1

        accepted = False
        while not accepted:
            step = _solve_model(h_base, sparse, nu, gphi, problem.n)
            if step is None:
                nu *= 10.0
                if nu > config.nu_max:
                    return z, iters, "stalled"
                continue
            halvings = 0
            while True:
                z_trial = np.clip(z + step, lb, ub)
                try:
                    phi_t, gphi_t, c_jac_t, res_pair_t = evaluate(z_trial)
                except FloatingPointError:
                    phi_t = np.nan
                if np.isfinite(phi_t) and np.all(np.isfinite(gphi_t)):
                    nonfinite_streak = 0
                    break
                # non-finite value: abort the line step and halve it
                nonfinite_streak += 1
                if nonfinite_streak >= 3:
                    raise _Diverged(z_trial)
                step = 0.5 * step
                halvings += 1
                if halvings > 60:
                    raise _Diverged(z_trial)
            if phi_t < config.objective_floor:
                raise _Diverged(z_trial)

            delta = z_trial - z
            if h_base is None:
                curv = nu * float(delta @ delta)
            else:
                curv = float(delta @ (h_base @ delta)) + nu * float(delta @ delta)
            predicted = -(float(gphi @ delta) + 0.5 * curv)
            actual = phi - phi_t
            if actual > 0.0 and np.any(delta):
                ratio = actual / predicted if predicted > 0 else 0.5
                z, phi, gphi, c_jac, res_pair = z_trial, phi_t, gphi_t, c_jac_t, res_pair_t
                if ratio > 0.75:
                    nu = max(nu / 3.0, 1e-12)
                elif ratio < 0.25:
                    nu = min(nu * 2.0, config.nu_max)
                accepted = True
            else:
                nu *= 10.0
                if nu > config.nu_max:
                    return z, iters, "stalled"
    return z, iters, "max-inner"


def _projected_norm(z, grad, lb, ub):
    pg = z - np.clip(z - grad, lb, ub)
    return float(np.max(np.abs(pg), initial=0.0))


def solve(problem, init, config=None):
    """Solve the NLP from ``init``; deterministic for fixed inputs.

    ``converged`` requires both the constraint residual and the projected
    Lagrangian gradient to be within tolerance at the final iterate. If a
    callback goes non-finite three line steps in a row the solve aborts with
    status ``diverged`` and reports the offending iterate.
    """
    config = config or SolverConfig()
    z = np.asarray(init, dtype=float).copy()
    if z.shape != (problem.n,):
        raise ValueError(f"init must have shape ({problem.n},), got {z.shape}")
    lb, ub = problem.bounds()
    z = np.clip(z, lb, ub)

    c0, _ = _eval_constraints(problem, z)
    mult = np.zeros(c0.size)
    rho = config.penalty_init
    feas_prev = np.inf
    total_inner = 0
    tol_inner = max(config.tol_opt, 1e-2) if c0.size else config.tol_opt

    best = None  # (feas, objective, z, mult)

    def finish(status, message="", offending=None):
        f, g, _ = _eval_objective(problem, z)
        c, c_jac = _eval_constraints(problem, z)
        feas = float(np.max(np.abs(c), initial=0.0))
        grad_l = g if c_jac is None else g + np.asarray(c_jac.T @ mult).reshape(-1)
        stat = _projected_norm(z, grad_l, lb, ub)
        return NlpSolution(
            z=z,
            multipliers=mult,
            feasibility=feas,
            stationarity=stat,
            status=status,
            iterations=total_inner,
            objective=f,
            message=message,
            offending_iterate=offending,
        )

    max_outer = config.max_outer if c0.size else 1
    for outer in range(max_outer):
        try:
            z, inner_iters, inner_status = _inner_minimize(
                problem, z, mult, rho, tol_inner, config, lb, ub
            )
        except _Diverged as err:
            total_inner += 1
            if best is not None:
                z = best[2]
                mult = best[3]
            return finish(DIVERGED, "non-finite callback value", err.offending)
        total_inner += inner_iters

        f, g, _ = _eval_objective(problem, z)
        c, c_jac = _eval_constraints(problem, z)
        feas = float(np.max(np.abs(c), initial=0.0))
        mult = mult + rho * c
        grad_l = g if c_jac is None else g + np.asarray(c_jac.T @ mult).reshape(-1)
        stat = _projected_norm(z, grad_l, lb, ub)

        if best is None or (feas, f) < (best[0], best[1]):
            best = (feas, f, z.copy(), mult.copy())

        if feas <= config.tol_feas and stat <= config.tol_opt:
            return finish(CONVERGED)
        if c0.size:
            if feas > feas_prev / config.feas_slowdown:
                rho = min(rho * config.penalty_growth, config.penalty_max)
            feas_prev = min(feas_prev, feas)
            tol_inner = max(config.tol_opt, min(1e-2, 0.1 * feas))
    return finish(MAX_ITERATIONS, f"stopped after {max_outer} outer iterations")


def check_gradient(callback, point, step=1e-6):
    """Max relative error between an analytic derivative and central differences.

    ``callback`` maps a vector to either (value, gradient) or
    (vector, Jacobian); sparse Jacobians are densified for the comparison.
    The difference step is scaled by the coordinate magnitude.
    """
    z = np.asarray(point, dtype=float)
    out, analytic = callback(z)
    if _is_sparse(analytic):
        analytic = analytic.toarray()
    analytic = np.atleast_1d(np.asarray(analytic, dtype=float))
    scalar = np.ndim(out) == 0
    if scalar:
        analytic = analytic.reshape(-1)
        fd = np.empty_like(analytic)
    else:
        out = np.asarray(out, dtype=float)
        analytic = analytic.reshape(out.size, z.size)
        fd = np.empty_like(analytic)
    for j in range(z.size):
        h = step * max(1.0, abs(z[j]))
        zp = z.copy()
        zm = z.copy()
        zp[j] += h
        zm[j] -= h
        fp = callback(zp)[0]
        fm = callback(zm)[0]
        if scalar:
            fd[j] = (fp - fm) / (2.0 * h)
        else:
            fd[:, j] = (np.asarray(fp, float) - np.asarray(fm, float)) / (2.0 * h)
    denom = np.maximum(1.0, np.abs(analytic) + np.abs(fd))
    return float(np.max(np.abs(analytic - fd) / denom))
