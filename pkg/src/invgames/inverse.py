"""Estimating player objectives from noisy, partial observations.

Two estimators share a dynamics-feasible pre-solve of the observed
trajectory. The joint method then maximizes observation likelihood over
cost weights, states, inputs, and costates simultaneously, with the
players' stacked first-order optimality conditions imposed as equality
constraints. The baseline fixes the pre-solved trajectory and only fits
weights and costates by minimizing the norm of the optimality residual
along it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import dynamics, forward,nlpsolver, objectives, observation
from .dynamics import ConfigurationError, Trajectory

JOINT = "joint"
BASELINE = "baseline"

PRESOLVE_DIVERGED = "presolve-diverged"
STAGE2_DIVERGED = "stage2-diverged"


class EstimationError(RuntimeError):
    """Solver divergence during estimation; carries the best iterate found."""

    def __init__(self, message, best_trajectory=None):
        super().__init__(message)
        self.best_trajectory = best_trajectory


@dataclass(frozen=True)
class InverseConfig:
    """Parameter constraints and solver settings for the estimators.

    The running parameterization requires per-player weights on the unit
    simplex with a positive floor on control-effort weights.
    """

    normalize: bool = True
    epsilon: float = 1e-3
    presolve: bool = True
    solver: nlpsolver.SolverConfig = field(default_factory=nlpsolver.SolverConfig)
    theta_init: str = "uniform"
    lambda_init: str = "least-squares"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be nonnegative")
        if self.theta_init != "uniform" or self.lambda_init != "least-squares":
            raise ConfigurationError("unknown initialization strategy")


@dataclass(frozen=True, eq=False)
class EstimationResult:
    method: str
    theta: tuple | None
    trajectory: Trajectory | None
    nll: float | None
    kkt_residual: float | None
    status: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self):
        return self.status == nlpsolver.CONVERGED

    @property
    def failure_kind(self):
        if self.status in (PRESOLVE_DIVERGED, STAGE2_DIVERGED):
            return self.status
        return None

    def parameters(self):
        if self.theta is None:
            return None
        return objectives.CostParameters(self.theta)


def _initial_guess(obs, game):
    """Observation-seeded initial trajectory: fill states, inverse-dynamics inputs."""
    horizon, n = game.horizon, game.state_dim
    states = np.zeros((horizon, n))
    model = obs.model
    idx = model.state_indices()
    states[:, idx] = obs.y
    if game.model == dynamics.UNICYCLE:
        for i in range(game.n_players):
            c = 4 * i
            states[:, c + 2] = np.unwrap(states[:, c + 2])
            if model.kind == observation.PARTIAL:
                # speeds are unobserved: estimate from position increments
                pos = states[:, c : c + 2]
                steps = np.linalg.norm(np.diff(pos, axis=0), axis=1) / game.dt
                states[:-1, c + 3] = steps
                states[-1, c + 3] = steps[-1] if steps.size else 0.0
        inputs = np.zeros((horizon, game.input_dim))
        for i in range(game.n_players):
            c = 4 * i
            dpsi = np.diff(states[:, c + 2]) / game.dt
            dv = np.diff(states[:, c + 3]) / game.dt
            inputs[:-1, 2 * i] = dpsi
            inputs[:-1, 2 * i + 1] = dv
    else:
        inputs = np.zeros((horizon, game.input_dim))
        for i in range(game.n_players):
            c = 4 * i
            dv = np.diff(states[:, c + 2 : c + 4], axis=0) / game.dt
            inputs[:-1, 2 * i : 2 * i + 2] = dv
    return states, inputs


def _trajectory_problem_parts(obs, game):
    """Shared residual/constraint callbacks over z = (states, inputs)."""
    horizon, n = game.horizon, game.state_dim
    m = game.input_dim
    nx = horizon * n
    nz = nx + horizon * m
    scale = 1.0 / np.sqrt(horizon)
    sel = observation.selection_matrix(obs.model, horizon, n)
    jac_obs = sp.hstack([-scale * sel, sp.csr_array((sel.shape[0], horizon * m))]).tocsr()

    def unpack(z):
        states = z[:nx].reshape(horizon, n)
        inputs = z[nx:].reshape(horizon, m)
        return states, inputs

    def residuals(z):
        states, _ = unpack(z)
        return scale * observation.observation_residuals(obs, states), jac_obs

    def constraints(z):
        states, inputs = unpack(z)
        traj = Trajectory(states, inputs)
        res = dynamics.dynamics_residual(traj, game.dt, game.model)
        rows, cols, vals = [], [], []
        for t in range(horizon - 1):
            A, B = dynamics.jacobians(states[t], inputs[t], game.dt, game.model)
            r0 = t * n
            rows.append(np.repeat(np.arange(r0, r0 + n), n))
            cols.append(np.tile(np.arange(t * n, (t + 1) * n), n))
            vals.append((-A).reshape(-1))
            rows.append(np.arange(r0, r0 + n))
            cols.append(np.arange((t + 1) * n, (t + 2) * n))
            vals.append(np.ones(n))
            rows.append(np.repeat(np.arange(r0, r0 + n), m))
            cols.append(np.tile(nx + t * m + np.arange(m), n))
            vals.append((-B).reshape(-1))
        jac = sp.csr_array(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=((horizon - 1) * n, nz),
        )
        return res, jac

    def objective(z):
        r, jac = residuals(z)
        return float(r @ r), 2.0 * np.asarray(jac.T @ r).reshape(-1)

    return nz, unpack, objective, residuals, constraints


def presolve(obs, game, config=None):
    """Dynamics-feasible trajectory that maximizes the observation likelihood.

    This is the relaxed fit used to initialize the joint estimator and as
    the fixed trajectory of the baseline.
    """
    config = config or InverseConfig()
    nz, unpack, objective, residuals, constraints = _trajectory_problem_parts(obs, game)
    problem = nlpsolver.NlpProblem(
        n=nz, objective=objective, constraints=constraints, residuals=residuals
    )
    states0, inputs0 = _initial_guess(obs, game)
    z0 = np.concatenate([states0.reshape(-1), inputs0.reshape(-1)])
    sol = nlpsolver.solve(problem, z0, config.solver)
    states, inputs = unpack(sol.z)
    feasible = sol.feasibility <= 1e-6
    traj = Trajectory(states, inputs, feasible=feasible)
    if sol.status == nlpsolver.DIVERGED:
        raise EstimationError("presolve diverged", best_trajectory=traj)
    return traj


def _theta_bounds(bases, config):
    lower = []
    for i in range(bases.n_players):
        lb = np.zeros(bases.dimension(i))
        lb[bases.effort_mask(i)] = config.epsilon
        lower.append(lb)
    return np.concatenate(lower)


def _split_theta(z_theta, bases):
    out = []
    at = 0
    for i in range(bases.n_players):
        k = bases.dimension(i)
        out.append(z_theta[at : at + k].copy())
        at += k
    return out


def _normalize_output(theta_list, lam, bases, config):
    """Exact simplex projection of the weights; costates rescaled to match.

    The optimality residual is jointly homogeneous in one player's weights
    and costates, so the pure rescaling part leaves it unchanged.
    """
    out_theta, out_lam = [], lam.copy()
    for i, w in enumerate(theta_list):
        lb = np.zeros(w.size)
        lb[bases.effort_mask(i)] = config.epsilon
        w = np.maximum(w, lb)
        factor = 1.0
        if config.normalize:
            for _ in range(50):
                s = w.sum()
                if abs(s - 1.0) <= 1e-12:
                    break
                w = w / s
                factor /= s
                w = np.maximum(w, lb)
        out_theta.append(w)
        out_lam[i] *= factor
    return tuple(out_theta), out_lam


def _simplex_rows(bases, nz, offset):
    rows, cols, vals = [], [], []
    at = offset
    for i in range(bases.n_players):
        k = bases.dimension(i)
        rows.append(np.full(k, i))
        cols.append(np.arange(at, at + k))
        vals.append(np.ones(k))
        at += k
    return sp.csr_array(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(bases.n_players, nz),
    )


def solve_inverse_joint(obs, game, bases, config=None):
    """Maximum-likelihood estimation of weights, trajectory, and costates.

    Stage 1 pre-solves the trajectory against dynamics only; stage 2
    activates the equilibrium constraints and optimizes everything jointly.
    """
    config = config or InverseConfig()
    if not config.normalize:
        raise ConfigurationError("the simplex normalization is required for this parameterization")
    horizon, n = game.horizon, game.state_dim
    m = game.input_dim
    n_lam = game.n_players * (horizon - 1) * n
    k_total = sum(bases.dimension(i) for i in range(game.n_players))
    nx = horizon * n
    nu = horizon * m
    nz = k_total + nx + nu + n_lam

    try:
        pre = presolve(obs, game, config)
    except EstimationError as err:
        return EstimationResult(
            method=JOINT,
            theta=None,
            trajectory=err.best_trajectory,
            nll=None,
            kkt_residual=None,
            status=PRESOLVE_DIVERGED,
            diagnostics={"error": str(err)},
        )
    pre_nll = observation.neg_log_likelihood(obs, pre)

    theta0 = np.concatenate(
        [np.full(bases.dimension(i), 1.0 / bases.dimension(i)) for i in range(game.n_players)]
    )
    params0 = objectives.CostParameters(_split_theta(theta0, bases))
    lam0 = forward.fit_costates(game, bases, pre, params0)
    z0 = np.concatenate(
        [theta0, pre.states.reshape(-1), pre.inputs.reshape(-1), lam0.reshape(-1)]
    )

    scale = 1.0 / np.sqrt(horizon)
    sel = observation.selection_matrix(obs.model, horizon, n)
    jac_obs = sp.hstack(
        [
            sp.csr_array((sel.shape[0], k_total)),
            -scale * sel,
            sp.csr_array((sel.shape[0], nu + n_lam)),
        ]
    ).tocsr()

    def unpack(z):
        theta = _split_theta(z[:k_total], bases)
        states = z[k_total : k_total + nx].reshape(horizon, n)
        inputs = z[k_total + nx : k_total + nx + nu].reshape(horizon, m)
        lam = z[k_total + nx + nu :].reshape(game.n_players, horizon - 1, n)
        return theta, states, inputs, lam

    def residuals(z):
        _, states, _, _ = unpack(z)
        return scale * observation.observation_residuals(obs, states), jac_obs

    def objective(z):
        r, jac = residuals(z)
        return float(r @ r), 2.0 * np.asarray(jac.T @ r).reshape(-1)

    simplex = _simplex_rows(bases, nz, 0)
    simplex_rhs = np.ones(game.n_players)

    def constraints(z):
        theta, states, inputs, lam = unpack(z)
        traj = Trajectory(states, inputs)
        params = objectives.CostParameters(
            tuple(np.maximum(w, 0.0) for w in theta)
        )
        sys_ = forward.assemble_kkt(game, bases, traj, params, lam)
        res = np.concatenate([sys_.residual, simplex @ z - simplex_rhs])
        jac_g = sp.hstack([sys_.jacobian_theta, sys_.jacobian]).tocsr()
        jac = sp.vstack([jac_g, simplex]).tocsr()
        return res, jac

    lower = np.concatenate([_theta_bounds(bases, config), np.full(nx + nu + n_lam, -np.inf)])
    problem = nlpsolver.NlpProblem(
        n=nz,
        objective=objective,
        constraints=constraints,
        lower=lower,
        residuals=residuals,
    )
    sol = nlpsolver.solve(problem, z0, config.solver)
    theta, states, inputs, lam = unpack(sol.z)
    status = sol.status
    if sol.status == nlpsolver.DIVERGED:
        status = STAGE2_DIVERGED
    theta, lam = _normalize_output(theta, lam, bases, config)
    params = objectives.CostParameters(theta, normalized=config.normalize)
    feasible = dynamics.residual_norm(Trajectory(states, inputs), game.dt, game.model) <= 1e-6
    traj = Trajectory(states, inputs, lam, feasible=feasible)
    kkt = float(np.max(np.abs(forward.kkt_residual(game, bases, traj, params, lam))))
    return EstimationResult(
        method=JOINT,
        theta=theta,
        trajectory=traj,
        nll=observation.neg_log_likelihood(obs, traj),
        kkt_residual=kkt,
        status=status,
        diagnostics={
            "iterations": sol.iterations,
            "presolve_nll": pre_nll,
            "stationarity": sol.stationarity,
            "feasibility": sol.feasibility,
        },
    )


def solve_inverse_baseline(obs, game, bases, config=None):
    """Optimality-residual fit along the pre-solved trajectory.

    With the trajectory held fixed the residual is linear in weights and
    costates, so the fit is a bound-constrained linear least-squares
    problem under the same simplex normalization as the joint method.
    """
    config = config or InverseConfig()
    horizon, n = game.horizon, game.state_dim
    k_total = sum(bases.dimension(i) for i in range(game.n_players))
    n_lam = game.n_players * (horizon - 1) * n
    nz = k_total + n_lam

    try:
        pre = presolve(obs, game, config)
    except EstimationError as err:
        return EstimationResult(
            method=BASELINE,
            theta=None,
            trajectory=err.best_trajectory,
            nll=None,
            kkt_residual=None,
            status=PRESOLVE_DIVERGED,
            diagnostics={"error": str(err)},
        )
    pre_nll = observation.neg_log_likelihood(obs, pre)

    # the residual is linear in (theta, lambda): precompute the pieces once
    zero_lam = np.zeros((game.n_players, horizon - 1, n))
    zero_params = objectives.CostParameters(
        tuple(np.zeros(bases.dimension(i)) for i in range(game.n_players))
    )
    sys0 = forward.assemble_kkt(game, bases, pre, zero_params, zero_lam)
    lam_cols0 = sys0.layout.lam_cols(0).start
    jac_lin = sp.hstack(
        [sys0.jacobian_theta, sp.csc_array(sys0.jacobian)[:, lam_cols0:]]
    ).tocsr()
    res0 = sys0.residual

    def residuals(z):
        return res0 + jac_lin @ z, jac_lin

    def objective(z):
        r, jac = residuals(z)
        return float(r @ r), 2.0 * np.asarray(jac.T @ r).reshape(-1)

    simplex = _simplex_rows(bases, nz, 0)
    simplex_rhs = np.ones(game.n_players)

    def constraints(z):
        return simplex @ z - simplex_rhs, simplex

    theta0 = np.concatenate(
        [np.full(bases.dimension(i), 1.0 / bases.dimension(i)) for i in range(game.n_players)]
    )
    params0 = objectives.CostParameters(_split_theta(theta0, bases))
    lam0 = forward.fit_costates(game, bases, pre, params0)
    z0 = np.concatenate([theta0, lam0.reshape(-1)])

    lower = np.concatenate([_theta_bounds(bases, config), np.full(n_lam, -np.inf)])
    problem = nlpsolver.NlpProblem(
        n=nz,
        objective=objective,
        constraints=constraints if config.normalize else None,
        lower=lower,
        residuals=residuals,
    )
    sol = nlpsolver.solve(problem, z0, config.solver)
    theta = _split_theta(sol.z[:k_total], bases)
    lam = sol.z[k_total:].reshape(game.n_players, horizon - 1, n)
    status = STAGE2_DIVERGED if sol.status == nlpsolver.DIVERGED else sol.status
    theta, lam = _normalize_output(theta, lam, bases, config)
    params = objectives.CostParameters(theta, normalized=config.normalize)
    traj = pre.with_costates(lam)
    kkt = float(np.max(np.abs(forward.kkt_residual(game, bases, traj, params, lam))))
    return EstimationResult(
        method=BASELINE,
        theta=theta,
        trajectory=traj,
        nll=observation.neg_log_likelihood(obs, traj),
        kkt_residual=kkt,
        status=status,
        diagnostics={
            "iterations": sol.iterations,
            "presolve_nll": pre_nll,
            "residual_objective": sol.objective,
        },
    )


def predict(theta, game, bases, hint=None):
    """Forward solve at estimated weights from the scenario's initial state.

    An ill-conditioned status marks an estimator failure for the metrics
    layer.
    """
    if isinstance(theta, objectives.CostParameters):
        params = theta
    else:
        params = objectives.CostParameters(tuple(theta))
    return forward.robust_forward_solve(game, bases, params, hint=hint)
