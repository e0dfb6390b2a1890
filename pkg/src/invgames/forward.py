"""Forward open-loop Nash games.

Stacks the players' first-order optimality conditions into one residual
system: for every player, stationarity of its Lagrangian with respect to
the shared states (t = 2..T) and its own inputs (t = 1..T), plus the
dynamics defects. Roots of this system are solved for either by a damped
Newton method on the full system or by iterated best response, where each
player's optimal-control problem is solved with the opponents' inputs
frozen.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import dynamics, nlpsolver, objectives
from .dynamics import PLAYER_INPUT_DIM, ConfigurationError, Trajectory

CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
ILL_CONDITIONED = "ill-conditioned"


@dataclass(frozen=True)
class KktLayout:
    """Row/column bookkeeping for the stacked optimality system."""

    n_players: int
    horizon: int
    state_dim: int
    input_dim: int

    @property
    def stat_x_size(self):
        return (self.horizon - 1) * self.state_dim

    @property
    def stat_u_size(self):
        return self.horizon * PLAYER_INPUT_DIM

    @property
    def player_rows(self):
        return self.stat_x_size + self.stat_u_size

    @property
    def n_rows(self):
        return self.n_players * self.player_rows + self.stat_x_size

    def stat_x_rows(self, player):
        start = player * self.player_rows
        return slice(start, start + self.stat_x_size)

    def stat_u_rows(self, player):
        start = player * self.player_rows + self.stat_x_size
        return slice(start, start + self.stat_u_size)

    @property
    def dynamics_rows(self):
        start = self.n_players * self.player_rows
        return slice(start, start + self.stat_x_size)

    # column layout: states, inputs, then one costate block per player
    @property
    def x_cols(self):
        return slice(0, self.horizon * self.state_dim)

    @property
    def u_cols(self):
        start = self.horizon * self.state_dim
        return slice(start, start + self.horizon * self.input_dim)

    def lam_cols(self, player):
        start = self.horizon * (self.state_dim + self.input_dim)
        start += player * self.stat_x_size
        return slice(start, start + self.stat_x_size)

    @property
    def n_cols(self):
        return self.horizon * (self.state_dim + self.input_dim) + self.n_players * self.stat_x_size


@dataclass(frozen=True, eq=False)
class KktSystem:
    """Residual, Jacobians, and the block index map of the stacked system."""

    residual: np.ndarray
    jacobian: sp.csr_array
    jacobian_theta: sp.csr_array
    layout: KktLayout
    clamped: bool

    @property
    def norm(self):
        return float(np.max(np.abs(self.residual)))

    def row_blocks(self):
        blocks = {}
        for i in range(self.layout.n_players):
            blocks[("stat_x", i)] = self.layout.stat_x_rows(i)
            blocks[("stat_u", i)] = self.layout.stat_u_rows(i)
        blocks["dynamics"] = self.layout.dynamics_rows
        return blocks


def _check_game(game, bases, traj, params):
    if traj.horizon != game.horizon or traj.state_dim != game.state_dim:
        raise ConfigurationError("trajectory does not match the game dimensions")
    if bases.n_players != game.n_players:
        raise ConfigurationError("basis set does not match the game")
    objectives_dims = [bases.dimension(i) for i in range(game.n_players)]
    for i, w in enumerate(params.weights):
        if w.size != objectives_dims[i]:
            raise ConfigurationError(f"player {i}: weight/basis dimension mismatch")


def _costates_or_zero(game, traj, costates):
    if costates is None:
        costates = traj.costates
    if costates is None:
        return np.zeros((game.n_players, game.horizon - 1, game.state_dim))
    return np.asarray(costates, dtype=float)


def _linearize(game, traj):
    horizon, n = traj.states.shape
    m = game.input_dim
    A = np.empty((horizon - 1, n, n))
    B = np.empty((horizon - 1, n, m))
    for t in range(horizon - 1):
        A[t], B[t] = dynamics.jacobians(traj.states[t], traj.inputs[t], game.dt, game.model)
    return A, B


def kkt_residual(game, bases, traj, params, costates=None):
    """Residual of the stacked optimality system without Jacobians."""
    _check_game(game, bases, traj, params)
    lam = _costates_or_zero(game, traj, costates)
    layout = KktLayout(game.n_players, game.horizon, game.state_dim, game.input_dim)
    horizon, n = traj.states.shape
    A, B = _linearize(game, traj)
    res = np.zeros(layout.n_rows)
    for i in range(game.n_players):
        grads = objectives.cost_gradients(traj, bases, params.weights[i], i)
        sx = layout.stat_x_rows(i).start
        for s in range(1, horizon):
            block = grads.state[s] + lam[i, s - 1]
            if s <= horizon - 2:
                block = block - A[s].T @ lam[i, s]
            res[sx + (s - 1) * n : sx + s * n] = block
        su = layout.stat_u_rows(i).start
        ci = i * PLAYER_INPUT_DIM
        for s in range(horizon):
            block = grads.input[s].copy()
            if s <= horizon - 2:
                block -= B[s][:, ci : ci + 2].T @ lam[i, s]
            res[su + 2 * s : su + 2 * s + 2] = block
    dyn0 = layout.dynamics_rows.start
    for t in range(horizon - 1):
        res[dyn0 + t * n : dyn0 + (t + 1) * n] = traj.states[t + 1] - dynamics.step(
            traj.states[t], traj.inputs[t], game.dt, game.model
        )
    return res


def assemble_kkt(game, bases, traj, params, costates=None):
    """Residual plus analytic Jacobians wrt (x, u, lambda) and wrt the weights."""
    _check_game(game, bases, traj, params)
    lam = _costates_or_zero(game, traj, costates)
    layout = KktLayout(game.n_players, game.horizon, game.state_dim, game.input_dim)
    horizon, n = traj.states.shape
    m = game.input_dim
    A, B = _linearize(game, traj)
    theta_offsets = np.cumsum([0] + [bases.dimension(i) for i in range(game.n_players)])

    res = np.zeros(layout.n_rows)
    rows, cols, vals = [], [], []
    trows, tcols, tvals = [], [], []
    clamped = False

    def add(r0, c0, block):
        nr, nc = block.shape
        rows.append(np.repeat(np.arange(r0, r0 + nr), nc))
        cols.append(np.tile(np.arange(c0, c0 + nc), nr))
        vals.append(np.asarray(block, dtype=float).reshape(-1))

    def add_theta(r0, c0, block):
        nr, nc = block.shape
        trows.append(np.repeat(np.arange(r0, r0 + nr), nc))
        tcols.append(np.tile(np.arange(c0, c0 + nc), nr))
        tvals.append(np.asarray(block, dtype=float).reshape(-1))

    eye_n = np.eye(n)
    x0_col = layout.x_cols.start
    u0_col = layout.u_cols.start

    for i in range(game.n_players):
        w = params.weights[i]
        grads = objectives.cost_gradients(traj, bases, w, i)
        per = objectives.basis_gradients(traj, bases, i)
        hxx, huu = objectives.cost_hessians(traj, bases, w, i)
        clamped = clamped or grads.clamped
        lam_col = layout.lam_cols(i).start
        t_col = theta_offsets[i]

        sx = layout.stat_x_rows(i).start
        for s in range(1, horizon):
            r0 = sx + (s - 1) * n
            block = grads.state[s] + lam[i, s - 1]
            dx = hxx[s].copy()
            if s <= horizon - 2:
                block = block - A[s].T @ lam[i, s]
                dx -= dynamics.costate_hessian(
                    traj.states[s], traj.inputs[s], game.dt, lam[i, s], game.model
                )
                add(r0, lam_col + s * n, -A[s].T)
            res[r0 : r0 + n] = block
            add(r0, x0_col + s * n, dx)
            add(r0, lam_col + (s - 1) * n, eye_n)
            add_theta(r0, t_col, per.state[:, s, :].T)

        su = layout.stat_u_rows(i).start
        ci = i * PLAYER_INPUT_DIM
        for s in range(horizon):
            r0 = su + 2 * s
            block = per.input[:, s, :].T @ w
            add(r0, u0_col + s * m + ci, huu[s])
            if s <= horizon - 2:
                Bi = B[s][:, ci : ci + 2]
                block = block - Bi.T @ lam[i, s]
                add(r0, lam_col + s * n, -Bi.T)
            res[r0 : r0 + 2] = block
            add_theta(r0, t_col, per.input[:, s, :].T)

    dyn0 = layout.dynamics_rows.start
    for t in range(horizon - 1):
        r0 = dyn0 + t * n
        res[r0 : r0 + n] = traj.states[t + 1] - dynamics.step(
            traj.states[t], traj.inputs[t], game.dt, game.model
        )
        add(r0, x0_col + t * n, -A[t])
        add(r0, x0_col + (t + 1) * n, eye_n)
        add(r0, u0_col + t * m, -B[t])

    jac = sp.csr_array(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(layout.n_rows, layout.n_cols),
    )
    jac_theta = sp.csr_array(
        (np.concatenate(tvals), (np.concatenate(trows), np.concatenate(tcols))),
        shape=(layout.n_rows, int(theta_offsets[-1])),
    )
    return KktSystem(res, jac, jac_theta, layout, clamped)


@dataclass(frozen=True, eq=False)
class ForwardSolution:
    trajectory: Trajectory
    residual_norm: float
    status: str
    iterations: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self):
        return self.status == CONVERGED


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-9
    accept_tol: float = 1e-6
    max_iter: int = 200
    armijo: float = 1e-4
    mu_init: float = 1e-8
    mu_max: float = 1e-2
    alpha_min: float = 2.0**-30


def zero_input_trajectory(game):
    return dynamics.rollout(game.initial_state, game.zero_inputs(), game.dt, game.model)


def _player_target(bases, player):
    for basis in bases.bases[player]:
        if isinstance(basis, objectives.GoalBasis):
            return ("goal", basis.goal)
        if isinstance(basis, objectives.StateDeviationBasis):
            return ("reference", basis.reference)
    return (None, None)


def straight_to_target_trajectory(game, bases):
    """Deterministic proportional steering toward each player's goal or reference.

    Crude by design: this exists only as a solver initialization.
    """
    horizon = game.horizon
    inputs = np.zeros((horizon, game.input_dim))
    state = np.asarray(game.initial_state, dtype=float).copy()
    states = np.empty((horizon, game.state_dim))
    states[0] = state
    for t in range(horizon - 1):
        u_t = np.zeros(game.input_dim)
        for i in range(game.n_players):
            kind, target = _player_target(bases, i)
            xb = state[4 * i : 4 * i + 4]
            if kind is None:
                continue
            if game.model == dynamics.UNICYCLE:
                if kind == "goal":
                    delta = target - xb[:2]
                    dist = float(np.hypot(*delta))
                    psi_d = np.arctan2(delta[1], delta[0]) if dist > 1e-9 else xb[2]
                    remaining = max((horizon - 1 - t) * game.dt, game.dt)
                    v_d = min(dist / (0.7 * remaining), 2.0)
                else:
                    psi_d = np.arctan(0.8 * (target[1] - xb[1]))
                    v_d = target[3]
                from .observation import wrap_angle

                omega = np.clip(wrap_angle(psi_d - xb[2]) / game.dt, -2.0, 2.0)
                a = np.clip((v_d - xb[3]) / game.dt, -1.0, 1.0)
                u_t[2 * i : 2 * i + 2] = (omega, a)
            else:
                goal = target[:2] if kind == "reference" else target
                acc = 1.0 * (goal - xb[:2]) - 1.2 * xb[2:]
                u_t[2 * i : 2 * i + 2] = np.clip(acc, -2.0, 2.0)
        inputs[t] = u_t
        state = dynamics.step(state, u_t, game.dt, game.model)
        states[t + 1] = state
    return Trajectory(states, inputs, feasible=True)


def _pack_newton(traj, lam, n):
    return np.concatenate([traj.states[1:].reshape(-1), traj.inputs.reshape(-1), lam.reshape(-1)])


def solve_olne_newton(game, bases, params, init=None, config=None):
    """Damped Newton on the stacked optimality system with x1 held fixed."""
    config = config or NewtonConfig()
    if init is None:
        init = zero_input_trajectory(game)
    horizon, n = game.horizon, game.state_dim
    m = game.input_dim
    states = init.states.copy()
    inputs = init.inputs.copy()
    lam = _costates_or_zero(game, init, None).copy()
    layout = KktLayout(game.n_players, horizon, n, m)
    free_cols = np.concatenate(
        [
            np.arange(n, horizon * n),
            np.arange(layout.u_cols.start, layout.u_cols.stop),
            np.arange(layout.lam_cols(0).start, layout.n_cols),
        ]
    )

    def unpack(z):
        xs = np.vstack([states[:1], z[: (horizon - 1) * n].reshape(horizon - 1, n)])
        us = z[(horizon - 1) * n : (horizon - 1) * n + horizon * m].reshape(horizon, m)
        lm = z[(horizon - 1) * n + horizon * m :].reshape(game.n_players, horizon - 1, n)
        return xs, us, lm

    z = np.concatenate([states[1:].reshape(-1), inputs.reshape(-1), lam.reshape(-1)])
    xs, us, lm = unpack(z)
    traj = Trajectory(xs, us)
    sys_ = assemble_kkt(game, bases, traj, params, lm)
    norm = sys_.norm
    best = (norm, z.copy())
    status = MAX_ITERATIONS
    iters = 0
    residual_sq = float(sys_.residual @ sys_.residual)

    for _ in range(config.max_iter):
        if norm <= config.tol:
            break
        jac = sp.csc_array(sys_.jacobian)[:, free_cols]
        g = sys_.residual

        def try_step(delta):
            nonlocal z, xs, us, lm, traj, sys_, norm, residual_sq
            if delta is None or not np.all(np.isfinite(delta)):
                return False
            alpha = 1.0
            while alpha >= config.alpha_min:
                z_t = z + alpha * delta
                xs_t, us_t, lm_t = unpack(z_t)
                traj_t = Trajectory(xs_t, us_t)
                res_t = kkt_residual(game, bases, traj_t, params, lm_t)
                sq_t = float(res_t @ res_t)
                if np.isfinite(sq_t) and sq_t <= (1.0 - 2.0 * config.armijo * alpha) * residual_sq:
                    z = z_t
                    xs, us, lm, traj = xs_t, us_t, lm_t, traj_t
                    sys_new = assemble_kkt(game, bases, traj, params, lm)
                    sys_loc = sys_new
                    norm_loc = sys_loc.norm
                    sys_ = sys_loc
                    norm = norm_loc
                    residual_sq = float(sys_.residual @ sys_.residual)
                    return True
                alpha *= 0.5
            return False

        stepped = False
        try:
            delta = spla.splu(sp.csc_matrix(jac)).solve(-g)
        except (RuntimeError, ValueError):
            delta = None
        if try_step(delta):
            stepped = True
        else:
            mu = config.mu_init
            gb = jac.T @ g
            jtj = (jac.T @ jac).tocsc()
            ident = sp.identity(jac.shape[1], format="csc")
            while mu <= config.mu_max:
                try:
                    delta = spla.splu(sp.csc_matrix(jtj + mu * ident)).solve(-gb)
                except (RuntimeError, ValueError):
                    delta = None
                if try_step(delta):
                    stepped = True
                    break
                mu *= 10.0
        iters += 1
        if not stepped:
            status = ILL_CONDITIONED
            break
        if norm < best[0]:
            best = (norm, z.copy())

    if norm > best[0]:
        z = best[1]
        xs, us, lm = unpack(z)
        traj = Trajectory(xs, us)
        norm = best[0]
    if norm <= config.accept_tol:
        status = CONVERGED
    feasible = dynamics.residual_norm(Trajectory(xs, us), game.dt, game.model) <= 1e-6
    out_traj = Trajectory(xs, us, lm, feasible=feasible)
    return ForwardSolution(out_traj, norm, status, iters, {"solver": "newton"})


def fit_costates(game, bases, traj, params):
    """Least-squares costates: minimize each player's stationarity residual.

    The stationarity blocks are linear in the costates, so this is one dense
    least-squares solve per player.
    """
    sys_ = assemble_kkt(game, bases, traj, params, np.zeros((game.n_players, game.horizon - 1, game.state_dim)))
    lam = np.empty((game.n_players, game.horizon - 1, game.state_dim))
    jac = sp.csc_array(sys_.jacobian)
    for i in range(game.n_players):
        rows = np.r_[
            np.arange(sys_.layout.stat_x_rows(i).start, sys_.layout.stat_x_rows(i).stop),
            np.arange(sys_.layout.stat_u_rows(i).start, sys_.layout.stat_u_rows(i).stop),
        ]
        cols = np.arange(sys_.layout.lam_cols(i).start, sys_.layout.lam_cols(i).stop)
        M = jac[:, cols].toarray()[rows]
        b = -sys_.residual[rows]
        sol, *_ = np.linalg.lstsq(M, b, rcond=None)
        lam[i] = sol.reshape(game.horizon - 1, game.state_dim)
    return lam


@dataclass(frozen=True)
class IbrConfig:
    tol_inputs: float = 1e-6
    max_sweeps: int = 100
    accept_tol: float = 1e-6
    nlp: nlpsolver.SolverConfig = field(
        default_factory=lambda: nlpsolver.SolverConfig(
            tol_feas=1e-9, tol_opt=1e-8, max_outer=40, max_inner=300
        )
    )


def _best_response_problem(game, bases, params, player, inputs_frozen):
    horizon, n = game.horizon, game.state_dim
    m = game.input_dim
    nz = (horizon - 1) * n + horizon * PLAYER_INPUT_DIM
    ci = player * PLAYER_INPUT_DIM
    x1 = game.initial_state

    def build(z):
        states = np.vstack([x1[None, :], z[: (horizon - 1) * n].reshape(horizon - 1, n)])
        inputs = inputs_frozen.copy()
        inputs[:, ci : ci + 2] = z[(horizon - 1) * n :].reshape(horizon, PLAYER_INPUT_DIM)
        return Trajectory(states, inputs)

    def objective(z):
        traj = build(z)
        value = objectives.total_cost(traj, bases, params.weights[player], player)
        grads = objectives.cost_gradients(traj, bases, params.weights[player], player)
        return value, np.concatenate([grads.state[1:].reshape(-1), grads.input.reshape(-1)])

    def objective_hessian(z):
        traj = build(z)
        hxx, huu = objectives.cost_hessians(traj, bases, params.weights[player], player)
        rows, cols, vals = [], [], []
        for s in range(1, horizon):
            base = (s - 1) * n
            r = np.repeat(np.arange(base, base + n), n)
            c = np.tile(np.arange(base, base + n), n)
            rows.append(r)
            cols.append(c)
            vals.append(hxx[s].reshape(-1))
        off = (horizon - 1) * n
        for s in range(horizon):
            base = off + 2 * s
            rows.append(np.array([base, base, base + 1, base + 1]))
            cols.append(np.array([base, base + 1, base, base + 1]))
            vals.append(huu[s].reshape(-1))
        return sp.csr_array(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nz, nz),
        )

    def constraints(z):
        traj = build(z)
        res = dynamics.dynamics_residual(traj, game.dt, game.model)
        rows, cols, vals = [], [], []
        eye = np.eye(n)
        for t in range(horizon - 1):
            A, B = dynamics.jacobians(traj.states[t], traj.inputs[t], game.dt, game.model)
            r0 = t * n
            if t >= 1:
                r = np.repeat(np.arange(r0, r0 + n), n)
                c = np.tile(np.arange((t - 1) * n, t * n), n)
                rows.append(r)
                cols.append(c)
                vals.append((-A).reshape(-1))
            rows.append(np.arange(r0, r0 + n))
            cols.append(np.arange(t * n, (t + 1) * n))
            vals.append(np.diag(eye))
            Bi = B[:, ci : ci + 2]
            r = np.repeat(np.arange(r0, r0 + n), 2)
            c = np.tile((horizon - 1) * n + 2 * t + np.arange(2), n)
            rows.append(r)
            cols.append(c)
            vals.append((-Bi).reshape(-1))
        jac = sp.csr_array(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=((horizon - 1) * n, nz),
        )
        return res, jac

    return nlpsolver.NlpProblem(
        n=nz,
        objective=objective,
        constraints=constraints,
        objective_hessian=objective_hessian,
    ), build


def solve_olne_ibr(game, bases, params, init=None, config=None):
    """Iterated best response: cycle players until joint inputs stop moving.

    The fixed point is certified by reassembling the stacked optimality
    residual with least-squares costates.
    """
    config = config or IbrConfig()
    if init is None:
        init = zero_input_trajectory(game)
    states = init.states.copy()
    inputs = init.inputs.copy()
    horizon, n = game.horizon, game.state_dim
    sweeps = 0
    fixed_point = False
    diverged = False
    for _ in range(config.max_sweeps):
        prev_inputs = inputs.copy()
        for i in range(game.n_players):
            problem, build = _best_response_problem(game, bases, params, i, inputs)
            z0 = np.concatenate(
                [states[1:].reshape(-1), inputs[:, 2 * i : 2 * i + 2].reshape(-1)]
            )
            sol = nlpsolver.solve(problem, z0, config.nlp)
            if sol.status == nlpsolver.DIVERGED:
                diverged = True
                break
            traj_i = build(sol.z)
            states = traj_i.states.copy()
            inputs = traj_i.inputs.copy()
        sweeps += 1
        if diverged:
            break
        if float(np.max(np.abs(inputs - prev_inputs))) <= config.tol_inputs:
            fixed_point = True
            break

    traj = Trajectory(states, inputs)
    lam = fit_costates(game, bases, traj, params)
    res = kkt_residual(game, bases, traj, params, lam)
    norm = float(np.max(np.abs(res)))
    feasible = dynamics.residual_norm(traj, game.dt, game.model) <= 1e-6
    traj = Trajectory(states, inputs, lam, feasible=feasible)
    status = CONVERGED if fixed_point and norm <= config.accept_tol and feasible else MAX_ITERATIONS
    return ForwardSolution(traj, norm, status, sweeps, {"solver": "ibr", "diverged": diverged})


def unilateral_deviation_check(game, bases, params, traj, player, direction):
    """Directional derivative of one player's cost along an own-input perturbation.

    Evaluated through the rollout map (states follow the dynamics), with the
    adjoint recursion supplying the exact derivative. Near-zero values
    certify first-order stationarity of the player's response.
    """
    direction = np.asarray(direction, dtype=float)
    if direction.shape != (game.horizon, PLAYER_INPUT_DIM):
        raise ConfigurationError("direction must be a (T, 2) own-input perturbation")
    grads = objectives.cost_gradients(traj, bases, params.weights[player], player)
    A, B = _linearize(game, traj)
    horizon = game.horizon
    ci = player * PLAYER_INPUT_DIM
    p = grads.state[horizon - 1].copy()
    total = float(grads.input[horizon - 1] @ direction[horizon - 1])
    for t in range(horizon - 2, -1, -1):
        dj_du = grads.input[t] + B[t][:, ci : ci + 2].T @ p
        total += float(dj_du @ direction[t])
        p = grads.state[t] + A[t].T @ p
    return total


def robust_forward_solve(game, bases, params, hint=None, newton_config=None, ibr_config=None):
    """Forward solve with deterministic fallbacks.

    Tries Newton and then iterated best response from up to three inits:
    the zero-input rollout, the straight-to-target heuristic, and a caller
    hint (e.g. an estimated trajectory). If every attempt fails the game is
    flagged ill-conditioned.
    """
    inits = [zero_input_trajectory(game), straight_to_target_trajectory(game, bases)]
    if hint is not None:
        inits.append(Trajectory(hint.states, hint.inputs))
    best = None
    attempts = 0
    for solver in ("newton", "ibr"):
        for init in inits:
            attempts += 1
            if solver == "newton":
                sol = solve_olne_newton(game, bases, params, init, newton_config)
            else:
                sol = solve_olne_ibr(game, bases, params, init, ibr_config)
            if sol.converged:
                return sol
            if best is None or sol.residual_norm < best.residual_norm:
                best = sol
    return ForwardSolution(
        best.trajectory,
        best.residual_norm,
        ILL_CONDITIONED,
        attempts,
        {"solver": "robust", "last": best.status},
    )
