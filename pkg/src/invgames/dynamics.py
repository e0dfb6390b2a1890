"""Discrete-time multi-player vehicle dynamics.

The global game state stacks one four-dimensional block per player. The
default model is a kinematic unicycle (position, heading, speed) driven by
yaw rate and longitudinal acceleration; a planar double integrator
(position, velocity, acceleration inputs) is available for linear-quadratic
reference problems. All updates are explicit Euler and players are
dynamically decoupled, so every Jacobian is block diagonal per player.

Headings are stored unwrapped; angle wrapping happens only in the
observation residual, which keeps these maps smooth for the solvers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

UNICYCLE = "unicycle"
DOUBLE_INTEGRATOR = "double-integrator"
MODELS = (UNICYCLE, DOUBLE_INTEGRATOR)

PLAYER_STATE_DIM = 4
PLAYER_INPUT_DIM = 2


class ConfigurationError(ValueError):
    """Shapes, model names, or scenario identifiers that do not line up."""


class UnicycleState(NamedTuple):
    """Single-player unicycle state (positions in m, heading in rad, speed in m/s)."""

    px: float
    py: float
    psi: float
    v: float


class PlayerInput(NamedTuple):
    """Single-player input: yaw rate (rad/s) and longitudinal acceleration (m/s^2)."""

    omega: float
    a: float


def _check_model(model):
    if model not in MODELS:
        raise ConfigurationError(f"unknown dynamics model {model!r}")


def _split(state, inputs):
    state = np.asarray(state, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if state.ndim != 1 or state.size == 0 or state.size % PLAYER_STATE_DIM != 0:
        raise ConfigurationError(f"global state must be a flat stack of 4-blocks, got shape {state.shape}")
    n_players = state.size // PLAYER_STATE_DIM
    if inputs.shape != (n_players * PLAYER_INPUT_DIM,):
        raise ConfigurationError(
            f"inputs must have shape ({n_players * PLAYER_INPUT_DIM},), got {inputs.shape}"
        )
    return state.reshape(n_players, PLAYER_STATE_DIM), inputs.reshape(n_players, PLAYER_INPUT_DIM)


def step(state, inputs, dt, model=UNICYCLE):
    """Advance the global state one step under all players' inputs."""
    _check_model(model)
    xb, ub = _split(state, inputs)
    out = np.empty_like(xb)
    if model == UNICYCLE:
        px, py, psi, v = xb.T
        omega, a = ub.T
        out[:, 0] = px + dt * v * np.cos(psi)
        out[:, 1] = py + dt * v * np.sin(psi)
        out[:, 2] = psi + dt * omega
        out[:, 3] = v + dt * a
    else:
        out[:, :2] = xb[:, :2] + dt * xb[:, 2:]
        out[:, 2:] = xb[:, 2:] + dt * ub
    return out.reshape(-1)


def jacobians(state, inputs, dt, model=UNICYCLE):
    """Jacobians (df/dx, df/du) of :func:`step`, block diagonal per player."""
    _check_model(model)
    xb, _ = _split(state, inputs)
    n_players = xb.shape[0]
    n = n_players * PLAYER_STATE_DIM
    A = np.zeros((n, n))
    B = np.zeros((n, n_players * PLAYER_INPUT_DIM))
    for i in range(n_players):
        r = i * PLAYER_STATE_DIM
        c = i * PLAYER_INPUT_DIM
        Ai = A[r : r + 4, r : r + 4]
        np.fill_diagonal(Ai, 1.0)
        if model == UNICYCLE:
            _, _, psi, v = xb[i]
            Ai[0, 2] = -dt * v * np.sin(psi)
            Ai[0, 3] = dt * np.cos(psi)
            Ai[1, 2] = dt * v * np.cos(psi)
            Ai[1, 3] = dt * np.sin(psi)
            B[r + 2, c] = dt
            B[r + 3, c + 1] = dt
        else:
            Ai[0, 2] = dt
            Ai[1, 3] = dt
            B[r + 2, c] = dt
            B[r + 3, c + 1] = dt
    return A, B


def costate_hessian(state, inputs, dt, costate, model=UNICYCLE):
    """d/dx of (df/dx)^T w for a fixed vector w.

    This is the dynamics curvature term that appears in the Jacobian of the
    stacked first-order optimality system. Only the unicycle heading/speed
    coupling contributes; the double integrator is linear.
    """
    _check_model(model)
    xb, _ = _split(state, inputs)
    w = np.asarray(costate, dtype=float)
    n = xb.size
    H = np.zeros((n, n))
    if model == DOUBLE_INTEGRATOR:
        return H
    for i in range(xb.shape[0]):
        r = i * PLAYER_STATE_DIM
        _, _, psi, v = xb[i]
        wx, wy = w[r], w[r + 1]
        c, s = np.cos(psi), np.sin(psi)
        H[r + 2, r + 2] = -dt * v * (wx * c + wy * s)
        cross = dt * (-wx * s + wy * c)
        H[r + 2, r + 3] = cross
        H[r + 3, r + 2] = cross
    return H


@dataclass(frozen=True, eq=False)
class GameDefinition:
    """Game skeleton: player count, horizon, step size, model, start state.

    Scenario constants that parameterize costs (goal positions, reference
    lanes and speeds) live in the cost basis set; ``metadata`` only records
    provenance so scenarios can be serialized and reproduced.
    """

    n_players: int
    horizon: int
    dt: float
    initial_state: np.ndarray
    model: str = UNICYCLE
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_players < 1:
            raise ConfigurationError("need at least one player")
        if self.horizon < 2:
            raise ConfigurationError("horizon must be at least 2 steps")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        _check_model(self.model)
        x1 = np.array(self.initial_state, dtype=float)
        if x1.shape != (self.state_dim,):
            raise ConfigurationError(
                f"initial state must have shape ({self.state_dim},), got {x1.shape}"
            )
        if not np.all(np.isfinite(x1)):
            raise ConfigurationError("initial state must be finite")
        x1.setflags(write=False)
        object.__setattr__(self, "initial_state", x1)

    @property
    def state_dim(self):
        return self.n_players * PLAYER_STATE_DIM

    @property
    def input_dim(self):
        return self.n_players * PLAYER_INPUT_DIM

    def zero_inputs(self):
        return np.zeros((self.horizon, self.input_dim))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States (T, n), per-step joint inputs (T, 2N), optional costates (N, T-1, n).

    ``feasible`` asserts that the dynamics residual is below 1e-6 in max
    norm; it is set by producers (rollouts hold it by construction, solver
    outputs after checking).
    """

    states: np.ndarray
    inputs: np.ndarray
    costates: np.ndarray | None = None
    feasible: bool = False

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        inputs = np.asarray(self.inputs, dtype=float)
        if states.ndim != 2 or states.shape[1] % PLAYER_STATE_DIM != 0:
            raise ConfigurationError(f"states must be (T, 4N), got {states.shape}")
        n_players = states.shape[1] // PLAYER_STATE_DIM
        if inputs.shape != (states.shape[0], n_players * PLAYER_INPUT_DIM):
            raise ConfigurationError(
                f"inputs must be ({states.shape[0]}, {2 * n_players}), got {inputs.shape}"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)
        if self.costates is not None:
            lam = np.asarray(self.costates, dtype=float)
            expect = (n_players, states.shape[0] - 1, states.shape[1])
            if lam.shape != expect:
                raise ConfigurationError(f"costates must be {expect}, got {lam.shape}")
            object.__setattr__(self, "costates", lam)

    @property
    def horizon(self):
        return self.states.shape[0]

    @property
    def n_players(self):
        return self.states.shape[1] // PLAYER_STATE_DIM

    @property
    def state_dim(self):
        return self.states.shape[1]

    def positions(self, player):
        c = player * PLAYER_STATE_DIM
        return self.states[:, c : c + 2]

    def with_costates(self, costates):
        return Trajectory(self.states, self.inputs, costates, self.feasible)


def rollout(x1, inputs, dt, model=UNICYCLE):
    """Integrate inputs forward from x1; the result is feasible by construction.

    The input sequence has length T; the final input does not influence any
    state and is carried along for cost bookkeeping.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2:
        raise ConfigurationError("inputs must be a (T, 2N) array")
    horizon = inputs.shape[0]
    x1 = np.asarray(x1, dtype=float)
    states = np.empty((horizon, x1.size))
    states[0] = x1
    for t in range(horizon - 1):
        states[t + 1] = step(states[t], inputs[t], dt, model)
    return Trajectory(states, inputs, feasible=True)


def dynamics_residual(traj, dt, model=UNICYCLE):
    """Stacked defect x_{t+1} - f(x_t, u_t), one n-block per transition."""
    horizon, n = traj.states.shape
    out = np.empty((horizon - 1) * n)
    for t in range(horizon - 1):
        out[t * n : (t + 1) * n] = traj.states[t + 1] - step(
            traj.states[t], traj.inputs[t], dt, model
        )
    return out


def residual_norm(traj, dt, model=UNICYCLE):
    return float(np.max(np.abs(dynamics_residual(traj, dt, model))))
