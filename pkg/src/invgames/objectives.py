"""Cost-basis library and linear cost parameterization.

Each player's running cost is a nonnegatively weighted sum of fixed basis
functions of the global state and the player's own inputs. Bases expose
values, analytic gradients, and Hessian blocks so the optimality systems
downstream can be assembled exactly rather than by automatic or numeric
differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import PLAYER_INPUT_DIM, PLAYER_STATE_DIM, ConfigurationError


class ParameterDomainError(ValueError):
    """Weight vectors outside the admissible parameter domain."""


@dataclass(frozen=True, eq=False)
class GoalBasis:
    """Squared distance to a goal position, active in the last `t_goal` steps."""

    goal: np.ndarray
    t_goal: int

    def __post_init__(self):
        g = np.array(self.goal, dtype=float)
        if g.shape != (2,):
            raise ConfigurationError("goal must be a 2d position")
        g.setflags(write=False)
        object.__setattr__(self, "goal", g)
        if self.t_goal < 1:
            raise ConfigurationError("t_goal must be positive")


@dataclass(frozen=True)
class ProximityBasis:
    """Negative log squared distance to every opponent.

    The log argument is clamped at d_min with a C^2 quadratic extension so
    that bad solver iterates with near-coincident positions stay finite.
    """

    d_min: float = 1e-3


@dataclass(frozen=True)
class SpeedBasis:
    """Squared speed."""


@dataclass(frozen=True)
class YawRateEffortBasis:
    """Squared yaw-rate input (first input channel)."""


@dataclass(frozen=True)
class AccelEffortBasis:
    """Squared acceleration input (second input channel)."""


@dataclass(frozen=True)
class InputEffortBasis:
    """Squared norm of the full input vector (both channels)."""


@dataclass(frozen=True, eq=False)
class StateDeviationBasis:
    """Half squared weighted deviation from a per-player reference state.

    With a diagonal weight selecting lateral position and speed this encodes
    a target lane and preferred travel speed.
    """

    reference: np.ndarray
    qdiag: np.ndarray

    def __post_init__(self):
        ref = np.array(self.reference, dtype=float)
        q = np.array(self.qdiag, dtype=float)
        if ref.shape != (PLAYER_STATE_DIM,) or q.shape != (PLAYER_STATE_DIM,):
            raise ConfigurationError("reference and qdiag must be per-player 4-vectors")
        if np.any(q < 0):
            raise ConfigurationError("qdiag must be nonnegative")
        ref.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "qdiag", q)


EFFORT_BASES = (YawRateEffortBasis, AccelEffortBasis, InputEffortBasis)
BASIS_TYPES = (
    GoalBasis,
    ProximityBasis,
    SpeedBasis,
    YawRateEffortBasis,
    AccelEffortBasis,
    InputEffortBasis,
    StateDeviationBasis,
)


@dataclass(frozen=True, eq=False)
class CostBasisSet:
    """Ordered basis descriptors, one tuple per player."""

    bases: tuple

    def __post_init__(self):
        bases = tuple(tuple(per_player) for per_player in self.bases)
        for per_player in bases:
            for b in per_player:
                if not isinstance(b, BASIS_TYPES):
                    raise ConfigurationError(f"unknown basis descriptor {b!r}")
        object.__setattr__(self, "bases", bases)

    @property
    def n_players(self):
        return len(self.bases)

    def dimension(self, player):
        return len(self.bases[player])

    def effort_mask(self, player):
        return np.array([isinstance(b, EFFORT_BASES) for b in self.bases[player]])


@dataclass(frozen=True, eq=False)
class CostParameters:
    """Per-player weight vectors over the cost bases.

    Weights are always nonnegative. When ``normalized`` is set, each
    player's weights must sum to one (the simplex parameterization used by
    the estimators); the control-effort floor is enforced where the basis
    set is known, see :func:`validate_parameters`.
    """

    weights: tuple
    normalized: bool = False

    def __post_init__(self):
        ws = []
        for w in self.weights:
            w = np.array(w, dtype=float)
            if w.ndim != 1 or w.size == 0:
                raise ParameterDomainError("each player needs a nonempty weight vector")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ParameterDomainError("weights must be finite and nonnegative")
            if self.normalized and abs(w.sum() - 1.0) > 1e-8:
                raise ParameterDomainError("normalized weights must sum to one")
            w.setflags(write=False)
            ws.append(w)
        object.__setattr__(self, "weights", tuple(ws))

    @property
    def n_players(self):
        return len(self.weights)

    def stacked(self):
        return np.concatenate(self.weights)


def validate_parameters(params, bases, epsilon=1e-3):
    """Check dimensions and the control-effort weight floor against a basis set."""
    if params.n_players != bases.n_players:
        raise ParameterDomainError("player count mismatch between weights and bases")
    for i, w in enumerate(params.weights):
        if w.size != bases.dimension(i):
            raise ParameterDomainError(
                f"player {i}: {w.size} weights for {bases.dimension(i)} bases"
            )
        mask = bases.effort_mask(i)
        if np.any(w[mask] < epsilon):
            raise ParameterDomainError(f"player {i}: control-effort weights below {epsilon}")


def _check_player(traj, bases, player):
    if not 0 <= player < bases.n_players:
        raise ConfigurationError(f"player index {player} out of range")
    if traj.n_players != bases.n_players:
        raise ConfigurationError("trajectory and basis set disagree on player count")


def _prox_phi(s, s0):
    """phi(s) = -log s for s >= s0, C^2 quadratic extension below; plus derivatives."""
    s = np.asarray(s, dtype=float)
    below = s < s0
    val = np.empty_like(s)
    d1 = np.empty_like(s)
    d2 = np.empty_like(s)
    safe = np.where(below, s0, s)
    val[~below] = -np.log(safe[~below])
    d1[~below] = -1.0 / safe[~below]
    d2[~below] = 1.0 / safe[~below] ** 2
    if np.any(below):
        d = s[below] - s0
        val[below] = -np.log(s0) - d / s0 + d * d / (2.0 * s0 * s0)
        d1[below] = -1.0 / s0 + d / (s0 * s0)
        d2[below] = 1.0 / (s0 * s0)
    return val, d1, d2, bool(np.any(below))


def _opponent_terms(traj, player, d_min):
    """Per-opponent squared distances and deltas; returns list of (j, delta, s, phi...)."""
    s0 = d_min * d_min
    p_i = traj.positions(player)
    out = []
    for j in range(traj.n_players):
        if j == player:
            continue
        delta = p_i - traj.positions(j)
        s = np.einsum("ij,ij->i", delta, delta)
        val, d1, d2, clamped = _prox_phi(s, s0)
        out.append((j, delta, s, val, d1, d2, clamped))
    return out


def basis_values(traj, bases, player):
    """Per-basis, per-timestep values, shape (k, T); also a clamp warning flag."""
    _check_player(traj, bases, player)
    horizon = traj.horizon
    cols = player * PLAYER_STATE_DIM
    colu = player * PLAYER_INPUT_DIM
    x_i = traj.states[:, cols : cols + PLAYER_STATE_DIM]
    u_i = traj.inputs[:, colu : colu + PLAYER_INPUT_DIM]
    values = np.zeros((bases.dimension(player), horizon))
    clamped = False
    for k, basis in enumerate(bases.bases[player]):
        if isinstance(basis, GoalBasis):
            active = np.arange(1, horizon + 1) >= horizon - basis.t_goal
            diff = x_i[:, :2] - basis.goal
            values[k] = active * np.einsum("ij,ij->i", diff, diff)
        elif isinstance(basis, ProximityBasis):
            for _, _, _, val, _, _, cl in _opponent_terms(traj, player, basis.d_min):
                values[k] += val
                clamped = clamped or cl
        elif isinstance(basis, SpeedBasis):
            values[k] = x_i[:, 3] ** 2
        elif isinstance(basis, YawRateEffortBasis):
            values[k] = u_i[:, 0] ** 2
        elif isinstance(basis, AccelEffortBasis):
            values[k] = u_i[:, 1] ** 2
        elif isinstance(basis, InputEffortBasis):
            values[k] = np.einsum("ij,ij->i", u_i, u_i)
        elif isinstance(basis, StateDeviationBasis):
            diff = x_i - basis.reference
            values[k] = 0.5 * np.einsum("ij,j,ij->i", diff, basis.qdiag, diff)
    return values, clamped


@dataclass(frozen=True, eq=False)
class BasisEvaluation:
    totals: np.ndarray
    clamped: bool


def eval_basis(traj, bases, player):
    """Totals over time of each basis for one player."""
    values, clamped = basis_values(traj, bases, player)
    return BasisEvaluation(values.sum(axis=1), clamped)


def _check_weights(weights, bases, player):
    w = np.asarray(weights, dtype=float)
    if w.shape != (bases.dimension(player),):
        raise ParameterDomainError(
            f"player {player}: expected {bases.dimension(player)} weights, got {w.shape}"
        )
    if np.any(w < 0):
        raise ParameterDomainError("weights must be nonnegative")
    return w


def total_cost(traj, bases, weights, player):
    """J^i: dot product of the weight vector with the basis totals."""
    w = _check_weights(weights, bases, player)
    return float(w @ eval_basis(traj, bases, player).totals)


@dataclass(frozen=True, eq=False)
class BasisGradients:
    """Per-basis running-cost gradients: state (k, T, n) and own-input (k, T, 2)."""

    state: np.ndarray
    input: np.ndarray
    clamped: bool


def basis_gradients(traj, bases, player):
    _check_player(traj, bases, player)
    horizon, n = traj.states.shape
    cols = player * PLAYER_STATE_DIM
    colu = player * PLAYER_INPUT_DIM
    x_i = traj.states[:, cols : cols + PLAYER_STATE_DIM]
    u_i = traj.inputs[:, colu : colu + PLAYER_INPUT_DIM]
    k_dim = bases.dimension(player)
    gx = np.zeros((k_dim, horizon, n))
    gu = np.zeros((k_dim, horizon, PLAYER_INPUT_DIM))
    clamped = False
    for k, basis in enumerate(bases.bases[player]):
        if isinstance(basis, GoalBasis):
            active = np.arange(1, horizon + 1) >= horizon - basis.t_goal
            diff = x_i[:, :2] - basis.goal
            gx[k, :, cols : cols + 2] = 2.0 * active[:, None] * diff
        elif isinstance(basis, ProximityBasis):
            for j, delta, _, _, d1, _, cl in _opponent_terms(traj, player, basis.d_min):
                grad = 2.0 * d1[:, None] * delta
                gx[k, :, cols : cols + 2] += grad
                gx[k, :, j * PLAYER_STATE_DIM : j * PLAYER_STATE_DIM + 2] -= grad
                clamped = clamped or cl
        elif isinstance(basis, SpeedBasis):
            gx[k, :, cols + 3] = 2.0 * x_i[:, 3]
        elif isinstance(basis, YawRateEffortBasis):
            gu[k, :, 0] = 2.0 * u_i[:, 0]
        elif isinstance(basis, AccelEffortBasis):
            gu[k, :, 1] = 2.0 * u_i[:, 1]
        elif isinstance(basis, InputEffortBasis):
            gu[k] = 2.0 * u_i
        elif isinstance(basis, StateDeviationBasis):
            gx[k, :, cols : cols + PLAYER_STATE_DIM] = basis.qdiag * (x_i - basis.reference)
    return BasisGradients(gx, gu, clamped)


@dataclass(frozen=True, eq=False)
class CostGradients:
    """Weighted running-cost gradients: state (T, n) and own-input (T, 2)."""

    state: np.ndarray
    input: np.ndarray
    clamped: bool


def cost_gradients(traj, bases, weights, player):
    w = _check_weights(weights, bases, player)
    per = basis_gradients(traj, bases, player)
    return CostGradients(
        np.einsum("k,ktn->tn", w, per.state),
        np.einsum("k,ktm->tm", w, per.input),
        per.clamped,
    )


def cost_hessians(traj, bases, weights, player):
    """Weighted running-cost Hessians per step: (T, n, n) in x and (T, 2, 2) in own input.

    The bases have no state-input cross terms, so those blocks are zero and
    omitted.
    """
    w = _check_weights(weights, bases, player)
    horizon, n = traj.states.shape
    cols = player * PLAYER_STATE_DIM
    x_i = traj.states[:, cols : cols + PLAYER_STATE_DIM]
    hxx = np.zeros((horizon, n, n))
    huu = np.zeros((horizon, PLAYER_INPUT_DIM, PLAYER_INPUT_DIM))
    for k, basis in enumerate(bases.bases[player]):
        wk = w[k]
        if wk == 0.0:
            continue
        if isinstance(basis, GoalBasis):
            active = np.arange(1, horizon + 1) >= horizon - basis.t_goal
            for c in (cols, cols + 1):
                hxx[:, c, c] += 2.0 * wk * active
        elif isinstance(basis, ProximityBasis):
            for j, delta, _, _, d1, d2, _ in _opponent_terms(traj, player, basis.d_min):
                colj = j * PLAYER_STATE_DIM
                block = 4.0 * d2[:, None, None] * np.einsum("ti,tj->tij", delta, delta)
                block[:, 0, 0] += 2.0 * d1
                block[:, 1, 1] += 2.0 * d1
                block *= wk
                ii = slice(cols, cols + 2)
                jj = slice(colj, colj + 2)
                hxx[:, ii, ii] += block
                hxx[:, jj, jj] += block
                hxx[:, ii, jj] -= block
                hxx[:, jj, ii] -= block
        elif isinstance(basis, SpeedBasis):
            hxx[:, cols + 3, cols + 3] += 2.0 * wk
        elif isinstance(basis, YawRateEffortBasis):
            huu[:, 0, 0] += 2.0 * wk
        elif isinstance(basis, AccelEffortBasis):
            huu[:, 1, 1] += 2.0 * wk
        elif isinstance(basis, InputEffortBasis):
            huu[:, 0, 0] += 2.0 * wk
            huu[:, 1, 1] += 2.0 * wk
        elif isinstance(basis, StateDeviationBasis):
            for c in range(PLAYER_STATE_DIM):
                hxx[:, cols + c, cols + c] += wk * basis.qdiag[c]
    return hxx, huu
