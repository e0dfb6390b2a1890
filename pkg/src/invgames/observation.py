"""Additive white Gaussian observation models.

Two per-step maps are supported: ``full`` observes every player's complete
state block; ``partial`` observes position and heading but not speed. One
isotropic standard deviation is shared by position and heading channels.
The squared-residual fit objective drops the constant terms of the Gaussian
log density and wraps heading residuals to (-pi, pi] so that observations
near the branch cut do not incur spurious 2*pi penalties.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import dynamics
from .dynamics import PLAYER_STATE_DIM, ConfigurationError

FULL = "full"
PARTIAL = "partial"
KINDS = (FULL, PARTIAL)

_TWO_PI = 2.0 * np.pi


def wrap_angle(x):
    """Wrap to (-pi, pi]."""
    return -((np.pi - np.asarray(x)) % _TWO_PI - np.pi)


@dataclass(frozen=True)
class ObservationModel:
    """Per-step observation map and isotropic noise level."""

    kind: str
    sigma: float
    n_players: int
    model: str = dynamics.UNICYCLE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown observation kind {self.kind!r}")
        if self.sigma < 0:
            raise ConfigurationError("sigma must be nonnegative")
        if self.n_players < 1:
            raise ConfigurationError("need at least one player")
        if self.kind == PARTIAL and self.model != dynamics.UNICYCLE:
            raise ConfigurationError("partial observations are defined for the unicycle model")

    @property
    def channels_per_player(self):
        return 4 if self.kind == FULL else 3

    @property
    def dim(self):
        return self.n_players * self.channels_per_player

    def state_indices(self):
        """Indices into the global state observed by each output channel."""
        per = np.arange(self.channels_per_player)
        offs = np.arange(self.n_players) * PLAYER_STATE_DIM
        return (offs[:, None] + per[None, :]).reshape(-1)

    def heading_mask(self):
        mask = np.zeros(self.dim, dtype=bool)
        if self.model == dynamics.UNICYCLE:
            mask[2 :: self.channels_per_player] = True
        return mask

    def expected(self, states):
        """h(x) for a single state (n,) or a stacked batch (T, n)."""
        states = np.asarray(states, dtype=float)
        idx = self.state_indices()
        return states[..., idx]


@dataclass(frozen=True, eq=False)
class ObservationSequence:
    y: np.ndarray
    model: ObservationModel
    seed: int

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2 or y.shape[1] != self.model.dim:
            raise ConfigurationError(
                f"observations must be (T, {self.model.dim}), got {y.shape}"
            )
        object.__setattr__(self, "y", y)

    @property
    def horizon(self):
        return self.y.shape[0]


def observe(traj, model, seed):
    """Corrupt expected observations with N(0, sigma^2 I) noise.

    Noise is drawn from a counter-based generator keyed by (seed, t), so
    sequences are reproducible and each timestep can be synthesized
    independently.
    """
    if traj.n_players != model.n_players:
        raise ConfigurationError("trajectory and observation model disagree on player count")
    expected = model.expected(traj.states)
    y = np.empty_like(expected)
    for t in range(traj.horizon):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), t]))
        y[t] = expected[t] + model.sigma * rng.standard_normal(model.dim)
    return ObservationSequence(y, model, int(seed))


def observation_residuals(obs, states):
    """Stacked y_t - h(x_t) with heading channels wrapped, shape (T*d,)."""
    expected = obs.model.expected(states)
    res = obs.y - expected
    mask = obs.model.heading_mask()
    if mask.any():
        res[:, mask] = wrap_angle(res[:, mask])
    return res.reshape(-1)


def neg_log_likelihood(obs, traj_or_states):
    """Sum of squared (wrapped) observation residuals; zero iff an exact match."""
    states = getattr(traj_or_states, "states", traj_or_states)
    if states.shape[0] != obs.horizon:
        raise ConfigurationError("trajectory and observations disagree on horizon")
    r = observation_residuals(obs, states)
    return float(r @ r)


def nll_state_gradient(obs, traj_or_states):
    """Gradient of the fit objective with respect to the stacked states, (T, n)."""
    states = getattr(traj_or_states, "states", traj_or_states)
    res = observation_residuals(obs, states).reshape(obs.horizon, obs.model.dim)
    grad = np.zeros_like(states)
    idx = obs.model.state_indices()
    np.add.at(grad, (slice(None), idx), -2.0 * res)
    return grad


def selection_matrix(model, horizon, state_dim):
    """Constant Jacobian of stacked expected observations wrt stacked states."""
    idx = model.state_indices()
    d = model.dim
    rows = np.arange(horizon * d)
    cols = (np.arange(horizon)[:, None] * state_dim + idx[None, :]).reshape(-1)
    data = np.ones(horizon * d)
    return sp.csr_array((data, (rows, cols)), shape=(horizon * d, horizon * state_dim))
