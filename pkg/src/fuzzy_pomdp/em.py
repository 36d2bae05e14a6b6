"""Standard EM for Gaussian-emission, action-conditioned hidden Markov models.

E-step: scaled forward-backward per trajectory. M-step: closed-form
maximum-likelihood updates from pooled expected counts. The initial state
distribution is held fixed, never re-estimated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import (
    DEFAULT_COV_RIDGE,
    PomdpModel,
    Trajectory,
    per_state_log_density,
    regularize_cov,
)

log = logging.getLogger(__name__)


class ForwardBackwardError(RuntimeError):
    """Observation likelihood underflowed to zero at some step."""


@dataclass(frozen=True)
class Posteriors:
    """Smoothed posteriors for one trajectory.

    gamma[t, s] is the probability of state s at time t; xi[t, s, s2] the
    joint of (state t, state t+1), defined for t = 0..T-2 only.
    """

    gamma: np.ndarray
    xi: np.ndarray
    log_likelihood: float


@dataclass
class SufficientCounts:
    """Expected counts pooled over a dataset.

    trans[s, a, s2] expected transition uses; obs_weight[s] expected visits;
    obs_sum[s] weighted observation sum; obs_outer[s] weighted sum of
    observation outer products.
    """

    trans: np.ndarray
    obs_weight: np.ndarray
    obs_sum: np.ndarray
    obs_outer: np.ndarray

    @classmethod
    def zeros(cls, num_states: int, num_actions: int, obs_dim: int) -> "SufficientCounts":
        return cls(
            trans=np.zeros((num_states, num_actions, num_states)),
            obs_weight=np.zeros(num_states),
            obs_sum=np.zeros((num_states, obs_dim)),
            obs_outer=np.zeros((num_states, obs_dim, obs_dim)),
        )


@dataclass(frozen=True)
class EmConfig:
    max_iterations: int = 200
    loglik_tolerance: float = 1e-6
    covariance_ridge: float = DEFAULT_COV_RIDGE
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.loglik_tolerance > 0:
            raise ValueError("loglik_tolerance must be > 0")
        if self.covariance_ridge < 0:
            raise ValueError("covariance_ridge must be >= 0")


@dataclass(frozen=True)
class EmResult:
    model: PomdpModel
    loglik_trace: list[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def forward_backward(model: PomdpModel, traj: Trajectory) -> Posteriors:
    """Scaled forward-backward smoothing for one trajectory.

    Emission densities are shifted by their per-step maximum before
    exponentiation, and messages are renormalized at every step; the log
    normalizers accumulate into the exact data log-likelihood.
    """
    num_states = model.num_states
    horizon = len(traj)
    log_b = per_state_log_density(model, traj.observations)
    shift = log_b.max(axis=1)
    b = np.exp(log_b - shift[:, None])

    alpha = np.empty((horizon, num_states))
    scale = np.empty(horizon)
    step = model.initial_dist * b[0]
    scale[0] = step.sum()
    if scale[0] <= 0.0:
        raise ForwardBackwardError("zero total observation likelihood at step 0")
    alpha[0] = step / scale[0]
    for t in range(1, horizon):
        trans = model.transitions[:, traj.actions[t - 1], :]
        step = (alpha[t - 1] @ trans) * b[t]
        scale[t] = step.sum()
        if scale[t] <= 0.0:
            raise ForwardBackwardError(f"zero total observation likelihood at step {t}")
        alpha[t] = step / scale[t]

    beta = np.empty((horizon, num_states))
    beta[-1] = 1.0
    for t in range(horizon - 2, -1, -1):
        trans = model.transitions[:, traj.actions[t], :]
        beta[t] = trans @ (b[t + 1] * beta[t + 1]) / scale[t + 1]

    gamma = alpha * beta
    xi = np.empty((max(horizon - 1, 0), num_states, num_states))
    for t in range(horizon - 1):
        trans = model.transitions[:, traj.actions[t], :]
        xi[t] = alpha[t][:, None] * trans * (b[t + 1] * beta[t + 1])[None, :] / scale[t + 1]

    log_likelihood = float(np.log(scale).sum() + shift.sum())
    return Posteriors(gamma=gamma, xi=xi, log_likelihood=log_likelihood)


def accumulate_counts(
    dataset: list[Trajectory],
    posteriors: list[Posteriors],
    num_actions: int,
) -> SufficientCounts:
    """Pool posterior expectations over a dataset into sufficient counts."""
    if len(dataset) != len(posteriors):
        raise ValueError("dataset and posteriors must be parallel lists")
    num_states = posteriors[0].gamma.shape[1]
    obs_dim = dataset[0].obs_dim
    counts = SufficientCounts.zeros(num_states, num_actions, obs_dim)
    for traj, post in zip(dataset, posteriors):
        for a in range(num_actions):
            mask = traj.actions == a
            if mask.any():
                counts.trans[:, a, :] += post.xi[mask].sum(axis=0)
        counts.obs_weight += post.gamma.sum(axis=0)
        counts.obs_sum += post.gamma.T @ traj.observations
        counts.obs_outer += np.einsum(
            "ts,td,te->sde", post.gamma, traj.observations, traj.observations
        )
    return counts


def _mstep_from_counts(
    counts: SufficientCounts, prev: PomdpModel, ridge: float
) -> PomdpModel:
    """Closed-form parameter updates from (possibly blended) counts.

    Zero-mass transition rows fall back to uniform; zero-mass states keep
    their previous observation parameters. Both fallbacks are logged.
    """
    num_states = prev.num_states
    transitions = np.empty_like(prev.transitions)
    row_mass = counts.trans.sum(axis=2)
    for s in range(num_states):
        for a in range(prev.num_actions):
            if row_mass[s, a] > 0.0:
                transitions[s, a] = counts.trans[s, a] / row_mass[s, a]
            else:
                log.debug("no transition mass for state %d action %d; using uniform", s, a)
                transitions[s, a] = 1.0 / num_states

    means = prev.obs_means.copy()
    covs = prev.obs_covs.copy()
    for s in range(num_states):
        weight = counts.obs_weight[s]
        if weight > 0.0:
            mu = counts.obs_sum[s] / weight
            means[s] = mu
            covs[s] = regularize_cov(counts.obs_outer[s] / weight - np.outer(mu, mu), ridge)
        else:
            log.debug("no observation mass for state %d; keeping previous parameters", s)
    return PomdpModel(
        num_states=num_states,
        num_actions=prev.num_actions,
        obs_dim=prev.obs_dim,
        transitions=transitions,
        obs_means=means,
        obs_covs=covs,
        initial_dist=prev.initial_dist,
        state_labels=prev.state_labels,
    )


def m_step_standard(
    counts: SufficientCounts, prev: PomdpModel, config: EmConfig
) -> PomdpModel:
    """Maximum-likelihood M-step from empirical expected counts."""
    return _mstep_from_counts(counts, prev, config.covariance_ridge)


def e_step(model: PomdpModel, dataset: list[Trajectory]) -> tuple[list[Posteriors], float]:
    """Forward-backward over every trajectory; returns posteriors and total log-likelihood."""
    posteriors = [forward_backward(model, traj) for traj in dataset]
    return posteriors, float(sum(p.log_likelihood for p in posteriors))


def run_em(
    dataset: list[Trajectory], init: PomdpModel, config: EmConfig | None = None
) -> EmResult:
    """Alternate E and M steps until the log-likelihood improvement falls
    below the tolerance or the iteration budget runs out.

    loglik_trace[i] is the total data log-likelihood of the model after i
    M-steps; entry 0 scores the initialization.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    config = config or EmConfig()
    model = init
    trace: list[float] = []
    converged = False
    for iteration in range(config.max_iterations + 1):
        try:
            posteriors, total = e_step(model, dataset)
        except ForwardBackwardError as err:
            raise ForwardBackwardError(f"iteration {iteration}: {err}") from err
        trace.append(total)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < config.loglik_tolerance:
            converged = True
            break
        if iteration == config.max_iterations:
            break
        counts = accumulate_counts(dataset, posteriors, model.num_actions)
        model = m_step_standard(counts, model, config)
    return EmResult(
        model=model, loglik_trace=trace, converged=converged, iterations=len(trace) - 1
    )
