"""Core POMDP data model.

Holds the learnable parameters (action-conditioned transition tensor plus a
Gaussian observation model per latent state), patient trajectories, and the
ground-truth simulation environments with per-state Beta emitters used for
benchmarking. All containers are immutable value objects; sampling takes an
explicit numpy Generator.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_COV_RIDGE = 1e-6

# Policy: callable (time_step, rng) -> action index.
Policy = Callable[[int, np.random.Generator], int]


class CovarianceError(ValueError):
    """A covariance matrix is unusable even after regularization."""


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


def _set(obj, name, value):
    object.__setattr__(obj, name, value)


@dataclass(frozen=True)
class PomdpModel:
    """Learnable POMDP parameters.

    transitions is indexed (state, action, next_state). obs_means[s] and
    obs_covs[s] parameterize the multivariate normal observation density of
    state s. The initial state distribution is fixed configuration rather
    than a learned quantity; it defaults to uniform.

    The constructor only normalizes shapes. Content constraints
    (row-stochasticity, positive-definite covariances) are checked by
    validate_model so that invalid candidates can still be represented and
    reported on.
    """

    num_states: int
    num_actions: int
    obs_dim: int
    transitions: np.ndarray
    obs_means: np.ndarray
    obs_covs: np.ndarray
    initial_dist: np.ndarray | None = None
    state_labels: tuple[str, ...] = ()

    def __post_init__(self):
        s, a, d = self.num_states, self.num_actions, self.obs_dim
        if min(s, a, d) < 1:
            raise ValueError("num_states, num_actions and obs_dim must be positive")
        trans = _frozen_array(self.transitions)
        means = _frozen_array(self.obs_means)
        covs = _frozen_array(self.obs_covs)
        init = self.initial_dist
        init = np.full(s, 1.0 / s) if init is None else np.asarray(init, dtype=float)
        init = _frozen_array(init)
        if trans.shape != (s, a, s):
            raise ValueError(f"transitions shape {trans.shape}, expected {(s, a, s)}")
        if means.shape != (s, d):
            raise ValueError(f"obs_means shape {means.shape}, expected {(s, d)}")
        if covs.shape != (s, d, d):
            raise ValueError(f"obs_covs shape {covs.shape}, expected {(s, d, d)}")
        if init.shape != (s,):
            raise ValueError(f"initial_dist shape {init.shape}, expected {(s,)}")
        labels = tuple(self.state_labels) or tuple(f"state_{i}" for i in range(s))
        if len(labels) != s:
            raise ValueError("state_labels length must equal num_states")
        _set(self, "transitions", trans)
        _set(self, "obs_means", means)
        _set(self, "obs_covs", covs)
        _set(self, "initial_dist", init)
        _set(self, "state_labels", labels)

    def transition_matrix(self, action: int) -> np.ndarray:
        """The (from_state, to_state) matrix conditioned on one action."""
        return self.transitions[:, action, :]


@dataclass(frozen=True)
class Trajectory:
    """One action-observation sequence.

    Stores T observation vectors and T-1 actions; actions[t] is taken
    between observations t and t+1 and conditions that transition.
    """

    observations: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        obs = np.atleast_2d(np.asarray(self.observations, dtype=float))
        acts = np.asarray(self.actions, dtype=int)
        if obs.ndim != 2 or len(obs) < 1:
            raise ValueError("observations must be a non-empty (T, d) array")
        if acts.shape != (len(obs) - 1,):
            raise ValueError(
                f"expected {len(obs) - 1} actions for {len(obs)} observations, "
                f"got {acts.shape}"
            )
        obs.flags.writeable = False
        acts.flags.writeable = False
        _set(self, "observations", obs)
        _set(self, "actions", acts)

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]


@dataclass(frozen=True)
class GroundTruthEnv:
    """Simulation oracle: true transitions plus per-state Beta emitters.

    beta_params is indexed (state, obs_dimension, 2) holding the (alpha,
    beta) shape pair of each emitter; observation components are sampled
    independently per dimension and lie in [0, 1].
    """

    transitions: np.ndarray
    beta_params: np.ndarray
    state_labels: tuple[str, ...] = ()

    def __post_init__(self):
        trans = _frozen_array(self.transitions)
        betas = _frozen_array(self.beta_params)
        if trans.ndim != 3 or trans.shape[0] != trans.shape[2]:
            raise ValueError(f"transitions shape {trans.shape}, expected (S, A, S)")
        s = trans.shape[0]
        if betas.ndim != 3 or betas.shape[0] != s or betas.shape[2] != 2:
            raise ValueError(f"beta_params shape {betas.shape}, expected ({s}, d, 2)")
        labels = tuple(self.state_labels) or tuple(f"state_{i}" for i in range(s))
        if len(labels) != s:
            raise ValueError("state_labels length must equal the state count")
        _set(self, "transitions", trans)
        _set(self, "beta_params", betas)
        _set(self, "state_labels", labels)

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.beta_params.shape[1]


def regularize_cov(cov: np.ndarray, ridge: float = DEFAULT_COV_RIDGE) -> np.ndarray:
    """Symmetrize; add ridge * I only when the result is near-degenerate.

    Well-conditioned covariances pass through untouched so closed-form
    parameter updates stay exact maximizers (an unconditional ridge makes
    the fitted likelihood creep downward near convergence). The guard kicks
    in below a smallest eigenvalue of `ridge`, where tiny datasets would
    otherwise produce singular matrices.
    """
    cov = np.asarray(cov, dtype=float)
    sym = 0.5 * (cov + cov.T)
    if ridge > 0.0 and float(np.linalg.eigvalsh(sym).min()) < ridge:
        sym = sym + ridge * np.eye(cov.shape[0])
    return sym


def gaussian_log_density(obs, mean, cov) -> float | np.ndarray:
    """log N(obs; mean, cov) for one point (d,) or a batch (n, d).

    cov must be symmetric positive definite; a Cholesky failure raises
    CovarianceError. Finite for any finite obs.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    obs = np.asarray(obs, dtype=float)
    d = mean.shape[0]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError(
            f"covariance is not positive definite: {cov.tolist()}"
        ) from exc
    diff = np.atleast_2d(obs) - mean
    z = np.linalg.solve(chol, diff.T)
    maha = np.sum(z * z, axis=0)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (d * np.log(2.0 * np.pi) + log_det + maha)
    return float(out[0]) if obs.ndim == 1 else out


def per_state_log_density(model: PomdpModel, obs) -> np.ndarray:
    """Log observation densities under every state, shape (n, S) or (S,).

    Wraps covariance failures with the index of the offending state.
    """
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    points = np.atleast_2d(obs)
    out = np.empty((len(points), model.num_states))
    for s in range(model.num_states):
        try:
            out[:, s] = gaussian_log_density(points, model.obs_means[s], model.obs_covs[s])
        except CovarianceError as exc:
            raise CovarianceError(f"state {s}: {exc}") from exc
    return out[0] if single else out


def cholesky_factor(cov) -> np.ndarray:
    """Lower Cholesky factor, with the package's covariance error type."""
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError(
            f"covariance is not positive definite: {cov.tolist()}"
        ) from exc


def sample_gaussian(mean, cov, n: int, rng: np.random.Generator) -> np.ndarray:
    """n draws from N(mean, cov) via a Cholesky factor, shape (n, d)."""
    mean = np.asarray(mean, dtype=float)
    chol = cholesky_factor(cov)
    z = rng.standard_normal((n, mean.shape[0]))
    return mean + z @ chol.T


def validate_model(model: PomdpModel, atol: float = 1e-9) -> list[str]:
    """All invariant violations, empty when the model is well-formed.

    Each entry names the offending index and the failed constraint.
    """
    violations = []
    row_sums = model.transitions.sum(axis=2)
    for s in range(model.num_states):
        for a in range(model.num_actions):
            if np.any(model.transitions[s, a] < -atol):
                violations.append(
                    f"transitions[s={s}, a={a}] has a negative entry: "
                    f"{model.transitions[s, a].tolist()}"
                )
            if abs(row_sums[s, a] - 1.0) > atol:
                violations.append(
                    f"transitions[s={s}, a={a}] sums to {row_sums[s, a]:.12g}, expected 1"
                )
    for s in range(model.num_states):
        cov = model.obs_covs[s]
        if not np.allclose(cov, cov.T, atol=1e-12):
            violations.append(f"obs_covs[s={s}] is not symmetric")
            continue
        min_eig = float(np.linalg.eigvalsh(cov)[0])
        if min_eig <= 0:
            violations.append(
                f"obs_covs[s={s}] is not positive definite (min eigenvalue {min_eig:.3g})"
            )
    if abs(model.initial_dist.sum() - 1.0) > atol:
        violations.append(f"initial_dist sums to {model.initial_dist.sum():.12g}, expected 1")
    if np.any(model.initial_dist < -atol):
        violations.append("initial_dist has a negative entry")
    return violations


def validate_env(env: GroundTruthEnv, atol: float = 1e-9) -> list[str]:
    """Invariant violations for a ground-truth environment."""
    violations = []
    row_sums = env.transitions.sum(axis=2)
    for s in range(env.num_states):
        for a in range(env.num_actions):
            if np.any(env.transitions[s, a] < -atol):
                violations.append(f"transitions[s={s}, a={a}] has a negative entry")
            if abs(row_sums[s, a] - 1.0) > atol:
                violations.append(
                    f"transitions[s={s}, a={a}] sums to {row_sums[s, a]:.12g}, expected 1"
                )
    if np.any(env.beta_params <= 0):
        bad = np.argwhere(env.beta_params <= 0)
        s, j, _ = bad[0]
        violations.append(f"beta_params[s={s}, dim={j}] must be strictly positive")
    return violations


def validate_dataset(dataset: Sequence[Trajectory], num_actions: int, obs_dim: int) -> list[str]:
    """Dimensional checks for a dataset against a model or environment."""
    violations = []
    for i, traj in enumerate(dataset):
        if traj.obs_dim != obs_dim:
            violations.append(f"trajectory {i}: obs_dim {traj.obs_dim}, expected {obs_dim}")
        if len(traj.actions) and (traj.actions.min() < 0 or traj.actions.max() >= num_actions):
            violations.append(
                f"trajectory {i}: action index out of range [0, {num_actions})"
            )
    return violations


def sample_trajectory(
    env: GroundTruthEnv,
    policy: Policy,
    horizon: int,
    rng: np.random.Generator,
    initial_dist: np.ndarray | None = None,
    return_states: bool = False,
):
    """Roll out one trajectory of `horizon` observations from the environment.

    The initial state is drawn from initial_dist (uniform when omitted);
    each observation component comes from the current state's Beta emitter,
    and policy(t, rng) picks the action steering the next transition.
    Fully reproducible given the Generator state.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    s_count = env.num_states
    if initial_dist is None:
        initial_dist = np.full(s_count, 1.0 / s_count)
    state = int(rng.choice(s_count, p=initial_dist))
    states = [state]
    observations = np.empty((horizon, env.obs_dim))
    actions = np.empty(horizon - 1, dtype=int)
    observations[0] = rng.beta(env.beta_params[state, :, 0], env.beta_params[state, :, 1])
    for t in range(horizon - 1):
        action = int(policy(t, rng))
        actions[t] = action
        state = int(rng.choice(s_count, p=env.transitions[state, action]))
        states.append(state)
        observations[t + 1] = rng.beta(
            env.beta_params[state, :, 0], env.beta_params[state, :, 1]
        )
    traj = Trajectory(observations=observations, actions=actions)
    if return_states:
        return traj, np.array(states)
    return traj


def make_policy(spec: str, num_actions: int) -> Policy:
    """Build an action-selection rule from a short textual spec.

    "uniform" draws uniformly at random, "fixed:K" always picks action K,
    "cycle" walks round-robin through the action set.
    """
    if spec == "uniform":
        return lambda t, rng: int(rng.integers(num_actions))
    if spec == "cycle":
        return lambda t, rng: t % num_actions
    if spec.startswith("fixed:"):
        action = int(spec.split(":", 1)[1])
        if not 0 <= action < num_actions:
            raise ValueError(f"fixed action {action} out of range [0, {num_actions})")
        return lambda t, rng: action
    raise ValueError(f"unknown policy spec {spec!r}")


def relabel_states(model: PomdpModel, new_index: Sequence[int]) -> PomdpModel:
    """Permute the model's states; new_index[old] gives each state's new slot."""
    new_index = np.asarray(new_index, dtype=int)
    s = model.num_states
    if sorted(new_index.tolist()) != list(range(s)):
        raise ValueError(f"new_index must be a permutation of 0..{s - 1}")
    old_of_new = np.empty(s, dtype=int)
    old_of_new[new_index] = np.arange(s)
    labels = tuple(model.state_labels[i] for i in old_of_new)
    return PomdpModel(
        num_states=s,
        num_actions=model.num_actions,
        obs_dim=model.obs_dim,
        transitions=model.transitions[old_of_new][:, :, old_of_new],
        obs_means=model.obs_means[old_of_new],
        obs_covs=model.obs_covs[old_of_new],
        initial_dist=model.initial_dist[old_of_new],
        state_labels=labels,
    )


# ---------------------------------------------------------------------------
# JSON file formats
# ---------------------------------------------------------------------------

def model_to_dict(model: PomdpModel) -> dict:
    return {
        "num_states": model.num_states,
        "num_actions": model.num_actions,
        "obs_dim": model.obs_dim,
        "transitions": model.transitions.tolist(),
        "obs_means": model.obs_means.tolist(),
        "obs_covs": model.obs_covs.tolist(),
        "initial_dist": model.initial_dist.tolist(),
        "state_labels": list(model.state_labels),
    }


def model_from_dict(data: dict) -> PomdpModel:
    return PomdpModel(
        num_states=int(data["num_states"]),
        num_actions=int(data["num_actions"]),
        obs_dim=int(data["obs_dim"]),
        transitions=data["transitions"],
        obs_means=data["obs_means"],
        obs_covs=data["obs_covs"],
        initial_dist=data.get("initial_dist"),
        state_labels=tuple(data.get("state_labels", ())),
    )


def save_model(model: PomdpModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")


def load_model(path) -> PomdpModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def env_to_dict(env: GroundTruthEnv) -> dict:
    return {
        "num_states": env.num_states,
        "num_actions": env.num_actions,
        "obs_dim": env.obs_dim,
        "transitions": env.transitions.tolist(),
        "beta_params": [
            [{"alpha": float(a), "beta": float(b)} for a, b in state_params]
            for state_params in env.beta_params
        ],
        "state_labels": list(env.state_labels),
    }


def env_from_dict(data: dict) -> GroundTruthEnv:
    betas = [
        [(entry["alpha"], entry["beta"]) for entry in state_params]
        for state_params in data["beta_params"]
    ]
    env = GroundTruthEnv(
        transitions=data["transitions"],
        beta_params=betas,
        state_labels=tuple(data.get("state_labels", ())),
    )
    problems = validate_env(env)
    if problems:
        raise ValueError("invalid environment: " + "; ".join(problems))
    return env


def save_env(env: GroundTruthEnv, path) -> None:
    Path(path).write_text(json.dumps(env_to_dict(env), indent=2) + "\n")


def load_env(path) -> GroundTruthEnv:
    return env_from_dict(json.loads(Path(path).read_text()))


def dataset_to_list(dataset: Sequence[Trajectory]) -> list:
    return [
        {"observations": t.observations.tolist(), "actions": t.actions.tolist()}
        for t in dataset
    ]


def dataset_from_list(data) -> list[Trajectory]:
    return [Trajectory(observations=d["observations"], actions=d["actions"]) for d in data]


def save_dataset(dataset: Sequence[Trajectory], path) -> None:
    Path(path).write_text(json.dumps(dataset_to_list(dataset), indent=2) + "\n")


def load_dataset(path) -> list[Trajectory]:
    return dataset_from_list(json.loads(Path(path).read_text()))
