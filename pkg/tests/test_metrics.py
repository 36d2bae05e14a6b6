"""State matching, transition distances, and observation-model KL."""
import itertools
import math

import numpy as np
import pytest

from fuzzy_pomdp.model import GroundTruthEnv, PomdpModel, load_env, relabel_states
from fuzzy_pomdp.metrics import (
    beta_product_log_density,
    evaluate_model,
    kl_observation,
    kl_quadrature,
    l1_transition_distance,
    l1_transition_total,
    match_states,
)
from fuzzy_pomdp.harness import asset_path


def beta_moments(alpha: float, beta: float) -> tuple[float, float]:
    mean = alpha / (alpha + beta)
    var = alpha * beta / ((alpha + beta) ** 2 * (alpha + beta + 1.0))
    return mean, var


def moment_matched_model(env: GroundTruthEnv,
                         perm=None) -> PomdpModel:
    """Gaussian model matching each env state's Beta moments exactly.

    perm (optional) relabels states: learned slot i carries truth state
    perm[i]'s parameters.
    """
    S, D = env.beta_params.shape[:2]
    A = env.transitions.shape[1]
    perm = list(perm) if perm is not None else list(range(S))
    means = np.zeros((S, D))
    covs = np.zeros((S, D, D))
    trans = np.zeros((S, A, S))
    for i, src in enumerate(perm):
        for d in range(D):
            a, b = env.beta_params[src, d]
            mu, var = beta_moments(a, b)
            means[i, d] = mu
            covs[i, d, d] = var
        for a in range(A):
            for j, dst in enumerate(perm):
                trans[i, a, j] = env.transitions[src, a, dst]
    return PomdpModel(S, A, D, trans, means, covs,
                      initial_dist=np.full(S, 1.0 / S))


def bundled_env() -> GroundTruthEnv:
    return load_env(asset_path("synthetic_env.json"))


# ------------------------------------------------------------ state match

def test_match_states_identity_for_aligned_model():
    env = bundled_env()
    learned = moment_matched_model(env)
    assert match_states(learned, env) == (0, 1, 2)


def test_match_states_recovers_shuffles():
    env = bundled_env()
    for perm in itertools.permutations(range(3)):
        learned = moment_matched_model(env, perm)
        assert match_states(learned, env) == perm


def test_match_states_is_argmin_over_permutations():
    # perturbed model: the returned assignment must beat or tie every other
    # permutation on total observation KL
    env = bundled_env()
    rng = np.random.default_rng(23)
    for _ in range(5):
        learned = moment_matched_model(env, perm=rng.permutation(3))
        noisy = PomdpModel(
            3, 2, 2, learned.transitions,
            learned.obs_means + rng.normal(scale=0.08, size=(3, 2)),
            learned.obs_covs * rng.uniform(0.8, 1.5),
            initial_dist=learned.initial_dist)

        def total_kl(assign):
            return sum(
                kl_observation(env.beta_params[assign[i]],
                               noisy.obs_means[i], noisy.obs_covs[i])
                for i in range(3))

        best = match_states(noisy, env)
        best_val = total_kl(best)
        for perm in itertools.permutations(range(3)):
            assert best_val <= total_kl(perm) + 1e-9


# ------------------------------------------------------------ L1 distance

def test_l1_zero_for_identical_tensors():
    env = bundled_env()
    assert l1_transition_distance(env.transitions, env.transitions) == 0.0
    assert l1_transition_total(env.transitions, env.transitions) == 0.0


def test_l1_single_row_change():
    # move one row's probability mass entirely: that row contributes L1 = 2,
    # averaged over the 6 (state, action) rows
    env = bundled_env()
    est = env.transitions.copy()
    est[0, 0] = np.roll(est[0, 0], 1)
    row_l1 = np.abs(est[0, 0] - env.transitions[0, 0]).sum()
    assert abs(l1_transition_total(est, env.transitions) - row_l1) < 1e-12
    assert abs(l1_transition_distance(est, env.transitions)
               - row_l1 / 6.0) < 1e-12


def test_l1_matches_flat_loop_oracle():
    rng = np.random.default_rng(24)
    env = bundled_env()
    est = rng.dirichlet(np.ones(3), size=(3, 2))
    total = 0.0
    for s in range(3):
        for a in range(2):
            for t in range(3):
                total += abs(est[s, a, t] - env.transitions[s, a, t])
    assert abs(l1_transition_total(est, env.transitions) - total) < 1e-12
    assert abs(l1_transition_distance(est, env.transitions)
               - total / 6.0) < 1e-12


# -------------------------------------------------------------------- KL

def test_kl_quadrature_matches_gaussian_closed_form():
    # both densities concentrated inside the unit box, so truncation is
    # far below the comparison tolerance
    mu0 = np.array([0.45, 0.55])
    var0 = np.array([0.0036, 0.0049])
    mu1 = np.array([0.5, 0.5])
    var1 = np.array([0.005, 0.006])

    def logp(pts):
        return sum(-0.5 * ((pts[:, d] - mu0[d]) ** 2 / var0[d]
                           + math.log(2 * math.pi * var0[d]))
                   for d in range(2))

    def logq(pts):
        return sum(-0.5 * ((pts[:, d] - mu1[d]) ** 2 / var1[d]
                           + math.log(2 * math.pi * var1[d]))
                   for d in range(2))

    closed = sum(0.5 * (var0[d] / var1[d]
                        + (mu1[d] - mu0[d]) ** 2 / var1[d]
                        - 1.0 + math.log(var1[d] / var0[d]))
                 for d in range(2))
    got = kl_quadrature(logp, logq, obs_dim=2, nodes=64)
    assert abs(got - closed) < 1e-6


def test_kl_quadrature_self_is_zero():
    beta = np.array([[5.0, 5.0], [2.0, 8.0]])

    def logp(pts):
        return beta_product_log_density(pts, beta)

    assert abs(kl_quadrature(logp, logp, obs_dim=2)) < 1e-8


def test_kl_observation_moment_matched_is_small_positive():
    # a Gaussian sharing Beta(5,5) moments is close but not identical, so
    # the divergence is small yet strictly positive
    a, b = 5.0, 5.0
    mu, var = beta_moments(a, b)
    beta = np.array([[a, b], [a, b]])
    kl = kl_observation(beta, np.full(2, mu), np.eye(2) * var)
    assert 0.0 < kl < 0.1


def test_kl_observation_far_model_hits_infinity_sentinel():
    beta = np.array([[5.0, 5.0], [5.0, 5.0]])
    kl = kl_observation(beta, np.full(2, 50.0), np.eye(2) * 1e-4)
    assert math.isinf(kl) and kl > 0


def test_kl_observation_nonnegative_on_random_pairs():
    rng = np.random.default_rng(25)
    for _ in range(20):
        beta = rng.uniform(1.0, 9.0, size=(2, 2))
        mean = rng.uniform(0.2, 0.8, size=2)
        var = rng.uniform(0.005, 0.05, size=2)
        kl = kl_observation(beta, mean, np.diag(var))
        assert kl > -1e-9


def test_kl_observation_mc_agrees_with_quadrature():
    rng = np.random.default_rng(26)
    beta = np.array([[4.0, 6.0], [7.0, 3.0]])
    mean = np.array([0.4, 0.65])
    cov = np.diag([0.02, 0.03])
    quad = kl_observation(beta, mean, cov, method="quadrature")
    mc = kl_observation(beta, mean, cov, method="mc", mc_samples=200_000,
                        rng=rng)
    assert abs(mc - quad) < 0.02


def test_beta_product_log_density_values():
    # Beta(1,1) is uniform: log density zero everywhere inside the box
    pts = np.array([[0.3, 0.7], [0.5, 0.5]])
    assert np.allclose(beta_product_log_density(pts, np.ones((2, 2))), 0.0)
    # Beta(2,1) has density 2x
    one = np.array([[0.25, 0.5]])
    got = beta_product_log_density(one, np.array([[2.0, 1.0], [1.0, 1.0]]))
    assert abs(got[0] - math.log(2 * 0.25)) < 1e-12


# ------------------------------------------------------------- full report

def test_evaluate_model_aligned_report():
    env = bundled_env()
    report = evaluate_model(moment_matched_model(env), env)
    assert report.state_matching == (0, 1, 2)
    assert report.l1_transition < 1e-12
    assert report.l1_transition_total < 1e-12
    assert len(report.kl_per_state) == 3
    # skewed Beta states keep a visible gap to any Gaussian; symmetric ones
    # sit much closer
    for kl in report.kl_per_state.values():
        assert 0.0 <= kl < 0.5


def test_evaluate_model_invariant_to_learned_relabeling():
    env = bundled_env()
    rng = np.random.default_rng(27)
    learned = moment_matched_model(env)
    noisy = PomdpModel(
        3, 2, 2,
        learned.transitions,
        learned.obs_means + rng.normal(scale=0.05, size=(3, 2)),
        learned.obs_covs * 1.3,
        initial_dist=learned.initial_dist)
    base = evaluate_model(noisy, env)
    shuffled = evaluate_model(relabel_states(noisy, [2, 0, 1]), env)
    assert abs(base.l1_transition - shuffled.l1_transition) < 1e-9
    for k in base.kl_per_state:
        assert abs(base.kl_per_state[k] - shuffled.kl_per_state[k]) < 1e-9
