"""Forward-backward, sufficient statistics, M-step, and the full EM loop.

The forward-backward checks compare against a brute-force oracle that sums
over every latent state sequence explicitly, so any indexing or scaling slip
in the recursions shows up as a hard numeric mismatch.
"""
import itertools
import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from fuzzy_pomdp.model import PomdpModel, Trajectory, relabel_states
from fuzzy_pomdp.em import (
    EmConfig,
    SufficientCounts,
    accumulate_counts,
    e_step,
    forward_backward,
    m_step_standard,
    run_em,
)

from conftest import random_dataset, random_model


def enumeration_posteriors(model: PomdpModel, traj: Trajectory):
    """Exact smoothing by summing over all |S|^T latent sequences."""
    T = len(traj.observations)
    S = model.num_states
    logb = np.empty((T, S))
    for t in range(T):
        for s in range(S):
            logb[t, s] = stats.multivariate_normal.logpdf(
                traj.observations[t], model.obs_means[s], model.obs_covs[s])
    log_init = np.log(model.initial_dist)
    log_trans = np.log(model.transitions)

    seqs = list(itertools.product(range(S), repeat=T))
    logp = np.empty(len(seqs))
    for i, seq in enumerate(seqs):
        lp = log_init[seq[0]] + logb[0, seq[0]]
        for t in range(1, T):
            lp += log_trans[seq[t - 1], traj.actions[t - 1], seq[t]]
            lp += logb[t, seq[t]]
        logp[i] = lp
    total = logsumexp(logp)

    gamma = np.zeros((T, S))
    xi = np.zeros((max(T - 1, 0), S, S))
    for i, seq in enumerate(seqs):
        w = math.exp(logp[i] - total)
        for t in range(T):
            gamma[t, seq[t]] += w
        for t in range(T - 1):
            xi[t, seq[t], seq[t + 1]] += w
    return gamma, xi, total


# --------------------------------------------------------- forward-backward

def test_forward_backward_matches_enumeration():
    rng = np.random.default_rng(101)
    for _ in range(25):
        S = int(rng.integers(1, 4))
        T = int(rng.integers(1, 6))
        m = random_model(rng, num_states=S, num_actions=2, obs_dim=2)
        obs = rng.normal(size=(T, 2))
        acts = rng.integers(2, size=max(T - 1, 0))
        traj = Trajectory(observations=obs, actions=acts)
        post = forward_backward(m, traj)
        g, x, ll = enumeration_posteriors(m, traj)
        assert abs(post.log_likelihood - ll) < 1e-10
        assert np.allclose(post.gamma, g, atol=1e-10)
        if T > 1:
            assert np.allclose(post.xi, x, atol=1e-10)


def test_forward_backward_single_step():
    rng = np.random.default_rng(102)
    m = random_model(rng, num_states=3)
    traj = Trajectory(observations=rng.normal(size=(1, 2)),
                      actions=np.zeros(0, dtype=int))
    post = forward_backward(m, traj)
    assert post.gamma.shape == (1, 3)
    assert post.xi.shape == (0, 3, 3)
    # with one observation the posterior is just the normalized joint
    logj = np.array([math.log(m.initial_dist[s])
                     + stats.multivariate_normal.logpdf(
                         traj.observations[0], m.obs_means[s], m.obs_covs[s])
                     for s in range(3)])
    expect = np.exp(logj - logsumexp(logj))
    assert np.allclose(post.gamma[0], expect, atol=1e-12)
    assert abs(post.log_likelihood - logsumexp(logj)) < 1e-12


def test_forward_backward_survives_far_outliers():
    # scaling has to keep distant observations finite where a naive
    # unnormalized recursion underflows
    rng = np.random.default_rng(103)
    m = random_model(rng, num_states=2)
    obs = rng.normal(size=(60, 2)) + 40.0
    traj = Trajectory(observations=obs, actions=rng.integers(2, size=59))
    post = forward_backward(m, traj)
    assert np.isfinite(post.log_likelihood)
    assert np.allclose(post.gamma.sum(axis=1), 1.0, atol=1e-9)


def test_e_step_sums_per_trajectory_likelihoods():
    rng = np.random.default_rng(104)
    m = random_model(rng)
    ds = random_dataset(rng, m, n=3, horizon=5)
    posts, total = e_step(m, ds)
    assert len(posts) == 3
    assert abs(total - sum(p.log_likelihood for p in posts)) < 1e-9


# ------------------------------------------------------ count accumulation

def test_accumulate_counts_one_hot_posteriors():
    # degenerate (0/1) posteriors turn expected counts into literal tallies
    obs = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    acts = np.array([1, 0])
    ds = [Trajectory(observations=obs, actions=acts)]
    gamma = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    xi = np.zeros((2, 2, 2))
    xi[0, 0, 1] = 1.0  # t=0: state 0 -> 1 under action 1
    xi[1, 1, 1] = 1.0  # t=1: state 1 -> 1 under action 0

    class P:
        pass

    p = P()
    p.gamma, p.xi = gamma, xi
    c = accumulate_counts(ds, [p], num_actions=2)
    expect_trans = np.zeros((2, 2, 2))
    expect_trans[0, 1, 1] = 1.0
    expect_trans[1, 0, 1] = 1.0
    assert np.array_equal(c.trans, expect_trans)
    assert np.allclose(c.obs_weight, [1.0, 2.0])
    assert np.allclose(c.obs_sum[0], [0.0, 0.0])
    assert np.allclose(c.obs_sum[1], [3.0, 3.0])
    assert np.allclose(c.obs_outer[1],
                       np.outer([1.0, 1.0], [1.0, 1.0])
                       + np.outer([2.0, 2.0], [2.0, 2.0]))


def test_accumulate_counts_hand_spreadsheet():
    obs = np.array([[1.0], [3.0]])
    ds = [Trajectory(observations=obs, actions=np.array([0]))]
    gamma = np.array([[0.6, 0.4], [0.2, 0.8]])
    xi = np.array([[[0.1, 0.5], [0.1, 0.3]]])

    class P:
        pass

    p = P()
    p.gamma, p.xi = gamma, xi
    c = accumulate_counts(ds, [p], num_actions=1)
    assert np.allclose(c.trans[:, 0, :], xi[0])
    assert np.allclose(c.obs_weight, [0.8, 1.2])
    assert np.allclose(c.obs_sum[:, 0], [0.6 * 1 + 0.2 * 3, 0.4 * 1 + 0.8 * 3])
    assert np.allclose(c.obs_outer[:, 0, 0],
                       [0.6 * 1 + 0.2 * 9, 0.4 * 1 + 0.8 * 9])


def test_accumulate_counts_mass_conservation():
    rng = np.random.default_rng(105)
    m = random_model(rng, num_states=3)
    ds = random_dataset(rng, m, n=4, horizon=6)
    posts, _ = e_step(m, ds)
    c = accumulate_counts(ds, posts, m.num_actions)
    steps = sum(len(t.observations) for t in ds)
    trans_steps = sum(len(t.actions) for t in ds)
    assert abs(c.obs_weight.sum() - steps) < 1e-9
    assert abs(c.trans.sum() - trans_steps) < 1e-9
    assert np.all(c.trans >= 0) and np.all(c.obs_weight >= 0)


# ------------------------------------------------------------------ M-step

def _prev_model():
    return PomdpModel(
        num_states=2, num_actions=1, obs_dim=2,
        transitions=np.full((2, 1, 2), 0.5),
        obs_means=np.array([[5.0, 5.0], [-5.0, -5.0]]),
        obs_covs=np.stack([np.eye(2) * 3.0, np.eye(2) * 3.0]),
        initial_dist=np.array([0.5, 0.5]),
    )


def test_m_step_transition_row_normalization():
    prev = PomdpModel(
        num_states=3, num_actions=1, obs_dim=1,
        transitions=np.full((3, 1, 3), 1.0 / 3.0),
        obs_means=np.zeros((3, 1)),
        obs_covs=np.stack([np.eye(1)] * 3),
        initial_dist=np.full(3, 1.0 / 3.0),
    )
    trans = np.zeros((3, 1, 3))
    trans[0, 0] = [3.0, 1.0, 0.0]
    counts = SufficientCounts(trans=trans,
                              obs_weight=np.zeros(3),
                              obs_sum=np.zeros((3, 1)),
                              obs_outer=np.zeros((3, 1, 1)))
    out = m_step_standard(counts, prev, EmConfig())
    assert np.allclose(out.transitions[0, 0], [0.75, 0.25, 0.0])
    # zero-mass rows fall back to uniform
    assert np.allclose(out.transitions[1, 0], 1.0 / 3.0)
    assert np.allclose(out.transitions[2, 0], 1.0 / 3.0)
    # zero-mass states keep their previous observation parameters
    assert np.allclose(out.obs_means, prev.obs_means)


def test_m_step_observation_mean():
    counts = SufficientCounts(
        trans=np.ones((2, 1, 2)),
        obs_weight=np.array([2.0, 1.0]),
        obs_sum=np.array([[2.0, 4.0], [0.0, 0.0]]),
        obs_outer=np.stack([np.eye(2) * 10.0, np.eye(2)]),
    )
    out = m_step_standard(counts, _prev_model(), EmConfig())
    assert np.allclose(out.obs_means[0], [1.0, 2.0])


def test_m_step_covariance_matches_two_pass_oracle():
    rng = np.random.default_rng(106)
    pts = rng.normal(size=(40, 2))
    w = rng.uniform(0.1, 1.0, size=40)
    weight = w.sum()
    mu = (w[:, None] * pts).sum(axis=0) / weight
    centered = pts - mu
    two_pass = (w[:, None, None] * np.einsum("ni,nj->nij", centered, centered)
                ).sum(axis=0) / weight

    counts = SufficientCounts(
        trans=np.ones((2, 1, 2)),
        obs_weight=np.array([weight, 1.0]),
        obs_sum=np.stack([(w[:, None] * pts).sum(axis=0), np.zeros(2)]),
        obs_outer=np.stack(
            [(w[:, None, None] * np.einsum("ni,nj->nij", pts, pts)).sum(axis=0),
             np.eye(2)]),
    )
    cfg = EmConfig(covariance_ridge=1e-6)
    out = m_step_standard(counts, _prev_model(), cfg)
    # well-conditioned: the update is the exact two-pass estimate
    assert np.allclose(out.obs_covs[0], two_pass, atol=1e-12)
    assert np.array_equal(out.obs_covs[0], out.obs_covs[0].T)


# ----------------------------------------------------------------- run_em

def test_run_em_loglik_monotone():
    rng = np.random.default_rng(107)
    for trial in range(5):
        truth = random_model(rng, num_states=2, obs_dim=2, mean_scale=2.0)
        ds = random_dataset(rng, truth, n=4, horizon=8)
        init = random_model(rng, num_states=2, obs_dim=2)
        res = run_em(ds, init, EmConfig(max_iterations=30))
        trace = np.asarray(res.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-8), f"trial {trial}: {trace}"


def test_run_em_converged_flag_and_iterations():
    rng = np.random.default_rng(108)
    truth = random_model(rng, num_states=2)
    ds = random_dataset(rng, truth, n=3, horizon=6)
    init = random_model(rng, num_states=2)
    res = run_em(ds, init, EmConfig(max_iterations=200, loglik_tolerance=1e-4))
    assert res.converged
    # trace carries the pre-update likelihood plus one entry per iteration
    assert len(res.loglik_trace) == res.iterations + 1
    assert res.iterations < 200
    capped = run_em(ds, init, EmConfig(max_iterations=2))
    assert capped.iterations == 2 and not capped.converged


def test_run_em_deterministic():
    rng = np.random.default_rng(109)
    truth = random_model(rng)
    ds = random_dataset(rng, truth, n=3, horizon=6)
    init = random_model(rng)
    r1 = run_em(ds, init, EmConfig(max_iterations=10))
    r2 = run_em(ds, init, EmConfig(max_iterations=10))
    assert np.array_equal(r1.model.transitions, r2.model.transitions)
    assert np.array_equal(r1.model.obs_means, r2.model.obs_means)
    assert r1.loglik_trace == r2.loglik_trace


def test_run_em_equivariant_under_state_relabeling():
    # permuting the init permutes the result; the likelihood path is identical
    rng = np.random.default_rng(110)
    truth = random_model(rng, num_states=3)
    ds = random_dataset(rng, truth, n=3, horizon=6)
    init = random_model(rng, num_states=3)
    perm = [2, 0, 1]
    res = run_em(ds, init, EmConfig(max_iterations=8))
    res_p = run_em(ds, relabel_states(init, perm), EmConfig(max_iterations=8))
    assert np.allclose(res_p.loglik_trace, res.loglik_trace, atol=1e-8)
    assert np.allclose(res_p.model.obs_means,
                       relabel_states(res.model, perm).obs_means, atol=1e-8)
    assert np.allclose(res_p.model.transitions,
                       relabel_states(res.model, perm).transitions, atol=1e-8)


def test_run_em_single_state_degenerates_to_gaussian_fit():
    rng = np.random.default_rng(111)
    obs = rng.normal(loc=1.5, scale=0.7, size=(30, 2))
    ds = [Trajectory(observations=obs, actions=rng.integers(1, size=29))]
    init = PomdpModel(
        num_states=1, num_actions=1, obs_dim=2,
        transitions=np.ones((1, 1, 1)),
        obs_means=np.zeros((1, 2)),
        obs_covs=np.eye(2)[None],
        initial_dist=np.ones(1),
    )
    res = run_em(ds, init, EmConfig(max_iterations=5))
    posts, _ = e_step(res.model, ds)
    assert np.allclose(posts[0].gamma, 1.0)
    assert np.allclose(res.model.obs_means[0], obs.mean(axis=0), atol=1e-9)
    emp_cov = np.cov(obs.T, bias=True)
    assert np.allclose(res.model.obs_covs[0], emp_cov, atol=1e-9)
