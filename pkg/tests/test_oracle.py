import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gvpolab import schemes
from gvpolab.oracle import (
    SupportViolation,
    exact_gvpo_loss,
    finite_diff_grad,
    implicit_reward,
    kl,
    mean_kl,
    optimal_policy,
    partition,
)
from gvpolab.policy import flat_policy, init_uniform, random_policy
from gvpolab.taskenv import TaskSpec, make_bandit

from conftest import KL_STAR_UNIFORM_TOY, LOG_Z_TOY, PI_STAR_TOY, PI_STAR_TOY_HALF_BETA


def test_partition_toy(toy_task, toy_uniform):
    assert partition(toy_uniform, toy_task, 1.0, 0) == pytest.approx(LOG_Z_TOY, abs=1e-14)


def test_partition_zero_rewards(rng):
    task = make_bandit(1, 5, {"type": "explicit", "table": [[0.0] * 5]})
    assert partition(random_policy(task, rng), task, 0.3, 0) == pytest.approx(0.0, abs=1e-15)


def test_partition_large_beta(default_task):
    ref = init_uniform(default_task)
    assert abs(partition(ref, default_task, 1e6, 0)) < 1e-6


@pytest.mark.parametrize("beta", [0.0, -1.0])
def test_rejects_non_positive_beta(toy_task, toy_uniform, beta):
    with pytest.raises(ValueError):
        partition(toy_uniform, toy_task, beta, 0)
    with pytest.raises(ValueError):
        optimal_policy(toy_uniform, toy_task, beta)


def test_optimal_policy_toy(toy_task, toy_uniform):
    sol = optimal_policy(toy_uniform, toy_task, 1.0)
    a, b = PI_STAR_TOY
    np.testing.assert_allclose(sol.probs, [[a, b, b]], atol=1e-14)
    half = optimal_policy(toy_uniform, toy_task, 0.5)
    assert half.probs[0, 0] == pytest.approx(PI_STAR_TOY_HALF_BETA, abs=1e-14)


def test_constant_rewards_give_reference(rng):
    task = make_bandit(2, 6, {"type": "explicit", "table": [[0.7] * 6]})
    ref = random_policy(task, rng)
    np.testing.assert_allclose(optimal_policy(ref, task, 0.2).probs, ref.probs(), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.05, 0.1, 1.0, 2.0]))
def test_optimal_policy_fixed_point(seed, beta):
    rng = np.random.default_rng(seed)
    task = make_bandit(3, 7, {"type": "uniform"}, seed)
    ref = random_policy(task, rng, scale=2.0)
    sol = optimal_policy(ref, task, beta)
    expected = ref.probs() * np.exp(task.rewards / beta - sol.log_partition[:, None])
    np.testing.assert_allclose(sol.probs, expected, rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(sol.probs.sum(axis=1), 1.0, atol=1e-12)


def test_implicit_reward_at_reference(toy_uniform):
    for y in range(3):
        assert implicit_reward(toy_uniform, toy_uniform, 0.7, 0, y, log_partition=1.3) == pytest.approx(0.7 * 1.3)


def test_implicit_reward_round_trip(default_task, rng):
    ref = random_policy(default_task, rng)
    sol = optimal_policy(ref, default_task, 0.5)
    star = sol.policy()
    for x in range(8):
        for y in range(16):
            r = implicit_reward(star, ref, 0.5, x, y, sol.log_partition[x])
            assert r == pytest.approx(default_task.rewards[x, y], abs=1e-10)


def test_implicit_reward_linear_in_beta(rng, default_task):
    a, b = random_policy(default_task, rng), random_policy(default_task, rng)
    assert implicit_reward(a, b, 2.0, 1, 3) == pytest.approx(2 * implicit_reward(a, b, 1.0, 1, 3), rel=1e-15)


def test_kl_examples():
    p = np.array(PI_STAR_TOY + (PI_STAR_TOY[1],))
    assert kl(p, p) == 0.0
    assert kl(p, np.full(3, 1 / 3)) == pytest.approx(KL_STAR_UNIFORM_TOY, abs=1e-14)
    assert kl([0.0, 0.5, 0.5], [0.2, 0.4, 0.4]) == pytest.approx(math.log(1.25))


def test_kl_support_violation():
    with pytest.raises(SupportViolation):
        kl([0.5, 0.5], [1.0, 0.0])


def test_kl_nonnegative_sweep():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 10))
        p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        assert kl(p, q) >= 0.0
    assert mean_kl(rng.dirichlet(np.ones(4), size=3), rng.dirichlet(np.ones(4), size=3)) >= 0.0


def test_exact_loss_toy(toy_task, toy_uniform):
    assert exact_gvpo_loss(toy_uniform, toy_uniform, toy_uniform, toy_task, 1.0) == pytest.approx(2 / 9, abs=1e-15)


def test_exact_loss_zero_at_optimum(default_task, rng):
    ref = random_policy(default_task, rng)
    star = optimal_policy(ref, default_task, 0.3).policy()
    assert exact_gvpo_loss(star, ref, ref, default_task, 0.3) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 50))
def test_exact_loss_properties(seed, shift):
    rng = np.random.default_rng(seed)
    task = make_bandit(3, 6, {"type": "uniform"}, seed)
    theta, aux, ps = (random_policy(task, rng) for _ in range(3))
    loss = exact_gvpo_loss(theta, aux, ps, task, 0.8)
    assert loss >= 0
    c = rng.uniform(-shift - 1, shift + 1, size=(3, 1))
    shifted = TaskSpec("bandit", 3, 6, task.rewards + c)
    assert exact_gvpo_loss(theta, aux, ps, shifted, 0.8) == pytest.approx(loss, rel=1e-9, abs=1e-12)
    with_z = exact_gvpo_loss(theta, aux, ps, task, 0.8, include_log_partition=True)
    assert with_z == pytest.approx(loss, rel=1e-12, abs=1e-14)


def test_exact_loss_support_condition(toy_task, toy_uniform):
    with pytest.raises(SupportViolation):
        exact_gvpo_loss(toy_uniform, toy_uniform, [[0.5, 0.5, 0.0]], toy_task, 1.0)
    assert exact_gvpo_loss(toy_uniform, toy_uniform, [[0.2, 0.3, 0.5]], toy_task, 1.0) > 0


def test_finite_diff_examples(rng):
    pol = flat_policy(rng.uniform(-1, 1, size=(2, 4)))
    np.testing.assert_allclose(finite_diff_grad(lambda p: float(np.sum(p.theta**2)), pol), 2 * pol.vector(), atol=1e-8)
    np.testing.assert_allclose(finite_diff_grad(lambda p: 3.0, pol), 0.0, atol=1e-9)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda p: 0.0, pol, h=1e-2)


def test_finite_diff_matches_exact_gradient(rng):
    task = make_bandit(3, 5, {"type": "uniform"}, 1)
    theta, aux, ps = (random_policy(task, rng) for _ in range(3))
    beta = 0.7
    _, grad = schemes.exact_gvpo_gradient(theta, aux, ps, task, beta)
    # the trainer objective is the prompt sum of half the squared deviation; the oracle loss is the prompt mean
    fd = finite_diff_grad(lambda q: exact_gvpo_loss(q, aux, ps, task, beta), theta)
    np.testing.assert_allclose(grad, fd * task.num_prompts / 2, rtol=1e-5, atol=1e-8)
