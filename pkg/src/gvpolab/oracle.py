"""Brute-force ground truth by full enumeration of the response space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .policy import PolicyParams, flat_policy
from .taskenv import TaskSpec


class SupportViolation(ValueError):
    """Sampling distribution misses responses the auxiliary policy can produce."""


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")


def as_probs(dist, task: TaskSpec | None = None) -> np.ndarray:
    """Probability table from a policy or an explicit ``(P, N)`` array (rows may contain zeros)."""
    if isinstance(dist, PolicyParams):
        return dist.probs()
    probs = np.atleast_2d(np.asarray(dist, dtype=np.float64))
    if task is not None and probs.shape != task.shape:
        raise ValueError(f"distribution shape {probs.shape} != task shape {task.shape}")
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-12, rtol=0):
        raise ValueError("distribution rows must be non-negative and sum to 1")
    return probs


def check_support(sample_probs: np.ndarray, aux_probs: np.ndarray) -> None:
    """Require ``{y: aux(y|x) > 0}`` to be a subset of ``{y: sample(y|x) > 0}`` for every prompt."""
    holes = (aux_probs > 0) & (sample_probs <= 0)
    if np.any(holes):
        x, y = np.argwhere(holes)[0]
        raise SupportViolation(
            f"sampling distribution has zero mass on prompt {x}, response {y} "
            f"where the auxiliary policy has mass {aux_probs[x, y]:.3g}"
        )


@dataclass(frozen=True)
class OptimalPolicySolution:
    log_partition: np.ndarray  # (P,)
    log_probs: np.ndarray  # (P, N)
    beta: float

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def policy(self) -> PolicyParams:
        """Flat policy whose logits are ``log pi*``."""
        return flat_policy(self.log_probs)


def partition(ref: PolicyParams, task: TaskSpec, beta: float, x: int) -> float:
    """``log Z(x) = logsumexp_y(log ref(y|x) + R(x, y) / beta)``."""
    _check_beta(beta)
    return float(_logsumexp(ref.log_probs()[x] + task.rewards[x] / beta))


def optimal_policy(ref: PolicyParams, task: TaskSpec, beta: float) -> OptimalPolicySolution:
    _check_beta(beta)
    tilted = ref.log_probs() + task.rewards / beta
    log_z = _logsumexp(tilted, axis=1)
    return OptimalPolicySolution(log_z, tilted - log_z[:, None], float(beta))


def implicit_reward(
    theta: PolicyParams, theta_prime: PolicyParams, beta: float, x: int, y: int, log_partition: float = 0.0
) -> float:
    """``beta * log(pi_theta / pi_theta') + beta * log Z``."""
    ratio = theta.log_probs()[x, y] - theta_prime.log_probs()[x, y]
    return float(beta * ratio + beta * log_partition)


def kl(p, q) -> float:
    """``sum p log(p/q)`` with ``0 log 0 = 0``; clipped at 0 against rounding."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise SupportViolation("p has mass where q has none")
    return max(0.0, float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


def mean_kl(p_table, q_table) -> float:
    return float(np.mean([kl(p, q) for p, q in zip(p_table, q_table)]))


def exact_gvpo_loss(
    theta: PolicyParams,
    theta_prime: PolicyParams,
    pi_s,
    task: TaskSpec,
    beta: float,
    include_log_partition: bool = False,
) -> float:
    """Prompt-mean of ``E_s[((R_theta - E_s R_theta) - (R - E_s R))^2]``.

    ``R_theta = beta * log(pi_theta / pi_theta')``, plus ``beta * log Z`` when
    ``include_log_partition`` is set (the result is the same either way).
    """
    _check_beta(beta)
    ps = as_probs(pi_s, task)
    aux = theta_prime.probs()
    check_support(ps, aux)
    implicit = beta * (theta.log_probs() - theta_prime.log_probs())
    if include_log_partition:
        log_z = optimal_policy(theta_prime, task, beta).log_partition
        implicit = implicit + beta * log_z[:, None]
    losses = []
    for x in range(task.num_prompts):
        w = ps[x]
        ri = implicit[x] - np.dot(w, implicit[x])
        r = task.rewards[x] - np.dot(w, task.rewards[x])
        losses.append(np.dot(w, (ri - r) ** 2))
    return float(np.mean(losses))


def finite_diff_grad(loss_fn: Callable[[PolicyParams], float], params: PolicyParams, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` in every coordinate of the parameter vector."""
    if not 1e-8 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-8, 1e-3]")
    v = params.vector()
    grad = np.empty_like(v)
    for j in range(v.size):
        orig = v[j]
        v[j] = orig + h
        f_plus = loss_fn(params.with_theta(v))
        v[j] = orig - h
        f_minus = loss_fn(params.with_theta(v))
        v[j] = orig
        grad[j] = (f_plus - f_minus) / (2 * h)
    return grad
