"""Per-response gradient weights for SFT, GRPO, DPO and GVPO.

Every scheme's update has the form ``grad = -sum_groups sum_i w_i * grad log pi(y_i|x)``.
Group-level functions take a :class:`GroupBatch`; the ``*_array`` helpers do the
same arithmetic on ``(..., k)`` arrays so the trainer can batch over prompts.

Exact mode replaces the group by the whole response space weighted by the
sampling distribution.  The ``exact_*`` functions return an :class:`ExactTerms`
whose ``coef`` table satisfies ``grad = -theta.weighted_grad(coef)`` (plus
``extra_grad`` for GRPO's KL penalty).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .oracle import as_probs, check_support
from .policy import PolicyParams
from .taskenv import TaskSpec

SCHEMES = ("SFT", "GRPO", "DPO", "GVPO")


class SchemeError(ValueError):
    pass


@dataclass
class GroupBatch:
    prompt: int
    responses: np.ndarray
    rewards: np.ndarray
    logp_theta: np.ndarray
    logp_aux: np.ndarray
    logp_old: np.ndarray | None = None
    weights_source: str = "unspecified"

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=np.int64)
        k = self.responses.shape[0]
        for name in ("rewards", "logp_theta", "logp_aux", "logp_old"):
            val = getattr(self, name)
            if val is None:
                continue
            val = np.asarray(val, dtype=np.float64)
            if val.shape != (k,):
                raise SchemeError(f"{name} has shape {val.shape}, expected ({k},)")
            if not np.all(np.isfinite(val)):
                raise SchemeError(f"{name} has non-finite entries")
            setattr(self, name, val)
        if self.logp_old is None:
            self.logp_old = self.logp_theta.copy()

    @property
    def k(self) -> int:
        return self.responses.shape[0]

    @classmethod
    def from_policies(cls, task: TaskSpec, x: int, responses, theta: PolicyParams, aux: PolicyParams,
                      old: PolicyParams | None = None, source: str = "unspecified") -> "GroupBatch":
        ys = np.asarray(responses, dtype=np.int64)
        old_lp = None if old is None else old.log_probs()[x, ys]
        return cls(x, ys, task.rewards[x, ys], theta.log_probs()[x, ys], aux.log_probs()[x, ys], old_lp, source)


@dataclass
class WeightVector:
    weights: np.ndarray
    scheme: str
    zero_sum: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise SchemeError("weights must be finite")


@dataclass(frozen=True)
class GVPOConfig:
    beta: float = 0.1

    def __post_init__(self):
        if not self.beta > 0:
            raise SchemeError("beta must be positive")


@dataclass(frozen=True)
class GRPOConfig:
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.04
    std_floor: float = 1e-6
    use_std_normalization: bool = True
    ppo_min: bool = False  # min(r*A, clip(r)*A) instead of clip(r)*A

    def __post_init__(self):
        if not 0 < self.clip_epsilon <= 1:
            raise SchemeError("clip_epsilon must lie in (0, 1]")
        if self.kl_coefficient < 0:
            raise SchemeError("kl_coefficient must be non-negative")
        if not self.std_floor > 0:
            raise SchemeError("std_floor must be positive")


def _need_group(k: int) -> None:
    if k < 2:
        raise SchemeError("group schemes need k >= 2 responses")


# ---------------------------------------------------------------- GVPO

def gvpo_weight_array(rewards, log_ratio, beta: float) -> np.ndarray:
    """``beta * [(R - mean R) - beta * (l - mean l)]`` along the last axis."""
    rewards = np.asarray(rewards, dtype=np.float64)
    log_ratio = np.asarray(log_ratio, dtype=np.float64)
    return kernels.centered_weights(rewards - beta * log_ratio, beta)


def gvpo_weights(group: GroupBatch, config: GVPOConfig) -> WeightVector:
    _need_group(group.k)
    w = gvpo_weight_array(group.rewards, group.logp_theta - group.logp_aux, config.beta)
    return WeightVector(w, "GVPO", zero_sum=True)


def _centered_residual(group: GroupBatch, beta: float) -> np.ndarray:
    # (beta*l_i - mean) - (R_i - mean): centered implicit minus centered actual reward
    implicit = beta * (group.logp_theta - group.logp_aux)
    return (implicit - implicit.mean()) - (group.rewards - group.rewards.mean())


def gvpo_loss_mse_form(group: GroupBatch, config: GVPOConfig) -> float:
    _need_group(group.k)
    d = _centered_residual(group, config.beta)
    return 0.5 * float(np.dot(d, d))


def gvpo_loss_variance_form(group: GroupBatch, config: GVPOConfig) -> float:
    """``1/2 sum [(beta*l_i - R_i) - mean(beta*l - R)]^2``; same value as the MSE form."""
    _need_group(group.k)
    e = config.beta * (group.logp_theta - group.logp_aux) - group.rewards
    e = e - e.mean()
    return 0.5 * float(np.dot(e, e))


def gvpo_loss_nll_form(group: GroupBatch, config: GVPOConfig, theta: PolicyParams) -> tuple[float, np.ndarray]:
    """Frozen-weight loss ``-sum_i w_i log pi(y_i|x)`` and its gradient w.r.t. ``theta``.

    ``group.logp_theta`` must be the log-probabilities of ``theta``.
    """
    w = gvpo_weights(group, config).weights
    value = -float(np.dot(w, group.logp_theta))
    coef = np.zeros((theta.num_prompts, theta.num_responses))
    np.add.at(coef[group.prompt], group.responses, w)
    return value, -theta.weighted_grad(coef).ravel()


# ---------------------------------------------------------------- GRPO

def grpo_weight_array(rewards, logp_theta, logp_old, config: GRPOConfig) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    adv = rewards - rewards.mean(axis=-1, keepdims=True)
    if config.use_std_normalization:
        adv = adv / np.maximum(rewards.std(axis=-1, keepdims=True), config.std_floor)
    ratio = np.exp(np.asarray(logp_theta) - np.asarray(logp_old))
    clipped = np.clip(ratio, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon)
    if config.ppo_min:
        return np.minimum(ratio * adv, clipped * adv)
    return clipped * adv


def grpo_weights(group: GroupBatch, config: GRPOConfig) -> WeightVector:
    _need_group(group.k)
    return WeightVector(grpo_weight_array(group.rewards, group.logp_theta, group.logp_old, config), "GRPO")


def kl_penalty_gradient(theta: PolicyParams, ref: PolicyParams, coefficient: float) -> np.ndarray:
    """Exact gradient of ``coefficient * sum_x KL(pi_theta(.|x) || pi_ref(.|x))``."""
    lp = theta.log_probs()
    coef = np.exp(lp) * (lp - ref.log_probs())
    return coefficient * theta.weighted_grad(coef).ravel()


def kl_penalty_value(theta: PolicyParams, ref: PolicyParams) -> float:
    lp = theta.log_probs()
    return float(np.sum(np.exp(lp) * (lp - ref.log_probs())))


# ---------------------------------------------------------------- DPO

@dataclass(frozen=True)
class DPOPair:
    winner: int
    loser: int
    w_w: float
    w_l: float
    loss: float


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def _log_sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))


def dpo_weights(group: GroupBatch, i_w: int, i_l: int, beta: float) -> DPOPair:
    """Weights for the pair ``(responses[i_w], responses[i_l])``; ``logp_aux`` plays the reference."""
    if group.rewards[i_w] == group.rewards[i_l]:
        raise SchemeError("DPO pairs need strictly different rewards")
    if group.rewards[i_w] < group.rewards[i_l]:
        raise SchemeError("winner must have the higher reward")
    lw = group.logp_theta[i_w] - group.logp_aux[i_w]
    ll = group.logp_theta[i_l] - group.logp_aux[i_l]
    w_w = float(_sigmoid(beta * (ll - lw)))
    return DPOPair(int(i_w), int(i_l), w_w, -w_w, -float(_log_sigmoid(beta * (lw - ll))))


def dpo_pairs(group: GroupBatch) -> list[tuple[int, int]]:
    """All (winner, loser) index pairs with strictly different rewards; ties skipped."""
    r = group.rewards
    return [(i, j) for i in range(group.k) for j in range(group.k) if r[i] > r[j]]


def dpo_pair_matrix(rewards, log_ratio, beta: float):
    """Batched pair terms over ``(..., k)`` groups.

    Returns ``(coef, loss, num_pairs)`` where ``coef[..., i]`` sums the pair
    weights landing on member ``i`` (``w_w`` as winner, ``w_l`` as loser).
    """
    r = np.asarray(rewards, dtype=np.float64)
    lr = np.asarray(log_ratio, dtype=np.float64)
    win = (r[..., :, None] > r[..., None, :]).astype(np.float64)  # [i, j]: i beats j
    margin = beta * (lr[..., :, None] - lr[..., None, :])
    w_w = _sigmoid(-margin) * win
    coef = w_w.sum(axis=-1) - w_w.sum(axis=-2)
    loss = (-_log_sigmoid(margin) * win).sum(axis=(-2, -1))
    return coef, loss, win.sum(axis=(-2, -1))


# ---------------------------------------------------------------- SFT

def sft_target_index(rewards, responses) -> int:
    """Group index of the highest-reward response; ties go to the lowest response id."""
    rewards = np.asarray(rewards)
    responses = np.asarray(responses)
    best = np.flatnonzero(rewards == rewards.max())
    return int(best[np.argmin(responses[best])])


def sft_weights(group: GroupBatch) -> tuple[int, WeightVector]:
    return sft_target_index(group.rewards, group.responses), WeightVector([1.0], "SFT")


# ---------------------------------------------------------------- assembly

def assemble_gradient(weight_vectors: Sequence[WeightVector], grads: Sequence) -> np.ndarray:
    """``-sum_groups sum_i w_i * grads[g][i]`` in fixed group order."""
    if len(weight_vectors) != len(grads):
        raise SchemeError("one gradient list per weight vector required")
    total = None
    for wv, g in zip(weight_vectors, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != wv.weights.shape[0]:
            raise SchemeError(f"{wv.weights.shape[0]} weights but gradient stack of shape {g.shape}")
        if total is None:
            total = np.zeros(g.shape[1])
        elif g.shape[1] != total.shape[0]:
            raise SchemeError("gradient dimension mismatch between groups")
        for w, gi in zip(wv.weights, g):
            total -= w * gi
    if total is None:
        raise SchemeError("nothing to assemble")
    return total


# ---------------------------------------------------------------- exact mode

@dataclass
class ExactTerms:
    loss: float
    coef: np.ndarray | None = None
    extra_grad: np.ndarray | None = None
    grad: np.ndarray | None = None  # precomputed by a fused kernel; overrides coef
    decomposition: "Decomposition | None" = None

    def gradient(self, theta: PolicyParams) -> np.ndarray:
        if self.grad is not None:
            g = self.grad.ravel().copy()
        else:
            g = -theta.weighted_grad(self.coef).ravel()
        if self.extra_grad is not None:
            g = g + self.extra_grad
        return g


@dataclass(frozen=True)
class Decomposition:
    advantage_term: float
    cov_term: float
    var_term: float
    combined: float


def _sample_stats(sample_probs, values):
    # centered under pi_s; anchoring on the first column makes constant rows exactly zero
    values = values - values[:, :1]
    return values - (sample_probs * values).sum(axis=1, keepdims=True)


def _checked(pi_s, task: TaskSpec, aux: PolicyParams, validate: bool) -> np.ndarray:
    if not validate:
        return pi_s
    ps = as_probs(pi_s, task)
    check_support(ps, aux.probs())
    return ps


def exact_gvpo_terms(theta: PolicyParams, theta_prime: PolicyParams, pi_s, task: TaskSpec, beta: float,
                     validate: bool = True) -> ExactTerms:
    """Loss ``sum_x 1/2 E_s[D^2]`` and coefficients ``pi_s * w`` over the full response space.

    For flat policies the fused kernel also fills ``decomposition`` (meaningful
    at beta = 1).  ``validate=False`` skips the normalization and support checks
    for callers that already ran them.
    """
    ps = _checked(pi_s, task, theta_prime, validate)
    if theta.kind == "flat":
        loss, grad, t = kernels.exact_gvpo_flat(theta.theta, theta_prime.log_probs(), ps, task.rewards, beta)
        a, c, v = (float(val) for val in t)
        decomp = Decomposition(a, c, v, -2.0 * (a + c - 0.5 * v))
        return ExactTerms(loss, grad=grad, decomposition=decomp)
    d = _sample_stats(ps, beta * (theta.log_probs() - theta_prime.log_probs()) - task.rewards)
    return ExactTerms(0.5 * float((ps * d * d).sum()), -beta * ps * d)


def exact_gvpo_gradient(theta: PolicyParams, theta_prime: PolicyParams, pi_s, task: TaskSpec, beta: float):
    """``(loss, grad)`` of the summed exact GVPO objective ``sum_x 1/2 E_s[D^2]``."""
    terms = exact_gvpo_terms(theta, theta_prime, pi_s, task, beta)
    return terms.loss, terms.gradient(theta)


def gvpo_loss_decomposed(theta: PolicyParams, theta_prime: PolicyParams, pi_s, task: TaskSpec,
                         beta: float = 1.0, validate: bool = True) -> Decomposition:
    """Prompt-mean advantage, covariance and variance terms under ``y ~ pi_s`` (beta = 1 only).

    ``combined = -2 * (adv + cov - var / 2)`` differs from the exact MSE loss by a
    constant in ``theta``.
    """
    if beta != 1.0:
        raise SchemeError("the decomposition is defined at beta = 1 only")
    ps = _checked(pi_s, task, theta_prime, validate)
    lt = _sample_stats(ps, theta.log_probs())
    la = _sample_stats(ps, theta_prime.log_probs())
    adv_c = _sample_stats(ps, task.rewards)
    adv = float(np.mean((ps * adv_c * theta.log_probs()).sum(axis=1)))
    cov = float(np.mean((ps * lt * la).sum(axis=1)))
    var = float(np.mean((ps * lt * lt).sum(axis=1)))
    return Decomposition(adv, cov, var, -2.0 * (adv + cov - 0.5 * var))


def exact_ablation_terms(theta: PolicyParams, theta_prime: PolicyParams, pi_s, task: TaskSpec,
                         drop_var: bool = False, drop_cov: bool = False,
                         entropy_coef: float | None = None, validate: bool = True) -> ExactTerms:
    """Exact beta=1 GVPO with regularizers removed or the variance replaced by entropy.

    The optimized objective is ``1/2 sum_x c_x`` with
    ``c_x = -2 adv - 2 cov [unless drop_cov] + var [unless drop_var or entropy]
    - 2 * entropy_coef * H(pi_theta)``.
    """
    ps = _checked(pi_s, task, theta_prime, validate)
    lp = theta.log_probs()
    lt = _sample_stats(ps, lp)
    la = _sample_stats(ps, theta_prime.log_probs())
    adv_c = _sample_stats(ps, task.rewards)
    use_var = not drop_var and entropy_coef is None
    use_cov = not drop_cov
    # 1/2 grad(c_x) = -sum_y coef(y) grad log pi(y)
    coef = ps * (adv_c + (la if use_cov else 0.0) - (lt if use_var else 0.0))
    per_prompt = -2 * (ps * adv_c * lp).sum(axis=1)
    if use_cov:
        per_prompt -= 2 * (ps * lt * la).sum(axis=1)
    if use_var:
        per_prompt += (ps * lt * lt).sum(axis=1)
    if entropy_coef is not None:
        probs = np.exp(lp)
        per_prompt += 2 * entropy_coef * (probs * lp).sum(axis=1)
        # grad H = -sum_y pi(y) log pi(y) grad log pi(y)
        coef = coef - entropy_coef * probs * lp
    return ExactTerms(0.5 * float(per_prompt.sum()), coef)


def exact_grpo_terms(theta: PolicyParams, old: PolicyParams, ref: PolicyParams, pi_s, task: TaskSpec,
                     config: GRPOConfig) -> ExactTerms:
    ps = as_probs(pi_s, task)
    r = task.rewards
    mean = (ps * r).sum(axis=1, keepdims=True)
    adv = r - mean
    if config.use_std_normalization:
        std = np.sqrt((ps * adv * adv).sum(axis=1, keepdims=True))
        adv = adv / np.maximum(std, config.std_floor)
    ratio = np.exp(theta.log_probs() - old.log_probs())
    clipped = np.clip(ratio, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon)
    w = np.minimum(ratio * adv, clipped * adv) if config.ppo_min else clipped * adv
    coef = ps * w
    loss = -float((coef * theta.log_probs()).sum())
    extra = None
    if config.kl_coefficient > 0:
        loss += config.kl_coefficient * kl_penalty_value(theta, ref)
        extra = kl_penalty_gradient(theta, ref, config.kl_coefficient)
    return ExactTerms(loss, coef, extra)


def exact_dpo_terms(theta: PolicyParams, ref: PolicyParams, pi_s, task: TaskSpec, beta: float) -> ExactTerms:
    """Expected pair loss over ordered pairs of i.i.d. ``pi_s`` draws with distinct rewards."""
    ps = as_probs(pi_s, task)
    lr = theta.log_probs() - ref.log_probs()
    r = task.rewards
    coef = np.zeros(task.shape)
    loss = 0.0
    for x in range(task.num_prompts):
        win = r[x][:, None] > r[x][None, :]
        mass = np.outer(ps[x], ps[x]) * win
        total = mass.sum()
        if total <= 0:
            continue
        mass /= total
        margin = beta * (lr[x][:, None] - lr[x][None, :])
        w_w = _sigmoid(-margin) * mass
        coef[x] = beta * (w_w.sum(axis=1) - w_w.sum(axis=0))
        loss += float((-_log_sigmoid(margin) * mass).sum())
    return ExactTerms(loss, coef)


def exact_sft_terms(theta: PolicyParams, task: TaskSpec) -> ExactTerms:
    coef = np.zeros(task.shape)
    ids = np.arange(task.num_responses)
    for x in range(task.num_prompts):
        coef[x, sft_target_index(task.rewards[x], ids)] = 1.0
    return ExactTerms(-float((coef * theta.log_probs()).sum()), coef)
