"""Gradient-descent training loop over enumerable tasks.

One step: pick the sampling distribution (exact mode) or draw ``k`` responses
per prompt (Monte-Carlo mode), turn them into scheme weights, assemble the
unified-framework gradient, and take ``theta <- theta - lr * grad``.

Monte-Carlo group contributions are normalized per group so each step is an
estimate of the exact-mode gradient: GVPO groups are scaled by ``1/(k-1)``
(unbiased for the centered covariance), GRPO groups by ``1/k``, DPO by the
number of pairs.  Gradients are summed over prompts.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable

import numpy as np

from . import kernels, schemes
from .oracle import SupportViolation, as_probs, check_support, optimal_policy
from .policy import PolicyParams, flat_policy
from .schemes import GRPOConfig
from .taskenv import TaskSpec

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "loss", "grad_norm", "mean_reward", "kl_to_optimal", "kl_to_aux",
               "adv_term", "cov_term", "var_term")

SAMPLER_KINDS = ("old_policy", "reference", "uniform", "replay_mixture", "fixed")
GRADIENT_MODES = ("exact", "monte_carlo")
AUX_MODES = ("fixed_reference", "refresh_each_step")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _norm_name(value: str, allowed, field_name: str) -> str:
    # accepts OldPolicy / old_policy / old-policy spellings
    key = str(value).replace("-", "").replace("_", "").lower()
    for name in allowed:
        if name.replace("_", "") == key:
            return name
    raise ConfigError(field_name, f"{value!r} is not one of {', '.join(allowed)}")


@dataclass
class SamplerSpec:
    kind: str = "old_policy"
    historical_count: int = 0
    fresh_count: int = 0
    buffer_capacity: int = 64
    fixed_logits: list | None = None  # fixed: softmax of these (P, N) logits
    fixed_probs: list | None = None  # fixed: explicit table, zeros allowed

    def __post_init__(self):
        self.kind = _norm_name(self.kind, SAMPLER_KINDS, "sampler.kind")

    def validate(self, k: int) -> None:
        if self.kind == "replay_mixture":
            if self.historical_count < 0 or self.fresh_count < 0:
                raise ConfigError("sampler.mix", "counts must be non-negative")
            if self.historical_count + self.fresh_count != k:
                raise ConfigError("sampler.mix", f"historical + fresh must equal k={k}")
            if self.buffer_capacity < 1:
                raise ConfigError("sampler.buffer_capacity", "must be positive")
        if self.kind == "fixed" and (self.fixed_logits is None) == (self.fixed_probs is None):
            raise ConfigError("sampler", "fixed sampler needs exactly one of fixed_logits / fixed_probs")


@dataclass
class AblationFlags:
    drop_var: bool = False
    drop_cov: bool = False
    entropy_substitute: float | None = None

    @property
    def active(self) -> bool:
        return self.drop_var or self.drop_cov or self.entropy_substitute is not None


@dataclass
class TrainConfig:
    scheme: str = "GVPO"
    beta: float = 1.0
    learning_rate: float = 0.5
    steps: int = 1000
    k: int = 8
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    gradient_mode: str = "exact"
    aux_policy_mode: str = "fixed_reference"
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    grpo: GRPOConfig = field(default_factory=GRPOConfig)
    momentum: float = 0.0
    log_every: int = 1
    max_grad_norm: float = 1e6

    def __post_init__(self):
        if isinstance(self.sampler, dict):
            self.sampler = SamplerSpec(**self.sampler)
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags(**self.ablation)
        if isinstance(self.grpo, dict):
            self.grpo = GRPOConfig(**self.grpo)
        self.validate()

    def validate(self) -> None:
        scheme = str(self.scheme).upper()
        if scheme not in schemes.SCHEMES:
            raise ConfigError("scheme", f"{self.scheme!r} is not one of {', '.join(schemes.SCHEMES)}")
        self.scheme = scheme
        self.gradient_mode = _norm_name(self.gradient_mode, GRADIENT_MODES, "gradient_mode")
        self.aux_policy_mode = _norm_name(self.aux_policy_mode, AUX_MODES, "aux_policy_mode")
        if not (isinstance(self.beta, (int, float)) and self.beta > 0):
            raise ConfigError("beta", f"must be positive, got {self.beta}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", f"must be positive, got {self.learning_rate}")
        if int(self.steps) < 1:
            raise ConfigError("steps", "must be at least 1")
        if self.k < 2:
            raise ConfigError("k", "group size must be at least 2")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must lie in [0, 1)")
        if self.log_every < 1:
            raise ConfigError("log_every", "must be at least 1")
        self.sampler.validate(self.k)
        if self.ablation.active:
            if self.scheme != "GVPO" or self.gradient_mode != "exact" or self.beta != 1.0:
                raise ConfigError("ablation", "ablation flags need scheme=GVPO, gradient_mode=exact, beta=1")
        if self.gradient_mode == "exact" and self.sampler.kind == "replay_mixture":
            raise ConfigError("sampler.kind", "replay_mixture has no explicit distribution; use monte_carlo")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown train config field")
        return cls(**doc)


# ---------------------------------------------------------------- sampling

class Sampler:
    """Draws ``k`` response ids per prompt from the configured sampling distribution.

    Role table keys: ``old`` (policy at the start of the step), ``aux`` (the
    auxiliary policy theta'), and optionally ``fixed``.
    """

    def __init__(self, spec: SamplerSpec, num_prompts: int, num_responses: int, fixed_probs=None):
        self.spec = spec
        self.shape = (num_prompts, num_responses)
        self.fixed = fixed_probs
        self.uniform = np.full(self.shape, 1.0 / num_responses)
        if spec.kind == "replay_mixture":
            self.buffer = np.zeros((num_prompts, spec.buffer_capacity), dtype=np.int64)
            self.buffer_size = np.zeros(num_prompts, dtype=np.int64)
            self.buffer_pos = np.zeros(num_prompts, dtype=np.int64)

    def probs(self, roles: dict[str, PolicyParams]) -> np.ndarray | None:
        kind = self.spec.kind
        if kind == "old_policy":
            return roles["old"].probs()
        if kind == "reference":
            return roles["aux"].probs()
        if kind == "uniform":
            return self.uniform
        if kind == "fixed":
            return self.fixed
        return None

    def draw(self, roles: dict[str, PolicyParams], k: int, rng: np.random.Generator) -> np.ndarray:
        if self.spec.kind != "replay_mixture":
            return kernels.sample_inverse_cdf(self.probs(roles), rng.random((self.shape[0], k)))
        old = roles["old"].probs()
        hist = self.spec.historical_count
        fresh_n = self.spec.fresh_count
        out = np.empty((self.shape[0], k), dtype=np.int64)
        for x in range(self.shape[0]):
            if hist > 0 and self.buffer_size[x] >= hist:
                picks = rng.integers(0, self.buffer_size[x], size=hist)
                fresh = kernels.sample_inverse_cdf(old[x : x + 1], rng.random((1, fresh_n)))[0]
                out[x] = np.concatenate([self.buffer[x, picks], fresh])
            else:
                fresh = kernels.sample_inverse_cdf(old[x : x + 1], rng.random((1, k)))[0]
                out[x] = fresh
            self._push(x, fresh)
        return out

    def _push(self, x: int, ids) -> None:
        cap = self.spec.buffer_capacity
        for y in ids:
            self.buffer[x, self.buffer_pos[x]] = y
            self.buffer_pos[x] = (self.buffer_pos[x] + 1) % cap
            self.buffer_size[x] = min(self.buffer_size[x] + 1, cap)


def make_sampler(spec: SamplerSpec, policies: dict[str, PolicyParams], task: TaskSpec | None = None) -> Sampler:
    aux = policies["aux"]
    shape = (aux.num_prompts, aux.num_responses)
    fixed = None
    if spec.kind == "fixed":
        if spec.fixed_probs is not None:
            fixed = as_probs(spec.fixed_probs, task)
        else:
            fixed = flat_policy(spec.fixed_logits).probs()
        if fixed.shape != shape:
            raise ConfigError("sampler", f"fixed distribution shape {fixed.shape} != {shape}")
    sampler = Sampler(spec, *shape, fixed_probs=fixed)
    probs = sampler.probs({"old": policies.get("old", aux), "aux": aux})
    if probs is not None:
        check_support(probs, aux.probs())
    return sampler


# ---------------------------------------------------------------- metrics

def _mean_kl_log(p_log: np.ndarray, q_log: np.ndarray) -> float:
    # full-support tables in log domain
    per = np.sum(np.exp(p_log) * (p_log - q_log), axis=1)
    return float(np.mean(np.maximum(per, 0.0)))


def convergence_metrics(theta: PolicyParams, task: TaskSpec, beta: float, aux: PolicyParams):
    """``(kl_to_optimal, kl_to_aux, mean_reward)``; pi* is the tilt of ``aux``."""
    opt = optimal_policy(aux, task, beta)
    lp = theta.log_probs()
    return (
        _mean_kl_log(opt.log_probs, lp),
        _mean_kl_log(lp, aux.log_probs()),
        float(np.mean(np.sum(np.exp(lp) * task.rewards, axis=1))),
    )


# ---------------------------------------------------------------- report

@dataclass
class TrainReport:
    rows: list[dict[str, Any]] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)

    @property
    def aborted(self) -> bool:
        return bool(self.summary.get("aborted", False))

    @property
    def final(self) -> dict[str, Any]:
        return self.summary.get("final_metrics", {})

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=np.float64)


class Trainer:
    """Mutable training state; :meth:`step` advances it by one update."""

    def __init__(self, task: TaskSpec, init: PolicyParams, config: TrainConfig, reference: PolicyParams | None = None):
        if (init.num_prompts, init.num_responses) != task.shape:
            raise ConfigError("init", "policy does not match the task")
        self.task = task
        self.config = config
        self.theta = init
        self.ref = init if reference is None else reference
        self.aux = self.ref
        self.rng = np.random.default_rng(config.seed)
        self.optimal = optimal_policy(self.ref, task, config.beta)
        self.velocity = np.zeros(init.num_params)
        self.step_index = 0
        self.sampler = make_sampler(config.sampler, {"old": init, "aux": self.aux}, task)
        self.last_grad: np.ndarray | None = None
        self.abort_reason: str | None = None
        self.dump: dict[str, Any] | None = None

    def _exact_terms(self, old: PolicyParams) -> schemes.ExactTerms:
        cfg, task = self.config, self.task
        ps = self.sampler.probs({"old": old, "aux": self.aux})
        if cfg.scheme == "GVPO":
            if cfg.ablation.active:
                a = cfg.ablation
                return schemes.exact_ablation_terms(old, self.aux, ps, task, a.drop_var, a.drop_cov,
                                                    a.entropy_substitute, validate=False)
            # support was checked in make_sampler; softmax policies never lose it
            return schemes.exact_gvpo_terms(old, self.aux, ps, task, cfg.beta, validate=False)
        if cfg.scheme == "GRPO":
            return schemes.exact_grpo_terms(old, old, self.ref, ps, task, cfg.grpo)
        if cfg.scheme == "DPO":
            return schemes.exact_dpo_terms(old, self.ref, ps, task, cfg.beta)
        return schemes.exact_sft_terms(old, task)

    def _monte_carlo(self, old: PolicyParams) -> tuple[float, np.ndarray]:
        cfg, task = self.config, self.task
        k = cfg.k
        ids = self.sampler.draw({"old": old, "aux": self.aux}, k, self.rng)
        rows = np.arange(task.num_prompts)[:, None]
        r = task.rewards[rows, ids]
        lp = old.log_probs()[rows, ids]
        extra = None
        if cfg.scheme == "GVPO":
            w = schemes.gvpo_weight_array(r, lp - self.aux.log_probs()[rows, ids], cfg.beta)
            coef = w / (k - 1)
            loss = 0.5 * float(np.sum((w / cfg.beta) ** 2)) / (k - 1)
        elif cfg.scheme == "GRPO":
            # pi_old is the policy at the start of this step
            w = schemes.grpo_weight_array(r, lp, lp, cfg.grpo)
            coef = w / k
            loss = -float(np.sum(coef * lp))
            if cfg.grpo.kl_coefficient > 0:
                loss += cfg.grpo.kl_coefficient * schemes.kl_penalty_value(old, self.ref)
                extra = schemes.kl_penalty_gradient(old, self.ref, cfg.grpo.kl_coefficient)
        elif cfg.scheme == "DPO":
            c, pair_loss, npairs = schemes.dpo_pair_matrix(r, lp - self.ref.log_probs()[rows, ids], cfg.beta)
            scale = np.where(npairs > 0, 1.0 / np.maximum(npairs, 1), 0.0)
            coef = cfg.beta * c * scale[:, None]
            loss = float(np.sum(pair_loss * scale))
        else:
            coef = np.zeros(ids.shape)
            for x in range(task.num_prompts):
                coef[x, schemes.sft_target_index(r[x], ids[x])] = 1.0
            loss = -float(np.sum(coef * lp))
        table = kernels.scatter_coefficients(ids, coef, task.num_responses)
        grad = -old.weighted_grad(table).ravel()
        if extra is not None:
            grad = grad + extra
        return loss, grad

    def _abort(self, reason: str, old: PolicyParams, loss: float, grad_norm: float) -> None:
        self.abort_reason = reason
        self.dump = {"step": self.step_index, "loss": loss, "grad_norm": grad_norm, "theta": old.theta.tolist()}
        log.warning("training aborted at step %d: %s", self.step_index, reason)

    def step(self) -> dict[str, Any] | None:
        """One update.  Returns the metric row, or ``None`` if the divergence guard fired."""
        cfg = self.config
        old = self.theta
        if cfg.aux_policy_mode == "refresh_each_step":
            self.aux = old
        self.step_index += 1
        decomposition = None
        if cfg.gradient_mode == "exact":
            terms = self._exact_terms(old)
            loss, grad = terms.loss, terms.gradient(old)
            if cfg.scheme == "GVPO" and cfg.beta == 1.0:
                decomposition = terms.decomposition
                if decomposition is None:
                    ps = self.sampler.probs({"old": old, "aux": self.aux})
                    decomposition = schemes.gvpo_loss_decomposed(old, self.aux, ps, self.task, 1.0, validate=False)
        else:
            loss, grad = self._monte_carlo(old)
        grad_norm = float(np.linalg.norm(grad))
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            self._abort("non-finite loss or gradient", old, loss, grad_norm)
            return None
        if grad_norm > cfg.max_grad_norm:
            self._abort(f"gradient norm {grad_norm:.3g} exceeds {cfg.max_grad_norm:.3g}", old, loss, grad_norm)
            return None
        self.last_grad = grad
        if cfg.momentum > 0:
            self.velocity = cfg.momentum * self.velocity + grad
            update = self.velocity
        else:
            update = grad
        new_theta = old.theta - cfg.learning_rate * update.reshape(old.theta.shape)
        if not np.all(np.isfinite(new_theta)):
            self._abort("non-finite parameters after update", old, loss, grad_norm)
            return None
        self.theta = old.with_theta(new_theta)
        mean_reward, kl_opt, kl_aux = kernels.policy_metrics(
            self.theta.log_probs(), self.optimal.log_probs, self.aux.log_probs(), self.task.rewards)
        return {
            "step": self.step_index,
            "loss": loss,
            "grad_norm": grad_norm,
            "mean_reward": mean_reward,
            "kl_to_optimal": kl_opt,
            "kl_to_aux": kl_aux,
            "adv_term": None if decomposition is None else decomposition.advantage_term,
            "cov_term": None if decomposition is None else decomposition.cov_term,
            "var_term": None if decomposition is None else decomposition.var_term,
        }


def train(
    task: TaskSpec,
    init: PolicyParams,
    config: TrainConfig,
    reference: PolicyParams | None = None,
    on_row: Callable[[dict[str, Any]], None] | None = None,
) -> tuple[PolicyParams, TrainReport]:
    """Run ``config.steps`` updates from ``init``.

    ``reference`` is the fixed auxiliary policy theta' (defaults to ``init``).
    Rows are kept every ``log_every`` steps and at the last step; ``on_row``
    sees each kept row as it is produced.  A divergence-guard abort ends the
    run early with ``report.summary["aborted"] = True``.
    """
    t0 = time.perf_counter()
    trainer = Trainer(task, init, config, reference)
    report = TrainReport()
    last = None
    for s in range(1, config.steps + 1):
        row = trainer.step()
        if row is None:
            break
        last = row
        if s % config.log_every == 0 or s == config.steps:
            report.rows.append(row)
            if on_row is not None:
                on_row(row)
    final = {} if last is None else {key: last[key] for key in CSV_COLUMNS}
    if last is not None:
        # KL-regularized objective against the fixed reference
        lp = trainer.theta.log_probs()
        final["objective"] = last["mean_reward"] - config.beta * _mean_kl_log(lp, trainer.ref.log_probs())
    report.summary = {
        "config": config.to_json(),
        "final_metrics": final,
        "wall_clock_ms": (time.perf_counter() - t0) * 1e3,
        "aborted": trainer.abort_reason is not None,
        "abort_reason": trainer.abort_reason,
        "steps_completed": trainer.step_index if trainer.abort_reason is None else trainer.step_index - 1,
    }
    if trainer.dump is not None:
        report.summary["state_dump"] = trainer.dump
    return trainer.theta, report


__all__ = [
    "AblationFlags", "ConfigError", "CSV_COLUMNS", "Sampler", "SamplerSpec", "SupportViolation",
    "TrainConfig", "TrainReport", "Trainer", "convergence_metrics", "make_sampler", "train",
]
