"""Executable checks for the GVPO identities and convergence claims.

Each check returns a :class:`CheckResult` with ``passed == (measured <= threshold)``.
Checks that test several conditions report ``measured`` in units of their
primary threshold: every condition is turned into a ratio against its own
limit and ``measured = primary * max(ratios)``, so the check passes exactly when
all conditions hold and tightening any limit can only turn a pass into a fail.
The raw numbers go to ``details``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from . import oracle, schemes, trainer
from .policy import PolicyParams, flat_policy, grad_log_prob, init_uniform, random_policy
from .schemes import GroupBatch, GVPOConfig
from .taskenv import TaskSpec, default_instance, make_bandit


@dataclass(frozen=True)
class Thresholds:
    zero_sum: float = 1e-12
    zero_sum_large_rewards: float = 1e-6
    cancellation: float = 1e-10
    forms_exact: float = 1e-12
    forms_fd_rel: float = 1e-5
    forms_fd_abs: float = 1e-8
    forms_decomposed: float = 1e-6
    theorem1_kl: float = 1e-6
    theorem1_loss: float = 1e-10
    theorem2_kl: float = 1e-5
    theorem2_pointwise: float = 1e-4
    stationary_grad: float = 1e-8
    stationary_loss: float = 1e-12
    ablation_separation: float = 1e-3
    ablation_control: float = 1e-8
    ablation_kl_ratio: float = 10.0
    mc_std_errors: float = 3.0


DEFAULT_THRESHOLDS = Thresholds()


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    details: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.measured = float(self.measured)
        self.threshold = float(self.threshold)
        self.passed = bool(self.measured <= self.threshold)

    def to_json(self) -> dict[str, Any]:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fold(primary: float, ratios: Sequence[float]) -> float:
    # ratio <= 1 means the condition holds
    return primary * max(float(r) for r in ratios)


def _result(name: str, primary: float, ratios: Sequence[float], details: dict) -> CheckResult:
    return CheckResult(name, False, _fold(primary, ratios), primary, details)


# ---------------------------------------------------------------- algebraic checks

def _random_group(rng: np.random.Generator, k: int, reward_bound: float, logit_bound: float, beta: float):
    n = k + int(rng.integers(0, 9))
    theta = flat_policy(rng.uniform(-logit_bound, logit_bound, size=(1, n)))
    aux = flat_policy(rng.uniform(-logit_bound, logit_bound, size=(1, n)))
    ys = rng.integers(0, n, size=k)
    rewards = rng.uniform(-reward_bound, reward_bound, size=k)
    return GroupBatch(0, ys, rewards, theta.log_probs()[0, ys], aux.log_probs()[0, ys])


def check_zero_sum(num_trials: int = 1000, seed: int = 0, thresholds: Thresholds = DEFAULT_THRESHOLDS) -> CheckResult:
    """GVPO weights sum to zero within every group (summed exactly with ``math.fsum``)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_large = 0.0
    for _ in range(num_trials):
        k = int(rng.integers(2, 17))
        beta = float(rng.choice([0.1, 0.5, 1.0, 2.0]))
        g = _random_group(rng, k, 10.0, 10.0, beta)
        worst = max(worst, abs(math.fsum(schemes.gvpo_weights(g, GVPOConfig(beta)).weights)))
    # rounding grows with |R|; probe it separately against a looser absolute limit
    for _ in range(max(1, num_trials // 10)):
        k = int(rng.integers(2, 17))
        g = _random_group(rng, k, 1e6, 10.0, 1.0)
        worst_large = max(worst_large, abs(math.fsum(schemes.gvpo_weights(g, GVPOConfig(1.0)).weights)))
    details = {"max_abs_sum": worst, "max_abs_sum_large_rewards": worst_large, "trials": num_trials}
    return _result("zero_sum", thresholds.zero_sum,
                   [worst / thresholds.zero_sum, worst_large / thresholds.zero_sum_large_rewards], details)


def check_partition_cancellation(num_trials: int = 1000, seed: int = 0,
                                 thresholds: Thresholds = DEFAULT_THRESHOLDS) -> CheckResult:
    """A per-prompt constant added to every log-ratio leaves the GVPO update unchanged."""
    rng = np.random.default_rng(seed)
    worst_weights = 0.0
    worst_sum = 0.0
    for _ in range(num_trials):
        p = int(rng.integers(1, 5))
        k = int(rng.integers(2, 17))
        beta = float(rng.choice([0.1, 0.5, 1.0, 2.0]))
        rewards = rng.uniform(0.0, 1.0, size=(p, k))
        log_ratio = rng.uniform(-5.0, 5.0, size=(p, k))
        c = rng.uniform(-20.0, 20.0, size=(p, 1))
        w = schemes.gvpo_weight_array(rewards, log_ratio, beta)
        w_shift = schemes.gvpo_weight_array(rewards, log_ratio + c, beta)
        worst_weights = max(worst_weights, float(np.max(np.abs(w - w_shift))))
        for x in range(p):
            plain = math.fsum(w[x] * beta * log_ratio[x])
            shifted = math.fsum(w[x] * (beta * log_ratio[x] + beta * c[x, 0]))
            worst_sum = max(worst_sum, abs(shifted - plain))
    t = thresholds.cancellation
    details = {"max_weight_change": worst_weights, "max_weighted_sum_change": worst_sum, "trials": num_trials}
    return _result("cancellation", t, [worst_weights / t, worst_sum / t], details)


def check_three_forms(num_trials: int = 100, seed: int = 0, thresholds: Thresholds = DEFAULT_THRESHOLDS) -> CheckResult:
    """Assembled weights, frozen-weight NLL gradient, MSE finite differences and the decomposition agree."""
    rng = np.random.default_rng(seed)
    th = thresholds
    worst = {"assembled_vs_nll": 0.0, "assembled_vs_fd": 0.0, "decomposed_vs_mse": 0.0}
    ratios = [0.0]
    for trial in range(num_trials):
        p = int(rng.integers(1, 4))
        n = int(rng.integers(3, 9))
        k = int(rng.integers(2, 9))
        beta = 0.1 if trial % 2 else 1.0
        task = make_bandit(p, n, {"type": "uniform"}, seed=int(rng.integers(2**31)))
        theta = random_policy(task, rng)
        aux = random_policy(task, rng)
        x = int(rng.integers(p))
        ys = rng.integers(0, n, size=k)
        cfg = GVPOConfig(beta)
        group = GroupBatch.from_policies(task, x, ys, theta, aux)

        wv = schemes.gvpo_weights(group, cfg)
        stack = np.stack([grad_log_prob(theta, x, int(y)) for y in ys])
        assembled = schemes.assemble_gradient([wv], [stack])
        _, nll = schemes.gvpo_loss_nll_form(group, cfg, theta)
        dev_a = float(np.max(np.abs(assembled - nll)))

        def mse(params: PolicyParams) -> float:
            return schemes.gvpo_loss_mse_form(GroupBatch.from_policies(task, x, ys, params, aux), cfg)

        fd = oracle.finite_diff_grad(mse, theta)
        dev_b = float(np.max(np.abs(assembled - fd)))
        limit_b = th.forms_fd_abs + th.forms_fd_rel * float(np.max(np.abs(fd)))

        # exact mode at beta = 1 with a fixed full-support sampler
        pi_s = flat_policy(rng.normal(size=(p, n))).probs()
        fd_dec = oracle.finite_diff_grad(
            lambda q: schemes.gvpo_loss_decomposed(q, aux, pi_s, task, 1.0, validate=False).combined, theta)
        fd_mse = oracle.finite_diff_grad(lambda q: oracle.exact_gvpo_loss(q, aux, pi_s, task, 1.0), theta)
        dev_c = float(np.max(np.abs(fd_dec - fd_mse)))

        worst["assembled_vs_nll"] = max(worst["assembled_vs_nll"], dev_a)
        worst["assembled_vs_fd"] = max(worst["assembled_vs_fd"], dev_b)
        worst["decomposed_vs_mse"] = max(worst["decomposed_vs_mse"], dev_c)
        ratios += [dev_a / th.forms_exact, dev_b / limit_b, dev_c / th.forms_decomposed]
    return _result("three_forms", th.forms_exact, ratios, {**worst, "trials": num_trials})


# ---------------------------------------------------------------- convergence checks

def _gvpo_exact_config(beta: float, steps: int, lr: float, sampler, seed: int) -> trainer.TrainConfig:
    return trainer.TrainConfig(scheme="GVPO", beta=beta, learning_rate=lr, steps=steps, sampler=sampler,
                               gradient_mode="exact", aux_policy_mode="fixed_reference", seed=seed,
                               log_every=steps)


def check_theorem1(task: TaskSpec | None = None, beta: float = 1.0, steps: int = 20000, lr: float = 0.5,
                   reference: PolicyParams | None = None, seed: int = 0,
                   thresholds: Thresholds = DEFAULT_THRESHOLDS) -> CheckResult:
    """Exact GVPO with ``pi_s = pi_theta' = reference`` converges to the tilted optimum."""
    task = default_instance(seed) if task is None else task
    ref = init_uniform(task) if reference is None else reference
    cfg = _gvpo_exact_config(beta, steps, lr, trainer.SamplerSpec("reference"), seed)
    final, report = trainer.train(task, ref, cfg, reference=ref)
    t = thresholds.theorem1_kl
    if report.aborted:
        return CheckResult("theorem1", False, math.inf, t, {"aborted": True, "abort_reason": report.summary["abort_reason"]})
    kl, _, _ = trainer.convergence_metrics(final, task, beta, ref)
    loss = oracle.exact_gvpo_loss(final, ref, ref, task, beta)
    details = {"kl_to_optimal": kl, "exact_loss": loss, "steps": steps, "beta": beta,
               "wall_clock_ms": report.summary["wall_clock_ms"]}
    return _result("theorem1", t, [kl / t, loss / thresholds.theorem1_loss], details)


def _skew_sampler(task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    return random_policy(task, rng, scale=1.0).probs()


def check_theorem2(task: TaskSpec | None = None, beta: float = 1.0,
                   samplers: Sequence = ("reference", "uniform", "skew"), steps: int = 20000, lr: float = 0.5,
                   reference: PolicyParams | None = None, seed: int = 0,
                   thresholds: Thresholds = DEFAULT_THRESHOLDS) -> CheckResult:
    """Every full-coverage sampling distribution leads exact GVPO to the same optimum.

    ``samplers`` entries are sampler kinds, ``"skew"`` (softmax of random
    logits) or explicit ``(P, N)`` probability tables.  A table that misses
    reference mass raises :class:`~gvpolab.oracle.SupportViolation`.
    """
    task = default_instance(seed) if task is None else task
    ref = init_uniform(task) if reference is None else reference
    rng = np.random.default_rng(seed)
    finals: dict[str, np.ndarray] = {}
    kls: dict[str, float] = {}
    aborted = []
    for i, s in enumerate(samplers):
        if isinstance(s, str) and s == "skew":
            spec, label = trainer.SamplerSpec("fixed", fixed_probs=_skew_sampler(task, rng).tolist()), "skew"
        elif isinstance(s, str):
            spec, label = trainer.SamplerSpec(s), s
        else:
            spec, label = trainer.SamplerSpec("fixed", fixed_probs=np.asarray(s).tolist()), f"table{i}"
        final, report = trainer.train(task, ref, _gvpo_exact_config(beta, steps, lr, spec, seed), reference=ref)
        if report.aborted:
            aborted.append(label)
            continue
        finals[label] = final.probs()
        kls[label] = trainer.convergence_metrics(final, task, beta, ref)[0]
    t = thresholds.theorem2_kl
    if aborted:
        return CheckResult("theorem2", False, math.inf, t, {"aborted": aborted, "kl_to_optimal": kls})
    labels = list(finals)
    spread = max((float(np.max(np.abs(finals[a] - finals[b])))
                  for i, a in enumerate(labels) for b in labels[i + 1:]), default=0.0)
    max_kl = max(kls.values())
    details = {"kl_to_optimal": kls, "max_pointwise_distance": spread, "steps": steps, "beta": beta}
    return _result("theorem2", t, [max_kl / t, spread / thresholds.theorem2_pointwise], details)


def check_stationary_at_optimum(task: TaskSpec | None = None, betas: Sequence[float] = (0.1, 1.0), seed: int = 0,
                                thresholds: Thresholds = DEFAULT_THRESHOLDS) -> CheckResult:
    """``theta = log pi*`` (and any per-prompt shift of it) has zero exact loss and gradient."""
    rng = np.random.default_rng(seed)
    task = make_bandit(8, 16, {"type": "uniform"}, seed) if task is None else task
    ref = random_policy(task, rng)
    ps = ref.probs()
    th = thresholds
    ratios, details = [], {}
    for beta in betas:
        star = oracle.optimal_policy(ref, task, beta).log_probs
        shift = rng.uniform(-5.0, 5.0, size=(task.num_prompts, 1))
        for label, logits in (("log_pi_star", star), ("shifted", star + shift)):
            theta = flat_policy(logits)
            _, grad = schemes.exact_gvpo_gradient(theta, ref, ps, task, beta)
            gnorm = float(np.linalg.norm(grad))
            loss = oracle.exact_gvpo_loss(theta, ref, ps, task, beta)
            details[f"beta={beta}/{label}"] = {"grad_norm": gnorm, "exact_loss": loss}
            ratios += [gnorm / th.stationary_grad, loss / th.stationary_loss]
    return _result("stationary", th.stationary_grad, ratios, details)


ABLATIONS = {
    "drop_var": trainer.AblationFlags(drop_var=True),
    "drop_cov": trainer.AblationFlags(drop_cov=True),
    "drop_both": trainer.AblationFlags(drop_var=True, drop_cov=True),
}


def _ablation_grid(entropy_coefs: Sequence[float]) -> dict[str, trainer.AblationFlags]:
    grid = dict(ABLATIONS)
    for c in entropy_coefs:
        grid[f"entropy_{c:g}"] = trainer.AblationFlags(entropy_substitute=float(c))
    return grid


def check_ablation_fixed_points(task: TaskSpec | None = None, entropy_coefs: Sequence[float] = (0.01, 0.1, 1.0),
                                steps: int = 20000, lr: float = 0.5, seed: int = 0,
                                thresholds: Thresholds = DEFAULT_THRESHOLDS) -> CheckResult:
    """Removing the variance or covariance term moves the fixed point away from ``pi*``.

    Separation is measured at ``theta = log pi*`` with generic rewards and a
    non-uniform reference (under a uniform reference the covariance term is
    identically zero).  The full runs use the default instance and uniform
    reference; drop-both must end at least ``ablation_kl_ratio`` times farther
    from ``pi*`` than full GVPO, or trip the divergence guard.
    """
    th = thresholds
    rng = np.random.default_rng(seed)
    generic = make_bandit(8, 16, {"type": "uniform", "min_gap": 1e-3}, seed)
    ref = random_policy(generic, rng)
    ps = ref.probs()
    star = oracle.optimal_policy(ref, generic, 1.0).policy()
    grid = _ablation_grid(entropy_coefs)
    ratios = []
    norms = {}
    control = float(np.linalg.norm(schemes.exact_gvpo_gradient(star, ref, ps, generic, 1.0)[1]))
    ratios.append(control / th.ablation_control)
    for name, flags in grid.items():
        terms = schemes.exact_ablation_terms(star, ref, ps, generic, flags.drop_var, flags.drop_cov,
                                             flags.entropy_substitute)
        norms[name] = float(np.linalg.norm(terms.gradient(star)))
        ratios.append(th.ablation_separation / norms[name] if norms[name] > 0 else math.inf)

    task = default_instance(seed) if task is None else task
    base = init_uniform(task)
    runs = {}
    for name, flags in {"full": trainer.AblationFlags(), **grid}.items():
        cfg = replace(_gvpo_exact_config(1.0, steps, lr, trainer.SamplerSpec("reference"), seed), ablation=flags)
        final, report = trainer.train(task, base, cfg, reference=base)
        runs[name] = {
            "aborted": report.aborted,
            "kl_to_optimal": None if report.aborted else trainer.convergence_metrics(final, task, 1.0, base)[0],
        }
    if runs["full"]["aborted"]:
        ratios.append(math.inf)
    elif not runs["drop_both"]["aborted"]:
        kl_full, kl_both = runs["full"]["kl_to_optimal"], runs["drop_both"]["kl_to_optimal"]
        ratios.append(th.ablation_kl_ratio * kl_full / kl_both if kl_both > 0 else math.inf)
    details = {"control_grad_norm": control, "grad_norm_at_optimum": norms, "runs": runs, "steps": steps}
    return _result("ablation", th.ablation_separation, ratios, details)


def check_monte_carlo_consistency(task: TaskSpec | None = None, beta: float = 1.0, k: int = 8,
                                  resamples: int = 10000, seed: int = 0,
                                  thresholds: Thresholds = DEFAULT_THRESHOLDS) -> CheckResult:
    """Average of ``resamples`` k-sample GVPO gradients vs the exact gradient, in standard errors.

    ``pi_s`` is the current policy held fixed.  Every coordinate must lie within
    ``mc_std_errors`` standard errors.
    """
    rng = np.random.default_rng(seed)
    task = make_bandit(2, 6, {"type": "uniform"}, seed) if task is None else task
    theta = random_policy(task, rng)
    ref = random_policy(task, rng)
    cfg = trainer.TrainConfig(scheme="GVPO", beta=beta, k=k, steps=1, gradient_mode="monte_carlo",
                              sampler=trainer.SamplerSpec("old_policy"), seed=seed)
    tr = trainer.Trainer(task, theta, cfg, reference=ref)
    grads = np.stack([tr._monte_carlo(theta)[1] for _ in range(resamples)])
    exact = schemes.exact_gvpo_gradient(theta, ref, theta.probs(), task, beta)[1]
    mean = grads.mean(axis=0)
    se = grads.std(axis=0, ddof=1) / math.sqrt(resamples)
    dev = np.abs(mean - exact)
    z = np.where(se > 0, dev / np.where(se > 0, se, 1.0), np.where(dev <= 1e-12, 0.0, math.inf))
    details = {"max_z": float(np.max(z)), "coordinates": int(z.size), "resamples": resamples, "k": k,
               "max_abs_dev": float(np.max(dev))}
    return CheckResult("mc_consistency", False, float(np.max(z)), thresholds.mc_std_errors, details)


# ---------------------------------------------------------------- suite

CHECKS: dict[str, Callable[..., CheckResult]] = {
    "zero_sum": check_zero_sum,
    "cancellation": check_partition_cancellation,
    "three_forms": check_three_forms,
    "theorem1": check_theorem1,
    "theorem2": check_theorem2,
    "stationary": check_stationary_at_optimum,
    "ablation": check_ablation_fixed_points,
    "mc_consistency": check_monte_carlo_consistency,
}
SUITE = ("zero_sum", "cancellation", "three_forms", "theorem1", "theorem2", "stationary", "ablation")
SELECTORS = ("all",) + tuple(CHECKS)


def check_seed(name: str, seed: int) -> int:
    """Independent per-check seed derived from the suite seed."""
    idx = list(CHECKS).index(name)
    return int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])


def _run_one(name: str, seed: int, thresholds: Thresholds) -> CheckResult:
    return CHECKS[name](seed=check_seed(name, seed), thresholds=thresholds)


def run_checks(selector: str = "all", seed: int = 0, thresholds: Thresholds = DEFAULT_THRESHOLDS,
               parallel: int = 1) -> list[CheckResult]:
    if selector not in SELECTORS:
        raise KeyError(f"unknown check {selector!r}; choose from {', '.join(SELECTORS)}")
    names = SUITE if selector == "all" else (selector,)
    if parallel > 1 and len(names) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_one, names, [seed] * len(names), [thresholds] * len(names)))
    return [_run_one(n, seed, thresholds) for n in names]


def results_json(results: Sequence[CheckResult]) -> str:
    return json.dumps([r.to_json() for r in results], indent=2)


def format_table(results: Sequence[CheckResult]) -> str:
    width = max([len(r.name) for r in results] + [5])
    lines = [f"{'check':<{width}}  status  {'measured':>12}  {'threshold':>12}"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.measured:>12.3e}  {r.threshold:>12.3e}")
    return "\n".join(lines)
