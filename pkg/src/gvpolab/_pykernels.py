"""Pure-numpy kernels; reference semantics for ``_ckernels``.

All functions operate on flat (prompt x response) tables, row per prompt.
"""

import numpy as np


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def flat_weighted_grad(probs, coef):
    """Row-wise ``sum_y coef[y] * d log softmax(z)[y] / dz`` = ``coef - sum(coef) * probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    coef = np.asarray(coef, dtype=np.float64)
    return coef - coef.sum(axis=-1, keepdims=True) * probs


def sample_inverse_cdf(probs, u):
    """Inverse-CDF draws: ``ids[x, j]`` is the first y with ``cdf[x, y] > u[x, j] * cdf[x, -1]``."""
    probs = np.asarray(probs, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    n = probs.shape[-1]
    out = np.empty(u.shape, dtype=np.int64)
    for x in range(probs.shape[0]):
        ids = np.searchsorted(cdf[x], u[x] * cdf[x, -1], side="right")
        out[x] = np.minimum(ids, n - 1)
    return out


def centered_weights(a, scale):
    """``scale * (a - mean(a))`` along the last axis, centered twice so rows sum to ~0."""
    a = np.asarray(a, dtype=np.float64)
    c = a - a.mean(axis=-1, keepdims=True)
    c = c - c.mean(axis=-1, keepdims=True)
    return scale * c


def scatter_coefficients(ids, coef, n):
    ids = np.asarray(ids, dtype=np.int64)
    coef = np.asarray(coef, dtype=np.float64)
    p = ids.shape[0]
    out = np.zeros(p * n)
    np.add.at(out, (ids + n * np.arange(p)[:, None]).ravel(), coef.ravel())
    return out.reshape(p, n)


def exact_gvpo_flat(z, ref_logp, sample_probs, rewards, beta):
    """Exact expected GVPO step for flat softmax policies.

    Returns ``(loss, grad, terms)``.  ``loss = sum_x 1/2 E_s[D^2]`` with
    ``D = (beta*l - R) - E_s[beta*l - R]`` and ``l = log pi - log pi_ref``;
    ``grad`` is its gradient w.r.t. the logits; ``terms`` holds the prompt-mean
    advantage, covariance and variance terms of the beta=1 decomposition.
    """
    logp = log_softmax(z)
    probs = np.exp(logp)
    ps = sample_probs
    d = beta * (logp - ref_logp) - rewards
    d = d - (ps * d).sum(axis=-1, keepdims=True)
    loss = 0.5 * float((ps * d * d).sum())
    coef = beta * ps * d
    lt = logp - logp[:, :1]
    lt = lt - (ps * lt).sum(axis=-1, keepdims=True)
    la = ref_logp - ref_logp[:, :1]
    la = la - (ps * la).sum(axis=-1, keepdims=True)
    adv = rewards - (ps * rewards).sum(axis=-1, keepdims=True)
    terms = np.array([
        (ps * adv * logp).sum(axis=-1).mean(),
        (ps * lt * la).sum(axis=-1).mean(),
        (ps * lt * lt).sum(axis=-1).mean(),
    ])
    return loss, flat_weighted_grad(probs, coef), terms


def policy_metrics(logp, opt_logp, aux_logp, rewards):
    """Prompt means of ``E_pi R``, ``KL(pi* || pi)`` and ``KL(pi || aux)`` for full-support log tables."""
    probs = np.exp(logp)
    mean_reward = float((probs * rewards).sum(axis=-1).mean())
    kl_opt = np.maximum((np.exp(opt_logp) * (opt_logp - logp)).sum(axis=-1), 0.0).mean()
    kl_aux = np.maximum((probs * (logp - aux_logp)).sum(axis=-1), 0.0).mean()
    return mean_reward, float(kl_opt), float(kl_aux)
