"""Softmax policies over enumerable response spaces.

Parameters live in one ``(num_prompts, block)`` array; the full parameter
vector is its row-major ravel, i.e. per-prompt blocks concatenated.

* ``flat``: ``block == num_responses``; ``pi(y|x) = softmax(theta[x])[y]``.
* ``autoregressive``: one logit row per (position ``t``, prefix ``s``) with
  ``s`` the integer id of the ``t``-token prefix; the block is the
  concatenation over ``t`` of ``(vocab**t, vocab)`` tables.
"""

from __future__ import annotations

import json
from typing import Any

import numpy as np

from . import kernels
from .taskenv import TaskSpec


class PolicyError(ValueError):
    pass


def _ar_block_size(vocab: int, length: int) -> int:
    return sum(vocab**t * vocab for t in range(length))


class PolicyParams:
    """Immutable logit tables.  Derived quantities are cached on first use."""

    def __init__(self, kind: str, theta, num_responses: int, vocab: int | None = None, length: int | None = None):
        theta = np.array(theta, dtype=np.float64)
        if theta.ndim != 2:
            raise PolicyError("theta must be (num_prompts, block)")
        if not np.all(np.isfinite(theta)):
            raise PolicyError("logits must be finite")
        if kind == "flat":
            block = num_responses
        elif kind == "autoregressive":
            if vocab is None or length is None or vocab**length != num_responses:
                raise PolicyError("autoregressive policies need vocab ** length == num_responses")
            block = _ar_block_size(vocab, length)
        else:
            raise PolicyError(f"unknown policy kind {kind!r}")
        if theta.shape[1] != block:
            raise PolicyError(f"block size {theta.shape[1]} != expected {block}")
        theta.setflags(write=False)
        self.kind = kind
        self.theta = theta
        self.num_responses = num_responses
        self.vocab = vocab
        self.length = length
        self._logp = None

    @property
    def num_prompts(self) -> int:
        return self.theta.shape[0]

    @property
    def num_params(self) -> int:
        return self.theta.size

    def vector(self) -> np.ndarray:
        return self.theta.ravel().copy()

    def with_theta(self, theta) -> "PolicyParams":
        theta = np.asarray(theta, dtype=np.float64).reshape(self.theta.shape)
        return PolicyParams(self.kind, theta, self.num_responses, self.vocab, self.length)

    def tables(self) -> list[np.ndarray]:
        """Autoregressive logit tables, one ``(P, V**t, V)`` view per position."""
        if self.kind != "autoregressive":
            raise PolicyError("flat policies have no per-position tables")
        V, out, off = self.vocab, [], 0
        for t in range(self.length):
            size = V**t * V
            out.append(self.theta[:, off : off + size].reshape(-1, V**t, V))
            off += size
        return out

    def log_probs(self) -> np.ndarray:
        """``(P, N)`` table of exact ``log pi(y|x)``."""
        if self._logp is None:
            if self.kind == "flat":
                logp = kernels.log_softmax(self.theta)
            else:
                V, T, P = self.vocab, self.length, self.num_prompts
                logp = np.zeros((P, self.num_responses))
                for t, table in enumerate(self.tables()):
                    lsm = kernels.log_softmax(table.reshape(-1, V)).reshape(P, V ** (t + 1))
                    logp += np.repeat(lsm, V ** (T - 1 - t), axis=1)
            logp.setflags(write=False)
            self._logp = logp
        return self._logp

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def weighted_grad(self, coef) -> np.ndarray:
        """``sum_y coef[x, y] * grad log pi(y|x)`` for every prompt, as a ``(P, block)`` array."""
        coef = np.asarray(coef, dtype=np.float64)
        if coef.shape != (self.num_prompts, self.num_responses):
            raise PolicyError(f"coefficient shape {coef.shape} != {(self.num_prompts, self.num_responses)}")
        if self.kind == "flat":
            return kernels.flat_weighted_grad(self.probs(), coef)
        V, T, P = self.vocab, self.length, self.num_prompts
        parts = []
        for t, table in enumerate(self.tables()):
            # mass of coef on responses sharing each (prefix, token) pair
            c = coef.reshape(P, V ** (t + 1), V ** (T - 1 - t)).sum(axis=2).reshape(P, V**t, V)
            cond = np.exp(kernels.log_softmax(table.reshape(-1, V))).reshape(table.shape)
            parts.append((c - cond * c.sum(axis=2, keepdims=True)).reshape(P, -1))
        return np.concatenate(parts, axis=1)

    def to_flat(self) -> "PolicyParams":
        if self.kind == "flat":
            return self
        return PolicyParams("flat", self.log_probs(), self.num_responses)

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"kind": self.kind, "num_prompts": self.num_prompts}
        if self.kind == "flat":
            doc["num_responses"] = self.num_responses
            doc["logits"] = self.theta.tolist()
        else:
            doc["vocab"], doc["length"] = self.vocab, self.length
            doc["logits"] = [t.tolist() for t in self.tables()]
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "PolicyParams":
        if doc["kind"] == "flat":
            logits = np.asarray(doc["logits"], dtype=np.float64)
            return cls("flat", logits, logits.shape[1])
        vocab, length = int(doc["vocab"]), int(doc["length"])
        p = int(doc["num_prompts"])
        theta = np.concatenate([np.asarray(t, dtype=np.float64).reshape(p, -1) for t in doc["logits"]], axis=1)
        return cls("autoregressive", theta, vocab**length, vocab, length)

    @classmethod
    def loads(cls, text: str) -> "PolicyParams":
        return cls.from_json(json.loads(text))

    def __repr__(self):
        return f"PolicyParams(kind={self.kind!r}, prompts={self.num_prompts}, responses={self.num_responses})"


def _kind(kind: str) -> str:
    k = kind.lower()
    if k in ("flat", "autoregressive"):
        return k
    if k in ("ar", "sequence"):
        return "autoregressive"
    raise PolicyError(f"unknown policy kind {kind!r}")


def init_uniform(task: TaskSpec, kind: str = "flat") -> PolicyParams:
    kind = _kind(kind)
    if kind == "flat":
        return PolicyParams("flat", np.zeros(task.shape), task.num_responses)
    if task.kind != "sequence":
        raise PolicyError("autoregressive policies need a sequence task")
    block = _ar_block_size(task.vocab, task.length)
    return PolicyParams("autoregressive", np.zeros((task.num_prompts, block)), task.num_responses, task.vocab, task.length)


def flat_policy(logits) -> PolicyParams:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    return PolicyParams("flat", logits, logits.shape[1])


def random_policy(task: TaskSpec, rng: np.random.Generator, scale: float = 1.0, kind: str = "flat") -> PolicyParams:
    """Policy with i.i.d. ``N(0, scale^2)`` logits."""
    base = init_uniform(task, kind)
    return base.with_theta(rng.normal(0.0, scale, size=base.theta.shape))


def autoregressive_from_probs(task: TaskSpec, probs) -> PolicyParams:
    """Tabular autoregressive policy reproducing a full-support distribution table."""
    probs = np.asarray(probs, dtype=np.float64)
    if task.kind != "sequence":
        raise PolicyError("autoregressive policies need a sequence task")
    if probs.shape != task.shape or np.any(probs <= 0):
        raise PolicyError("need a strictly positive (P, N) probability table")
    V, T, P = task.vocab, task.length, task.num_prompts
    parts = []
    for t in range(T):
        # log joint mass of every (t+1)-prefix; row-softmax gives the conditional
        mass = probs.reshape(P, V ** (t + 1), V ** (T - 1 - t)).sum(axis=2)
        parts.append(np.log(mass))
    return PolicyParams("autoregressive", np.concatenate(parts, axis=1), task.num_responses, V, T)


def _check(params: PolicyParams, x: int, y: int | None = None) -> None:
    if not 0 <= x < params.num_prompts:
        raise PolicyError(f"prompt id {x} out of range")
    if y is not None and not 0 <= y < params.num_responses:
        raise PolicyError(f"response id {y} out of range")


def log_prob(params: PolicyParams, x: int, y: int) -> float:
    _check(params, x, y)
    return float(params.log_probs()[x, y])


def distribution(params: PolicyParams, x: int) -> np.ndarray:
    _check(params, x)
    return params.probs()[x]


def sample_k(params: PolicyParams, x: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` i.i.d. draws by inverse CDF over the enumerated response space."""
    _check(params, x)
    if k < 1:
        raise PolicyError("k must be positive")
    u = rng.random((1, k))
    return kernels.sample_inverse_cdf(params.probs()[x : x + 1], u)[0]


def grad_log_prob(params: PolicyParams, x: int, y: int) -> np.ndarray:
    """Gradient of ``log pi(y|x)`` w.r.t. the full parameter vector (zero outside block ``x``)."""
    _check(params, x, y)
    coef = np.zeros((params.num_prompts, params.num_responses))
    coef[x, y] = 1.0
    return params.weighted_grad(coef).ravel()
