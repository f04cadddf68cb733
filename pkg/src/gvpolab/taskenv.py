"""Exactly enumerable post-training tasks.

A task is a set of opaque prompt ids, a finite response space shared by all
prompts, and a dense reward table ``R[x, y]``.  Two response spaces exist:

* ``bandit``: ``num_responses`` unstructured responses per prompt.
* ``sequence``: all ``vocab ** length`` token strings.  Response ``y`` is the
  base-``vocab`` number whose digits (most significant first) are the tokens,
  so ids enumerate the strings in lexicographic order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

MAX_RESPONSES = 65536


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    num_prompts: int
    num_responses: int
    rewards: np.ndarray = field(repr=False)
    vocab: int | None = None
    length: int | None = None

    def __post_init__(self):
        if self.kind not in ("bandit", "sequence"):
            raise TaskError(f"unknown task kind {self.kind!r}")
        if self.num_prompts < 1:
            raise TaskError("num_prompts must be positive")
        if self.num_responses < 2:
            raise TaskError("every prompt needs at least 2 responses")
        if self.kind == "sequence":
            if self.vocab is None or self.length is None:
                raise TaskError("sequence tasks need vocab and length")
            if self.vocab**self.length != self.num_responses:
                raise TaskError("num_responses must equal vocab ** length")
        if self.num_responses > MAX_RESPONSES:
            raise TaskError(f"response space {self.num_responses} exceeds {MAX_RESPONSES}")
        rewards = np.array(self.rewards, dtype=np.float64)
        if rewards.shape != (self.num_prompts, self.num_responses):
            raise TaskError(
                f"reward table shape {rewards.shape} != {(self.num_prompts, self.num_responses)}"
            )
        if not np.all(np.isfinite(rewards)):
            raise TaskError("reward table has non-finite entries")
        rewards.setflags(write=False)
        object.__setattr__(self, "rewards", rewards)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_prompts, self.num_responses)

    def response_tokens(self, y: int) -> tuple[int, ...]:
        """Token tuple of sequence response ``y``."""
        if self.kind != "sequence":
            raise TaskError("bandit responses have no tokens")
        _check_id(y, self.num_responses, "response")
        tokens = []
        for _ in range(self.length):
            y, t = divmod(y, self.vocab)
            tokens.append(t)
        return tuple(reversed(tokens))

    def response_id(self, tokens: Sequence[int] | str) -> int:
        if self.kind != "sequence":
            raise TaskError("bandit responses have no tokens")
        tokens = parse_tokens(tokens)
        if len(tokens) != self.length or any(not 0 <= t < self.vocab for t in tokens):
            raise TaskError(f"{tokens!r} is not a length-{self.length} string over {self.vocab} tokens")
        y = 0
        for t in tokens:
            y = y * self.vocab + t
        return y

    def response_string(self, y: int) -> str:
        tokens = self.response_tokens(y)
        if self.vocab <= 10:
            return "".join(str(t) for t in tokens)
        return ",".join(str(t) for t in tokens)

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"kind": self.kind, "num_prompts": self.num_prompts}
        if self.kind == "bandit":
            doc["num_responses"] = self.num_responses
        else:
            doc["vocab"] = self.vocab
            doc["length"] = self.length
        doc["rewards"] = self.rewards.tolist()
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "TaskSpec":
        kind = doc.get("kind")
        rewards = np.asarray(doc["rewards"], dtype=np.float64)
        if kind == "bandit":
            return cls("bandit", int(doc["num_prompts"]), int(doc["num_responses"]), rewards)
        if kind == "sequence":
            vocab, length = int(doc["vocab"]), int(doc["length"])
            return cls("sequence", int(doc["num_prompts"]), vocab**length, rewards, vocab, length)
        raise TaskError(f"unknown task kind {kind!r}")

    @classmethod
    def loads(cls, text: str) -> "TaskSpec":
        return cls.from_json(json.loads(text))


def parse_tokens(tokens: Sequence[int] | str) -> tuple[int, ...]:
    if isinstance(tokens, str):
        if "," in tokens:
            return tuple(int(t) for t in tokens.split(","))
        return tuple(int(c) for c in tokens)
    return tuple(int(t) for t in tokens)


def _check_id(i: int, n: int, what: str) -> None:
    if not (0 <= int(i) < n):
        raise TaskError(f"{what} id {i} out of range [0, {n})")


def reward(task: TaskSpec, x: int, y: int) -> float:
    _check_id(x, task.num_prompts, "prompt")
    _check_id(y, task.num_responses, "response")
    return float(task.rewards[x, y])


def _uniform_table(rng, shape, lo, hi, min_gap):
    # min_gap > 0 resamples any prompt row whose rewards are closer than min_gap
    table = rng.uniform(lo, hi, size=shape)
    if min_gap > 0:
        for x in range(shape[0]):
            while np.min(np.diff(np.sort(table[x]))) < min_gap:
                table[x] = rng.uniform(lo, hi, size=shape[1])
    return table


def make_bandit(num_prompts: int, num_responses: int, reward_gen: dict | None = None, seed: int = 0) -> TaskSpec:
    """Build a flat task.

    ``reward_gen`` is one of::

        {"type": "explicit", "table": [[...], ...]}   # one row per prompt (a single row is broadcast)
        {"type": "uniform", "lo": 0.0, "hi": 1.0, "min_gap": 0.0}
        {"type": "one_hot", "correct": 5}             # int, or one index per prompt
    """
    if num_responses < 2:
        raise TaskError("num_responses must be at least 2")
    if num_prompts < 1:
        raise TaskError("num_prompts must be positive")
    gen = dict(reward_gen or {"type": "uniform"})
    kind = gen.get("type", "uniform")
    shape = (num_prompts, num_responses)
    if kind == "explicit":
        table = np.atleast_2d(np.asarray(gen["table"], dtype=np.float64))
        if table.shape[0] == 1 and num_prompts > 1:
            table = np.repeat(table, num_prompts, axis=0)
    elif kind == "uniform":
        lo, hi = float(gen.get("lo", 0.0)), float(gen.get("hi", 1.0))
        if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
            raise TaskError(f"bad uniform bounds [{lo}, {hi})")
        table = _uniform_table(np.random.default_rng(seed), shape, lo, hi, float(gen.get("min_gap", 0.0)))
    elif kind == "one_hot":
        correct = np.broadcast_to(np.asarray(gen["correct"], dtype=int), (num_prompts,))
        table = np.zeros(shape)
        for x, c in enumerate(correct):
            _check_id(c, num_responses, "correct response")
            table[x, c] = 1.0
    else:
        raise TaskError(f"unknown reward generator {kind!r}")
    return TaskSpec("bandit", num_prompts, num_responses, table)


def make_sequence_task(
    vocab: int, length: int, reward_rule: dict | None = None, seed: int = 0, num_prompts: int = 1
) -> TaskSpec:
    """Build a task over all ``vocab ** length`` token strings.

    ``reward_rule`` is one of ``{"type": "match_target", "target": "101"}``,
    ``{"type": "count_matching", "target": "12"}`` or
    ``{"type": "random_table", "lo": 0.0, "hi": 1.0}``.
    """
    if vocab < 1 or length < 1:
        raise TaskError("vocab and length must be positive")
    n = vocab**length
    if n > MAX_RESPONSES:
        raise TaskError(f"vocab**length = {n} exceeds the enumeration bound {MAX_RESPONSES}")
    rule = dict(reward_rule or {"type": "random_table"})
    kind = rule.get("type")
    # digits[y, t] = token at position t of response y
    ids = np.arange(n)
    digits = np.stack([(ids // vocab ** (length - 1 - t)) % vocab for t in range(length)], axis=1)
    if kind in ("match_target", "count_matching"):
        target = np.asarray(parse_tokens(rule["target"]))
        if target.shape != (length,) or np.any((target < 0) | (target >= vocab)):
            raise TaskError(f"target {rule['target']!r} is not a length-{length} string over {vocab} tokens")
        matches = (digits == target).sum(axis=1).astype(np.float64)
        row = (matches == length).astype(np.float64) if kind == "match_target" else matches
        table = np.tile(row, (num_prompts, 1))
    elif kind == "random_table":
        lo, hi = float(rule.get("lo", 0.0)), float(rule.get("hi", 1.0))
        table = np.random.default_rng(seed).uniform(lo, hi, size=(num_prompts, n))
    else:
        raise TaskError(f"unknown sequence reward rule {kind!r}")
    return TaskSpec("sequence", num_prompts, n, table, vocab, length)


def task_from_config(doc: dict[str, Any]) -> TaskSpec:
    """Accept either a serialized TaskSpec (has ``rewards``) or a generator spec."""
    if "rewards" in doc:
        return TaskSpec.from_json(doc)
    kind = doc.get("kind", "bandit")
    seed = int(doc.get("seed", 0))
    if kind == "bandit":
        return make_bandit(int(doc.get("num_prompts", 1)), int(doc["num_responses"]), doc.get("reward_gen"), seed)
    if kind == "sequence":
        return make_sequence_task(
            int(doc["vocab"]), int(doc["length"]), doc.get("reward_rule"), seed, int(doc.get("num_prompts", 1))
        )
    raise TaskError(f"unknown task kind {kind!r}")


def default_instance(seed: int = 0) -> TaskSpec:
    """The 8-prompt x 16-response uniform-reward bandit used by the acceptance checks."""
    return make_bandit(8, 16, {"type": "uniform", "lo": 0.0, "hi": 1.0}, seed)
