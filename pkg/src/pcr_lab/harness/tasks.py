"""Synthetic tasks with verifiable rewards."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from ..model import EOS


class TaskKind(str, Enum):
    REVERSE = "reverse"
    SUM_MOD_VOCAB = "sum_mod_vocab"


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = TaskKind.REVERSE
    query_len: int = 6

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.query_len < 1:
            raise ValueError("query_len must be >= 1")


@dataclass(frozen=True)
class Task:
    query: tuple[int, ...]
    target: tuple[int, ...]
    reward: Callable[[Sequence[int]], float]


def target_for(kind: TaskKind, query: Sequence[int], vocab_size: int) -> tuple[int, ...]:
    kind = TaskKind(kind)
    if kind == TaskKind.REVERSE:
        return tuple(reversed([int(x) for x in query]))
    return (int(sum(int(x) for x in query)) % vocab_size,)


def anchor_for(kind: TaskKind, query: Sequence[int], vocab_size: int) -> tuple[int, ...]:
    """The mapping the reference policy is pre-trained on; opposed to the task target.

    Reverse -> copy the query. Sum -> the additive inverse of the target.
    """
    kind = TaskKind(kind)
    if kind == TaskKind.REVERSE:
        return tuple(int(x) for x in query)
    return ((-int(sum(int(x) for x in query))) % vocab_size,)


def score(response: Sequence[int], target: Sequence[int]) -> float:
    """1.0 on exact match, else the fraction of target positions answered correctly.

    A trailing EOS is ignored; extra tokens count against the match.
    """
    resp = list(response)
    if resp and resp[-1] == EOS and len(resp) > len(target):
        resp = resp[:-1]
    if resp == list(target):
        return 1.0
    hits = sum(1 for a, b in zip(resp, target) if a == b)
    return hits / max(len(target), len(resp))


def sample_query(rng: np.random.Generator, query_len: int, vocab_size: int) -> tuple[int, ...]:
    # ids start at 1: id 0 is end-of-sequence
    return tuple(int(x) for x in rng.integers(1, vocab_size, size=query_len))


def make_task(kind: TaskKind, rng: np.random.Generator, query_len: int = 6, vocab_size: int = 32) -> Task:
    query = sample_query(rng, query_len, vocab_size)
    return task_from_query(kind, query, vocab_size)


def task_from_query(kind: TaskKind, query: Sequence[int], vocab_size: int) -> Task:
    query = tuple(int(x) for x in query)
    target = target_for(kind, query, vocab_size)
    return Task(query, target, lambda response, _t=target: score(response, _t))
