"""Flat vector arithmetic and tagged parameter containers.

Every reduction here is a single left-to-right pass (``np.cumsum`` is strictly
sequential, unlike ``np.sum`` which uses pairwise summation), so results are
bit-reproducible and ``dot(a, b) == dot(b, a)`` holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np


class StructureError(ValueError):
    """Raised when vectors or parameter sets do not line up."""


class LayerTag(str, Enum):
    MLP = "mlp"
    ATTENTION = "attention"
    NORM = "norm"
    EMBEDDING = "embedding"
    HEAD = "head"


def as_vec(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float64).reshape(-1)


def seq_sum(x: np.ndarray) -> float:
    """Left-to-right sum of a flat array."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        return 0.0
    return float(np.cumsum(x)[-1])


def dot(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise StructureError(f"length mismatch: {a.size} vs {b.size}")
    return seq_sum(a * b)


def norm_sq(a) -> float:
    return dot(a, a)


def norm(a) -> float:
    return float(np.sqrt(norm_sq(a)))


@dataclass(frozen=True)
class Entry:
    name: str
    tag: LayerTag
    value: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    @property
    def size(self) -> int:
        return int(self.value.size)


class ParamSet:
    """Ordered, uniquely named collection of tagged float64 tensors.

    Arithmetic treats each tensor as a flat vector; shapes are carried along
    for the model and for checkpoints.
    """

    def __init__(self, entries: Iterable[Entry | tuple]):
        items = []
        for e in entries:
            if not isinstance(e, Entry):
                name, tag, value = e
                e = Entry(name, LayerTag(tag), np.array(value, dtype=np.float64))
            items.append(e)
        names = [e.name for e in items]
        if len(set(names)) != len(names):
            raise StructureError("duplicate parameter names")
        if not items or sum(e.size for e in items) < 1:
            raise StructureError("parameter set must have total dimension >= 1")
        self._entries: tuple[Entry, ...] = tuple(items)
        self._index = {e.name: i for i, e in enumerate(items)}

    @property
    def entries(self) -> tuple[Entry, ...]:
        return self._entries

    def __iter__(self) -> Iterator[Entry]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[self._index[name]].value

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __repr__(self) -> str:
        inner = ", ".join(f"{e.name}:{e.tag.value}{list(e.shape)}" for e in self._entries)
        return f"{type(self).__name__}({inner})"

    def names(self) -> list[str]:
        return [e.name for e in self._entries]

    def tag_of(self, name: str) -> LayerTag:
        return self._entries[self._index[name]].tag

    @property
    def dim(self) -> int:
        return sum(e.size for e in self._entries)

    def signature(self) -> tuple:
        return tuple((e.name, e.tag, e.shape) for e in self._entries)

    def congruent(self, other: "ParamSet") -> bool:
        return self.signature() == other.signature()

    def check_congruent(self, other: "ParamSet") -> None:
        if not self.congruent(other):
            raise StructureError("incongruent parameter structures")

    def flat(self) -> np.ndarray:
        return np.concatenate([e.value.reshape(-1) for e in self._entries])

    def with_flat(self, flat: np.ndarray, cls: Optional[type] = None) -> "ParamSet":
        flat = as_vec(flat)
        if flat.size != self.dim:
            raise StructureError(f"flat length {flat.size} != dim {self.dim}")
        out, off = [], 0
        for e in self._entries:
            out.append(Entry(e.name, e.tag, flat[off:off + e.size].reshape(e.shape).copy()))
            off += e.size
        return (cls or type(self))(out)

    def map(self, fn: Callable[[np.ndarray], np.ndarray], cls: Optional[type] = None) -> "ParamSet":
        return (cls or type(self))(
            Entry(e.name, e.tag, np.asarray(fn(e.value), dtype=np.float64).reshape(e.shape))
            for e in self._entries
        )

    def copy(self) -> "ParamSet":
        return self.map(np.copy)

    def zeros_like(self, cls: Optional[type] = None) -> "ParamSet":
        return self.map(np.zeros_like, cls=cls)

    def replace(self, name: str, value: np.ndarray) -> "ParamSet":
        out = []
        for e in self._entries:
            if e.name == name:
                value = np.array(value, dtype=np.float64).reshape(e.shape)
                e = Entry(e.name, e.tag, value)
            out.append(e)
        return type(self)(out)

    def all_finite(self) -> bool:
        return all(np.isfinite(e.value).all() for e in self._entries)


class GradSet(ParamSet):
    """Gradient mirror of a ParamSet (same names, tags, shapes, order)."""

    @classmethod
    def zeros_for(cls, params: ParamSet) -> "GradSet":
        return params.zeros_like(cls=cls)


def saxpy_into(dst: ParamSet, scale: float, src: ParamSet) -> ParamSet:
    """In place ``dst += scale * src``, layer by layer; returns ``dst``."""
    dst.check_congruent(src)
    for d, s in zip(dst.entries, src.entries):
        d.value[...] = d.value + scale * s.value
    return dst


def axpy(dst: ParamSet, scale: float, src: ParamSet) -> GradSet:
    out = dst.map(np.copy, cls=GradSet)
    return saxpy_into(out, scale, src)


def scaled(g: ParamSet, c: float) -> GradSet:
    return g.map(lambda v: c * v, cls=GradSet)


def mean_of(sets: Sequence[ParamSet]) -> GradSet:
    """Arithmetic mean, accumulated in list order."""
    if not sets:
        raise StructureError("mean of an empty list")
    acc = sets[0].map(np.copy, cls=GradSet)
    for s in sets[1:]:
        saxpy_into(acc, 1.0, s)
    return scaled(acc, 1.0 / len(sets))


def layer_slices(g: ParamSet, tag_filter: Optional[LayerTag] = None) -> list[tuple[str, np.ndarray]]:
    """(name, flattened view) pairs in canonical order, optionally filtered by tag."""
    return [
        (e.name, e.value.reshape(-1))
        for e in g.entries
        if tag_filter is None or e.tag == LayerTag(tag_filter)
    ]


def set_norm(g: ParamSet) -> float:
    return norm(g.flat())


def set_dot(a: ParamSet, b: ParamSet) -> float:
    a.check_congruent(b)
    return dot(a.flat(), b.flat())
