"""Deterministic structural causal models: evaluation, clamping, interchange."""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .geometry import OcclusionGrid, OrientedBox, Pose2D


class Tag(str, Enum):
    """Value kind carried by a node; fixed per node for the life of a graph."""

    BOOL = "boolean"
    SCALAR = "scalar"
    POSE2D = "pose2d"
    BOX = "oriented-box"
    BOX_LIST = "box-list"
    FEATURE = "feature-vector"
    FEATURE_LIST = "feature-list"
    POSE_LIST = "pose-list"
    GRID = "occupancy-grid"
    ORACLE = "oracle"


class StructuralError(ValueError):
    """Malformed graph: cycle, missing equation, bad output node."""


class TagMismatch(TypeError):
    pass


def _is_feature(v) -> bool:
    return isinstance(v, np.ndarray) and v.ndim == 1 and v.dtype.kind == "f"


_CHECKS: dict[Tag, Callable[[Any], bool]] = {
    Tag.BOOL: lambda v: isinstance(v, (bool, np.bool_)),
    Tag.SCALAR: lambda v: isinstance(v, (int, float, np.integer, np.floating))
    and not isinstance(v, (bool, np.bool_)),
    Tag.POSE2D: lambda v: isinstance(v, Pose2D),
    Tag.BOX: lambda v: isinstance(v, OrientedBox),
    Tag.BOX_LIST: lambda v: isinstance(v, tuple) and all(isinstance(b, OrientedBox) for b in v),
    Tag.FEATURE: _is_feature,
    Tag.FEATURE_LIST: lambda v: isinstance(v, tuple) and all(_is_feature(f) for f in v),
    Tag.POSE_LIST: lambda v: isinstance(v, tuple) and all(isinstance(p, Pose2D) for p in v),
    Tag.GRID: lambda v: isinstance(v, OcclusionGrid),
    Tag.ORACLE: lambda v: True,
}


def check_tag(tag: Tag, value: Any) -> bool:
    return _CHECKS[tag](value)


@dataclass(frozen=True)
class Node:
    name: str
    tag: Tag
    parents: tuple[str, ...] = ()
    equation: Callable[..., Any] | None = None


def _topo(names: Iterable[str], parents: Mapping[str, Sequence[str]]) -> list[str]:
    names = list(names)
    children: dict[str, list[str]] = {n: [] for n in names}
    indeg = {n: 0 for n in names}
    for n in names:
        for p in parents.get(n, ()):
            if p not in children:
                raise StructuralError(f"node {n!r} has unknown parent {p!r}")
            children[p].append(n)
            indeg[n] += 1
    heap = [n for n in names if indeg[n] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for c in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, c)
    if len(order) != len(names):
        left = {n for n in names if indeg[n] > 0}
        raise StructuralError(f"cycle detected through node {_on_cycle(left, children)!r}")
    return order


def _on_cycle(left: set[str], children: Mapping[str, list[str]]) -> str:
    # smallest-named node that can reach itself
    for start in sorted(left):
        stack = [c for c in children[start] if c in left]
        seen = set()
        while stack:
            n = stack.pop()
            if n == start:
                return start
            if n in seen:
                continue
            seen.add(n)
            stack.extend(c for c in children[n] if c in left)
    return min(left)


class CausalGraph:
    """Immutable DAG of named nodes with structural equations.

    Nodes without parents are inputs; every other node needs an equation
    taking its parents' values positionally in declared order.
    """

    def __init__(self, nodes: Sequence[Node], output: str):
        by_name: dict[str, Node] = {}
        for node in nodes:
            if node.name in by_name:
                raise StructuralError(f"duplicate node {node.name!r}")
            by_name[node.name] = node
        if output not in by_name:
            raise StructuralError(f"output node {output!r} not declared")
        if by_name[output].tag is not Tag.BOOL:
            raise StructuralError(f"output node {output!r} must be boolean")
        for node in nodes:
            if node.parents and node.equation is None:
                raise StructuralError(f"non-input node {node.name!r} lacks an equation")
        self._nodes = by_name
        self._order = tuple(_topo(by_name, {n: v.parents for n, v in by_name.items()}))
        self.output = output
        self.inputs = frozenset(n for n, v in by_name.items() if not v.parents)
        self._steps = tuple(
            (n, by_name[n].parents, by_name[n].equation) for n in self._order
        )

    @property
    def order(self) -> tuple[str, ...]:
        return self._order

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._nodes)

    def tag(self, name: str) -> Tag:
        return self._nodes[name].tag

    def parents(self, name: str) -> tuple[str, ...]:
        return self._nodes[name].parents

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def intermediates(self) -> list[str]:
        return [n for n in self._order if n not in self.inputs and n != self.output]

    def ancestors(self, name: str) -> set[str]:
        out: set[str] = set()
        stack = list(self._nodes[name].parents)
        while stack:
            n = stack.pop()
            if n not in out:
                out.add(n)
                stack.extend(self._nodes[n].parents)
        return out

    def to_text(self) -> str:
        """One ``node name: tag`` line per node then one ``edge p -> c`` per edge."""
        lines = [f"node {n}: {self._nodes[n].tag.value}" for n in self._order]
        for n in self._order:
            for p in self._nodes[n].parents:
                lines.append(f"edge {p} -> {n}")
        return "\n".join(lines) + "\n"


def topo_order(graph: CausalGraph | tuple[Sequence[str], Mapping[str, Sequence[str]]]) -> list[str]:
    """Parents-first order, ties broken lexicographically.

    Accepts a built graph or a raw ``(names, parents)`` pair; the latter is
    how cycles surface, since a cyclic graph cannot be constructed.
    """
    if isinstance(graph, CausalGraph):
        return list(graph.order)
    names, parents = graph
    return _topo(names, parents)


def _check(graph: CausalGraph, name: str, value: Any, what: str) -> None:
    tag = graph.tag(name)
    if not _CHECKS[tag](value):
        raise TagMismatch(f"{what} value for {name!r} is not a {tag.value}: {type(value).__name__}")


def forward(
    graph: CausalGraph,
    inputs: Mapping[str, Any],
    do: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """Evaluate every node; clamped nodes take their ``do`` value verbatim."""
    do = do or {}
    missing = graph.inputs.difference(inputs)
    if missing:
        raise KeyError(f"assignment missing inputs {sorted(missing)}")
    extra = set(inputs).difference(graph.inputs)
    if extra:
        raise KeyError(f"assignment has non-input nodes {sorted(extra)}")
    for name, value in do.items():
        if name not in graph:
            raise KeyError(f"unknown node {name!r} in intervention")
        _check(graph, name, value, "intervention")
    values: dict[str, Any] = {}
    for name, parents, eq in graph._steps:
        if name in do:
            values[name] = do[name]
        elif eq is None:
            v = inputs[name]
            _check(graph, name, v, "input")
            values[name] = v
        else:
            values[name] = eq(*[values[p] for p in parents])
    return values


def interchange(
    graph: CausalGraph,
    base: Mapping[str, Any],
    source: Mapping[str, Any],
    nodes: Sequence[str],
) -> Any:
    """Output of ``base`` with ``nodes`` clamped to their values under ``source``."""
    for n in nodes:
        if n not in graph:
            raise KeyError(f"unknown node {n!r}")
    src = forward(graph, source)
    return forward(graph, base, {n: src[n] for n in nodes})[graph.output]
