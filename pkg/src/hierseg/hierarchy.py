"""Class hierarchies as ordered levels of leaf-set partitions.

Levels run coarse to fine. The finest level is always the identity
partition (one singleton node per leaf), so summing a loss "over all
levels" is a plain loop over ``ClassHierarchy.levels``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

NORMALIZATION_TOL = 1e-9


class HierarchyError(ValueError):
    """Raised when a hierarchy description is not a valid refinement chain."""


@dataclass(frozen=True)
class Node:
    name: str
    leaves: frozenset[int]


@dataclass(frozen=True)
class ClassHierarchy:
    leaf_names: tuple[str, ...]
    levels: tuple[tuple[Node, ...], ...]

    @property
    def num_leaves(self) -> int:
        return len(self.leaf_names)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> int:
        return self.num_levels - 1

    def node_names(self, level: int) -> list[str]:
        return [node.name for node in self.levels[self._check_level(level)]]

    def node_index(self, level: int, name: str) -> int:
        names = self.node_names(level)
        if name not in names:
            raise KeyError(f"no node {name!r} at level {level}")
        return names.index(name)

    def leaf_index(self, name: str) -> int:
        return self.leaf_names.index(name)

    @cached_property
    def _memberships(self) -> tuple[np.ndarray, ...]:
        mats = []
        for nodes in self.levels:
            m = np.zeros((self.num_leaves, len(nodes)))
            for k, node in enumerate(nodes):
                m[sorted(node.leaves), k] = 1.0
            mats.append(m)
        return tuple(mats)

    @cached_property
    def _projections(self) -> tuple[np.ndarray, ...]:
        return tuple(m.argmax(axis=1) for m in self._memberships)

    def membership(self, level: int) -> np.ndarray:
        """(num_leaves, num_nodes) 0/1 matrix; column k marks the leaves of node k."""
        return self._memberships[self._check_level(level)]

    def projection(self, level: int) -> np.ndarray:
        """Lookup table mapping every leaf index to its node index at ``level``."""
        return self._projections[self._check_level(level)]

    def project_target(self, leaf_label: int, level: int) -> int:
        if not 0 <= leaf_label < self.num_leaves:
            raise IndexError(f"leaf label {leaf_label} out of range [0, {self.num_leaves})")
        return int(self.projection(level)[leaf_label])

    def aggregate_probs(self, leaf_probs: np.ndarray, level: int) -> np.ndarray:
        """Sum leaf probabilities (last axis) into the nodes of ``level``."""
        p = np.asarray(leaf_probs, dtype=float)
        if p.shape[-1] != self.num_leaves:
            raise ValueError(f"expected {self.num_leaves} leaf probabilities, got {p.shape[-1]}")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > NORMALIZATION_TOL):
            raise ValueError("leaf probabilities must be nonnegative and sum to 1 per pixel")
        return p @ self.membership(level)

    def to_dict(self) -> dict:
        levels = [
            {node.name: [self.leaf_names[i] for i in sorted(node.leaves)] for node in nodes}
            for nodes in self.levels[:-1]
        ]
        return {"leaves": list(self.leaf_names), "levels": levels}

    def _check_level(self, level: int) -> int:
        if not 0 <= level < self.num_levels:
            raise IndexError(f"level {level} out of range [0, {self.num_levels})")
        return level


def build_hierarchy(spec: Mapping) -> ClassHierarchy:
    """Validate a ``{"leaves": [...], "levels": [{group: [leaves]}, ...]}`` description.

    ``levels`` lists the coarser levels from coarsest to finest; the leaf
    level is appended automatically and must not be repeated.
    """
    leaves = list(spec.get("leaves") or [])
    if len(leaves) < 2:
        raise HierarchyError("a hierarchy needs at least two leaves")
    if len(set(leaves)) != len(leaves):
        raise HierarchyError(f"duplicate leaf names in {leaves}")
    index = {name: i for i, name in enumerate(leaves)}

    levels: list[tuple[Node, ...]] = []
    for depth, groups in enumerate(spec.get("levels") or []):
        levels.append(_parse_level(groups, index, depth))
    levels.append(tuple(Node(name, frozenset([i])) for i, name in enumerate(leaves)))

    for depth in range(len(levels) - 1):
        finer = levels[depth + 1]
        for node in levels[depth]:
            parts = [child.leaves for child in finer if child.leaves & node.leaves]
            if frozenset().union(*parts) != node.leaves:
                raise HierarchyError(
                    f"node {node.name!r} at level {depth} is not a union of nodes at level {depth + 1}"
                )
    return ClassHierarchy(tuple(leaves), tuple(levels))


def _parse_level(groups: Mapping[str, Sequence[str]], index: Mapping[str, int], depth: int) -> tuple[Node, ...]:
    if not isinstance(groups, Mapping) or not groups:
        raise HierarchyError(f"level {depth} must be a non-empty mapping of group -> leaves")
    nodes = []
    seen: dict[int, str] = {}
    for name, members in groups.items():
        if not members:
            raise HierarchyError(f"group {name!r} at level {depth} is empty")
        ids = set()
        for leaf in members:
            if leaf not in index:
                raise HierarchyError(f"group {name!r} at level {depth} names unknown leaf {leaf!r}")
            i = index[leaf]
            if i in seen:
                raise HierarchyError(
                    f"overlapping groups at level {depth}: {leaf!r} is in both {seen[i]!r} and {name!r}"
                )
            seen[i] = name
            ids.add(i)
        nodes.append(Node(str(name), frozenset(ids)))
    missing = [leaf for leaf, i in index.items() if i not in seen]
    if missing:
        raise HierarchyError(f"level {depth} does not cover leaves {missing}")
    return tuple(nodes)


def flat_hierarchy(leaf_names: Sequence[str]) -> ClassHierarchy:
    return build_hierarchy({"leaves": list(leaf_names)})


def load_hierarchy(path: str | Path) -> ClassHierarchy:
    with open(path) as fh:
        return build_hierarchy(yaml.safe_load(fh))


def default_occlusal_hierarchy() -> ClassHierarchy:
    """Background / MTP / MFP leaves under a Background / FULL parent level."""
    text = resources.files("hierseg").joinpath("configs/occlusal.yaml").read_text()
    return build_hierarchy(yaml.safe_load(text))
