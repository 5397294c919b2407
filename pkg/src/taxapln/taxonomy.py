"""Taxonomic tree representation and hierarchical count propagation.

A tree is built from pipe-delimited lineage strings (MetaPhlAn-style, e.g.
``k__Bacteria|p__Firmicutes|...``). Nodes at level ``l`` are the distinct
lineage prefixes of length ``l``, ordered by first appearance, so every
downstream index map is deterministic. Trees are immutable after
construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateLeafError,
    EmptyInputError,
    LengthMismatchError,
    RaggedLineageError,
    ShapeMismatchError,
)


@dataclass(frozen=True)
class TaxonomyTree:
    """Fixed hierarchy over taxa.

    ``children[l][k]`` holds the indices (at level ``l + 1``) of the children
    of node ``k`` at level ``l``; child sets at each level partition the full
    index range of the next level. ``names[l][k]`` is the full lineage prefix
    identifying the node.
    """

    layer_sizes: tuple[int, ...]
    children: tuple[tuple[tuple[int, ...], ...], ...]
    names: tuple[tuple[str, ...], ...]
    parents: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        if len(self.layer_sizes) < 1:
            raise EmptyInputError("tree needs at least one level")
        parents = []
        for lev, childsets in enumerate(self.children):
            size_next = self.layer_sizes[lev + 1]
            par = [-1] * size_next
            seen = 0
            for k, childset in enumerate(childsets):
                for j in childset:
                    if par[j] != -1:
                        raise ShapeMismatchError(
                            f"node {j} at level {lev + 1} has two parents"
                        )
                    par[j] = k
                seen += len(childset)
            if seen != size_next or any(p == -1 for p in par):
                raise ShapeMismatchError(
                    f"child sets at level {lev} do not partition level {lev + 1}"
                )
            parents.append(tuple(par))
        object.__setattr__(self, "parents", tuple(parents))

    @property
    def levels(self) -> int:
        return len(self.layer_sizes)

    @property
    def n_leaves(self) -> int:
        return self.layer_sizes[-1]

    @property
    def leaf_names(self) -> tuple[str, ...]:
        return self.names[-1]

    def display_name(self, level: int, node: int) -> str:
        """Last lineage segment with any rank prefix (e.g. ``s__``) stripped."""
        seg = self.names[level][node].split("|")[-1]
        if len(seg) > 3 and seg[1:3] == "__":
            return seg[3:]
        return seg

    def to_json(self) -> str:
        doc = {
            "layer_sizes": list(self.layer_sizes),
            "levels": [
                [
                    {
                        "name": self.names[lev][k],
                        "level": lev,
                        "children": list(self.children[lev][k])
                        if lev < self.levels - 1
                        else [],
                    }
                    for k in range(self.layer_sizes[lev])
                ]
                for lev in range(self.levels)
            ],
        }
        return json.dumps(doc, sort_keys=True)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass(frozen=True)
class HierarchicalCounts:
    """Per-level nonnegative count vectors for a single sample."""

    levels: tuple[np.ndarray, ...]

    def __iter__(self):
        return iter(self.levels)


def parse_lineages(
    lineage_strings: list[str],
    depth_range: tuple[int, int] | None = None,
) -> TaxonomyTree:
    """Build a taxonomy from pipe-delimited lineages.

    ``depth_range`` is a 1-based inclusive ``(first_level, last_level)``
    window over the rank segments; ``None`` keeps the full depth. Leaves are
    the input lineages in input order; internal nodes are deduplicated
    prefixes in first-appearance order.
    """
    if not lineage_strings:
        raise EmptyInputError("no lineages given")
    split = [s.split("|") for s in lineage_strings]
    depth = len(split[0])
    for s, parts in zip(lineage_strings, split):
        if len(parts) != depth:
            raise RaggedLineageError(
                f"lineage {s!r} has {len(parts)} ranks, expected {depth}"
            )
    if depth_range is not None:
        first, last = depth_range
        if not (1 <= first <= last <= depth):
            raise EmptyInputError(f"invalid depth range {depth_range} for depth {depth}")
        split = [parts[first - 1 : last] for parts in split]
        depth = last - first + 1

    full = ["|".join(parts) for parts in split]
    if len(set(full)) != len(full):
        dup = sorted({s for s in full if full.count(s) > 1})
        raise DuplicateLeafError(f"duplicate leaf lineages: {dup[:3]}")

    # per-level first-appearance index of each prefix
    names: list[list[str]] = [[] for _ in range(depth)]
    index: list[dict[str, int]] = [{} for _ in range(depth)]
    for parts in split:
        for lev in range(depth):
            prefix = "|".join(parts[: lev + 1])
            if prefix not in index[lev]:
                index[lev][prefix] = len(names[lev])
                names[lev].append(prefix)

    children: list[list[list[int]]] = [
        [[] for _ in names[lev]] for lev in range(depth - 1)
    ]
    for lev in range(depth - 1):
        for child_idx, child_name in enumerate(names[lev + 1]):
            parent_name = child_name.rsplit("|", 1)[0]
            children[lev][index[lev][parent_name]].append(child_idx)

    return TaxonomyTree(
        layer_sizes=tuple(len(n) for n in names),
        children=tuple(tuple(tuple(cs) for cs in level) for level in children),
        names=tuple(tuple(n) for n in names),
    )


def aggregate_counts(tree: TaxonomyTree, leaf_counts: np.ndarray) -> HierarchicalCounts:
    """Propagate leaf counts up the tree by child summation."""
    mats = aggregate_matrix(tree, np.asarray(leaf_counts)[None, :])
    return HierarchicalCounts(levels=tuple(m[0] for m in mats))


def aggregate_matrix(tree: TaxonomyTree, leaf_matrix: np.ndarray) -> list[np.ndarray]:
    """Batched aggregation: (n, K_L) leaves -> list of (n, K_l) per level."""
    leaf_matrix = np.asarray(leaf_matrix)
    if leaf_matrix.ndim != 2 or leaf_matrix.shape[1] != tree.n_leaves:
        raise LengthMismatchError(
            f"expected (n, {tree.n_leaves}) leaf matrix, got {leaf_matrix.shape}"
        )
    if np.any(leaf_matrix < 0):
        raise LengthMismatchError("leaf counts must be nonnegative")
    levels = [None] * tree.levels
    levels[-1] = leaf_matrix
    for lev in range(tree.levels - 2, -1, -1):
        out = np.empty((leaf_matrix.shape[0], tree.layer_sizes[lev]), dtype=leaf_matrix.dtype)
        for k, childset in enumerate(tree.children[lev]):
            out[:, k] = levels[lev + 1][:, list(childset)].sum(axis=1)
        levels[lev] = out
    return levels


def validate_hierarchy(
    tree: TaxonomyTree, counts: HierarchicalCounts
) -> tuple[int, int] | None:
    """Return the first (level, node) violating the parent-sum rule, or None."""
    if len(counts.levels) != tree.levels:
        raise ShapeMismatchError(
            f"expected {tree.levels} levels, got {len(counts.levels)}"
        )
    for lev, vec in enumerate(counts.levels):
        if vec.shape != (tree.layer_sizes[lev],):
            raise ShapeMismatchError(
                f"level {lev} has shape {vec.shape}, expected ({tree.layer_sizes[lev]},)"
            )
    for lev in range(tree.levels - 1):
        for k, childset in enumerate(tree.children[lev]):
            if counts.levels[lev][k] != counts.levels[lev + 1][list(childset)].sum():
                return (lev, k)
    return None
