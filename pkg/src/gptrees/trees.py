"""Binary decision trees with axis-aligned, categorical and rotated splits.

Trees are immutable: every structural move returns a fresh tree that shares
the untouched nodes with its parent.  Each tree carries the assignment of
the training rows to its leaves, so leaf membership never has to be
re-derived during sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
ROTATED = "rotated"

GROW = "grow"
GROW_PROJECT = "grow-project"
CHANGE = "change"
CHANGE_PROJECT = "change-project"
PRUNE = "prune"

ALL_MOVES = (GROW, GROW_PROJECT, CHANGE, CHANGE_PROJECT, PRUNE)


def rotate_pair(x_a: float, x_b: float, angle: float):
    """Rotate the point (x_a, x_b) by ``angle`` radians counter-clockwise.

    Returns the pair (x_a cos - x_b sin, x_a sin + x_b cos).  Length
    preserving for any angle.
    """
    c, s = math.cos(angle), math.sin(angle)
    return (x_a * c - x_b * s, x_a * s + x_b * c)


@dataclass(frozen=True)
class SplitRule:
    """A routing rule attached to an internal node.

    ``kind`` selects the variant: ``continuous`` uses (var, cut) and sends a
    row left iff x[var] <= cut; ``categorical`` uses (var, levels) and sends
    a row left iff its level code is in ``levels``; ``rotated`` uses
    (var_a, var_b, angle, cut) and sends a row left iff the second rotated
    coordinate x[var_a]*sin + x[var_b]*cos is <= cut.
    """

    kind: str
    var: int = -1
    cut: float = 0.0
    levels: frozenset = frozenset()
    var_a: int = -1
    var_b: int = -1
    angle: float = 0.0

    def goes_left(self, row) -> bool:
        if self.kind == CONTINUOUS:
            return row[self.var] <= self.cut
        if self.kind == CATEGORICAL:
            return row[self.var] in self.levels
        z = row[self.var_a] * math.sin(self.angle) + row[self.var_b] * math.cos(self.angle)
        return z <= self.cut

    def left_mask(self, X: np.ndarray) -> np.ndarray:
        """Vectorised goes_left over the rows of X."""
        if self.kind == CONTINUOUS:
            return X[:, self.var] <= self.cut
        if self.kind == CATEGORICAL:
            return np.isin(X[:, self.var], list(self.levels))
        z = X[:, self.var_a] * math.sin(self.angle) + X[:, self.var_b] * math.cos(self.angle)
        return z <= self.cut


@dataclass(frozen=True)
class Node:
    id: int
    parent: int
    depth: int
    rule: Optional[SplitRule] = None
    left: int = -1
    right: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.rule is None


@dataclass(frozen=True)
class DecisionTree:
    """Strictly binary tree plus the leaf assignment of the training rows."""

    nodes: dict
    leaf_assignments: np.ndarray
    next_id: int = 1

    @staticmethod
    def stump(n_rows: int) -> "DecisionTree":
        root = Node(id=0, parent=-1, depth=0)
        return DecisionTree(
            nodes={0: root},
            leaf_assignments=np.zeros(n_rows, dtype=np.int64),
            next_id=1,
        )

    @property
    def is_stump(self) -> bool:
        return len(self.nodes) == 1

    def leaf_ids(self) -> list:
        return sorted(i for i, nd in self.nodes.items() if nd.is_leaf)

    def internal_ids(self) -> list:
        return sorted(i for i, nd in self.nodes.items() if not nd.is_leaf)

    def prunable_ids(self) -> list:
        """Internal nodes whose two children are both leaves."""
        out = []
        for i in self.internal_ids():
            nd = self.nodes[i]
            if self.nodes[nd.left].is_leaf and self.nodes[nd.right].is_leaf:
                out.append(i)
        return out

    def leaf_rows(self, leaf_id: int) -> np.ndarray:
        return np.flatnonzero(self.leaf_assignments == leaf_id)

    def n_leaves(self) -> int:
        return sum(1 for nd in self.nodes.values() if nd.is_leaf)

    def max_depth(self) -> int:
        return max(nd.depth for nd in self.nodes.values())


def route(tree: DecisionTree, row, diagnostics: Optional[dict] = None) -> int:
    """Send one covariate row down the tree; returns the leaf id reached.

    Level codes outside the training dictionary are encoded negative by the
    loader; they fail every categorical membership test and therefore fall
    to the right child.  When ``diagnostics`` is given, such encounters are
    counted under the key ``"unknown_level"``.
    """
    node = tree.nodes[0]
    while not node.is_leaf:
        rule = node.rule
        if rule.kind == CATEGORICAL and row[rule.var] < 0 and diagnostics is not None:
            diagnostics["unknown_level"] = diagnostics.get("unknown_level", 0) + 1
        node = tree.nodes[node.left if rule.goes_left(row) else node.right]
    return node.id


def assign_rows(tree: DecisionTree, X: np.ndarray, diagnostics: Optional[dict] = None) -> np.ndarray:
    """Vectorised routing of every row of X; returns an array of leaf ids."""
    out = np.empty(X.shape[0], dtype=np.int64)
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        node_id, rows = stack.pop()
        node = tree.nodes[node_id]
        if node.is_leaf:
            out[rows] = node_id
            continue
        rule = node.rule
        if rule.kind == CATEGORICAL and diagnostics is not None:
            n_unknown = int(np.count_nonzero(X[rows, rule.var] < 0))
            if n_unknown:
                diagnostics["unknown_level"] = diagnostics.get("unknown_level", 0) + n_unknown
        mask = rule.left_mask(X[rows])
        stack.append((node.left, rows[mask]))
        stack.append((node.right, rows[~mask]))
    return out


def log_tree_prior(tree: DecisionTree, alpha: float, beta: float) -> float:
    """Log prior of the tree topology under the depth-penalised split prior.

    Each internal node at depth d contributes log(alpha * (1+d)^-beta) and
    each leaf contributes log(1 - alpha * (1+d)^-beta).  Rule-selection
    probabilities are symmetric between proposal and prior and are excluded.
    """
    total = 0.0
    for nd in tree.nodes.values():
        p_split = alpha * (1.0 + nd.depth) ** (-beta)
        total += math.log(1.0 - p_split) if nd.is_leaf else math.log(p_split)
    return total


@dataclass(frozen=True)
class MoveConfig:
    """Everything a move proposal needs to know about the data and policy."""

    move_probs: dict
    angle_grid: tuple
    continuous_cols: tuple
    categorical_cols: tuple
    rotation_cols: tuple
    min_leaf: int = 1

    @property
    def split_cols(self) -> tuple:
        return tuple(self.continuous_cols) + tuple(self.categorical_cols)


@dataclass(frozen=True)
class MoveProposal:
    kind: str
    node_ids: tuple = ()
    tree: Optional[DecisionTree] = None
    valid: bool = False
    old_leaf_ids: tuple = ()
    new_leaf_ids: tuple = ()


def _sample_axis_rule(X, rows, cfg: MoveConfig, rng) -> SplitRule:
    var = int(cfg.split_cols[rng.integers(len(cfg.split_cols))])
    if var in cfg.categorical_cols:
        branch_levels = np.unique(X[rows, var])
        level = float(branch_levels[rng.integers(len(branch_levels))])
        return SplitRule(kind=CATEGORICAL, var=var, levels=frozenset([level]))
    col = X[rows, var]
    lo, hi = float(col.min()), float(col.max())
    return SplitRule(kind=CONTINUOUS, var=var, cut=float(rng.uniform(lo, hi)))


def _sample_rotated_rule(X, rows, cfg: MoveConfig, rng) -> Optional[SplitRule]:
    if len(cfg.rotation_cols) < 2:
        return None
    pick = rng.choice(len(cfg.rotation_cols), size=2, replace=False)
    var_a = int(cfg.rotation_cols[pick[0]])
    var_b = int(cfg.rotation_cols[pick[1]])
    angle = float(cfg.angle_grid[rng.integers(len(cfg.angle_grid))])
    z = X[rows, var_a] * math.sin(angle) + X[rows, var_b] * math.cos(angle)
    cut = float(rng.uniform(float(z.min()), float(z.max())))
    return SplitRule(kind=ROTATED, var_a=var_a, var_b=var_b, angle=angle, cut=cut)


def _with_split(tree: DecisionTree, X, leaf_id: int, rule: SplitRule, min_leaf: int):
    """Try to split ``leaf_id`` with ``rule``; None when a side ends up too small."""
    rows = tree.leaf_rows(leaf_id)
    mask = rule.left_mask(X[rows])
    n_left = int(mask.sum())
    if n_left < min_leaf or rows.size - n_left < min_leaf:
        return None
    parent = tree.nodes[leaf_id]
    left_id, right_id = tree.next_id, tree.next_id + 1
    nodes = dict(tree.nodes)
    nodes[leaf_id] = Node(id=leaf_id, parent=parent.parent, depth=parent.depth,
                          rule=rule, left=left_id, right=right_id)
    nodes[left_id] = Node(id=left_id, parent=leaf_id, depth=parent.depth + 1)
    nodes[right_id] = Node(id=right_id, parent=leaf_id, depth=parent.depth + 1)
    assignments = tree.leaf_assignments.copy()
    assignments[rows[mask]] = left_id
    assignments[rows[~mask]] = right_id
    return DecisionTree(nodes=nodes, leaf_assignments=assignments, next_id=right_id + 1), (left_id, right_id)


def _with_pruned(tree: DecisionTree, node_id: int):
    node = tree.nodes[node_id]
    nodes = dict(tree.nodes)
    del nodes[node.left]
    del nodes[node.right]
    nodes[node_id] = Node(id=node_id, parent=node.parent, depth=node.depth)
    assignments = tree.leaf_assignments.copy()
    assignments[(assignments == node.left) | (assignments == node.right)] = node_id
    return DecisionTree(nodes=nodes, leaf_assignments=assignments, next_id=tree.next_id)


def _with_changed(tree: DecisionTree, X, node_id: int, rule: SplitRule, min_leaf: int):
    """Re-route the rows of a depth-one internal node through a new rule."""
    node = tree.nodes[node_id]
    rows = np.flatnonzero((tree.leaf_assignments == node.left)
                          | (tree.leaf_assignments == node.right))
    mask = rule.left_mask(X[rows])
    n_left = int(mask.sum())
    if n_left < min_leaf or rows.size - n_left < min_leaf:
        return None
    nodes = dict(tree.nodes)
    nodes[node_id] = Node(id=node_id, parent=node.parent, depth=node.depth,
                          rule=rule, left=node.left, right=node.right)
    assignments = tree.leaf_assignments.copy()
    assignments[rows[mask]] = node.left
    assignments[rows[~mask]] = node.right
    return DecisionTree(nodes=nodes, leaf_assignments=assignments, next_id=tree.next_id)


def sample_move_kind(tree: DecisionTree, cfg: MoveConfig, rng) -> str:
    """Pick a move kind; stumps only ever receive grow-type proposals."""
    if tree.is_stump:
        kinds = [m for m in (GROW, GROW_PROJECT) if cfg.move_probs.get(m, 0.0) > 0.0]
        probs = np.full(len(kinds), 1.0 / len(kinds))
    else:
        kinds = [m for m in ALL_MOVES if cfg.move_probs.get(m, 0.0) > 0.0]
        probs = np.array([cfg.move_probs[m] for m in kinds])
        probs = probs / probs.sum()
    return kinds[int(rng.choice(len(kinds), p=probs))]


def propose_move(tree: DecisionTree, X: np.ndarray, cfg: MoveConfig, rng,
                 kind: Optional[str] = None) -> MoveProposal:
    """Draw one structural move proposal.

    Invalid proposals (no applicable node, an undersized child, or no
    available variable pair for a projection move) come back with
    ``valid=False`` and count as rejections in the MH step.
    """
    if kind is None:
        kind = sample_move_kind(tree, cfg, rng)

    if kind in (GROW, GROW_PROJECT):
        leaves = tree.leaf_ids()
        leaf_id = leaves[int(rng.integers(len(leaves)))]
        rows = tree.leaf_rows(leaf_id)
        if kind == GROW:
            rule = _sample_axis_rule(X, rows, cfg, rng)
        else:
            rule = _sample_rotated_rule(X, rows, cfg, rng)
            if rule is None:
                return MoveProposal(kind=kind, node_ids=(leaf_id,))
        split = _with_split(tree, X, leaf_id, rule, cfg.min_leaf)
        if split is None:
            return MoveProposal(kind=kind, node_ids=(leaf_id,))
        new_tree, (left_id, right_id) = split
        return MoveProposal(kind=kind, node_ids=(leaf_id,), tree=new_tree, valid=True,
                            old_leaf_ids=(leaf_id,), new_leaf_ids=(left_id, right_id))

    candidates = tree.prunable_ids()
    if not candidates:
        return MoveProposal(kind=kind)
    node_id = candidates[int(rng.integers(len(candidates)))]
    node = tree.nodes[node_id]

    if kind == PRUNE:
        return MoveProposal(kind=kind, node_ids=(node_id,), tree=_with_pruned(tree, node_id),
                            valid=True, old_leaf_ids=(node.left, node.right),
                            new_leaf_ids=(node_id,))

    rows = np.flatnonzero((tree.leaf_assignments == node.left)
                          | (tree.leaf_assignments == node.right))
    if kind == CHANGE:
        rule = _sample_axis_rule(X, rows, cfg, rng)
    else:
        rule = _sample_rotated_rule(X, rows, cfg, rng)
        if rule is None:
            return MoveProposal(kind=kind, node_ids=(node_id,))
    changed = _with_changed(tree, X, node_id, rule, cfg.min_leaf)
    if changed is None:
        return MoveProposal(kind=kind, node_ids=(node_id,))
    return MoveProposal(kind=kind, node_ids=(node_id,), tree=changed, valid=True,
                        old_leaf_ids=(node.left, node.right),
                        new_leaf_ids=(node.left, node.right))


def check_partition(tree: DecisionTree, n_rows: int) -> None:
    """Assert the leaves partition the training rows; used by test mode."""
    leaf_ids = set(tree.leaf_ids())
    seen = np.zeros(n_rows, dtype=bool)
    for lid in leaf_ids:
        rows = tree.leaf_rows(lid)
        if rows.size == 0:
            raise AssertionError(f"leaf {lid} is empty")
        if seen[rows].any():
            raise AssertionError("leaf row sets overlap")
        seen[rows] = True
    if not seen.all():
        raise AssertionError("rows missing from every leaf")
    assigned = set(np.unique(tree.leaf_assignments).tolist())
    if assigned != leaf_ids:
        raise AssertionError("assignment ids do not match the leaf set")


def tree_to_records(tree: DecisionTree) -> list:
    """Flat node-list encoding used by the posterior stream."""
    records = []
    for nid in sorted(tree.nodes):
        nd = tree.nodes[nid]
        rec = {"id": nd.id, "parent": nd.parent, "depth": nd.depth,
               "terminal": nd.is_leaf}
        if nd.rule is not None:
            rule = nd.rule
            rec["left"] = nd.left
            rec["right"] = nd.right
            rec["kind"] = rule.kind
            if rule.kind == CONTINUOUS:
                rec["var"] = rule.var
                rec["cut"] = rule.cut
            elif rule.kind == CATEGORICAL:
                rec["var"] = rule.var
                rec["levels"] = sorted(rule.levels)
            else:
                rec["var_a"] = rule.var_a
                rec["var_b"] = rule.var_b
                rec["angle"] = rule.angle
                rec["cut"] = rule.cut
        records.append(rec)
    return records


def tree_from_records(records: list, X: np.ndarray) -> DecisionTree:
    """Rebuild a tree from its flat encoding and re-derive leaf assignments."""
    nodes = {}
    for rec in records:
        rule = None
        terminal = rec.get("terminal", "kind" not in rec)
        if not terminal:
            kind = rec["kind"]
            if kind == CONTINUOUS:
                rule = SplitRule(kind=kind, var=int(rec["var"]), cut=float(rec["cut"]))
            elif kind == CATEGORICAL:
                rule = SplitRule(kind=kind, var=int(rec["var"]),
                                 levels=frozenset(float(v) for v in rec["levels"]))
            elif kind == ROTATED:
                rule = SplitRule(kind=kind, var_a=int(rec["var_a"]), var_b=int(rec["var_b"]),
                                 angle=float(rec["angle"]), cut=float(rec["cut"]))
            else:
                raise ValueError(f"unknown rule kind {kind!r}")
        nodes[int(rec["id"])] = Node(
            id=int(rec["id"]), parent=int(rec["parent"]), depth=int(rec["depth"]),
            rule=rule, left=int(rec.get("left", -1)), right=int(rec.get("right", -1)),
        )
    tree = DecisionTree(nodes=nodes, leaf_assignments=np.zeros(X.shape[0], dtype=np.int64),
                        next_id=max(nodes) + 1)
    return DecisionTree(nodes=nodes, leaf_assignments=assign_rows(tree, X),
                        next_id=max(nodes) + 1)
