"""Pre-allocated scenario-tree storage with implicit child addressing.

Nodes of a depth-limited, fixed-branching tree live in flat parallel arrays
indexed 0..capacity-1, level by level.  The i-th child (1-based) of node v
sits at branching*v + i, so the structure needs no pointers, and a planner
can clear it between cycles without reallocating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Indices are int64; stop well short of anything that could not be allocated.
MAX_CAPACITY = 1 << 40


def tree_capacity(depth_limit: int, branching: int) -> int:
    """Node count of a balanced tree: sum of branching**d for d in 0..depth_limit."""
    if depth_limit < 0 or branching < 1:
        raise ValueError("need depth_limit >= 0 and branching >= 1")
    total = 0
    level = 1
    for _ in range(depth_limit + 1):
        total += level
        level *= branching
        if total > MAX_CAPACITY:
            raise ValueError(f"tree capacity exceeds {MAX_CAPACITY} nodes")
    return total


def child_index(v: int, i: int, branching: int) -> int:
    """Index of the i-th child of node v, with child slots numbered 1..branching."""
    if not 1 <= i <= branching:
        raise ValueError(f"child slot {i} outside 1..{branching}")
    return branching * v + i


def edge_contribution(depth: int, horizon: int) -> int:
    """Edges a single expansion at the given node depth adds to the tree.

    One edge materializes the new child, and the rollout started from it
    covers the remaining horizon - depth - 1 levels, so the total is
    horizon - depth.
    """
    if not 0 <= depth <= horizon:
        raise ValueError("depth outside 0..horizon")
    return horizon - depth


@dataclass
class ScenarioTree:
    """SoA storage for one scenario's search tree.

    ``depth`` and ``level_start`` are structural (fixed by the addressing
    scheme) and read-only; everything else is per-cycle state cleared by
    :meth:`reset`.  Statistics of nodes never materialized stay at their
    padding values for the whole cycle.
    """

    depth_limit: int
    branching: int
    capacity: int
    level_start: np.ndarray  # (depth_limit + 2,) first index of each level
    depth: np.ndarray  # (capacity,) level of every index
    q_values: np.ndarray  # (capacity, branching) running-mean returns
    visit_counts: np.ndarray  # (capacity, branching) edge visit counts
    immediate_reward: np.ndarray  # (capacity,) reward of the macro edge into the node
    rollout_value: np.ndarray  # (capacity,) return of the rollout run at expansion
    expanded: np.ndarray  # (capacity,) bool, node materialized
    terminal: np.ndarray  # (capacity,) bool, no simulation continues past the node
    ego_x: np.ndarray  # (capacity,) cached ego state at the node
    ego_y: np.ndarray
    ego_heading: np.ndarray
    ego_speed: np.ndarray
    path_id: np.ndarray  # (capacity,) reference path the ego follows at the node
    d_min: np.ndarray  # (capacity,) subtree frontier-depth range, empty iff
    d_max: np.ndarray  # d_min > d_max; sentinel (depth_limit + 1, -1)
    n_expanded: int = 0

    def child(self, v: int, action: int) -> int:
        """Child index for a 0-based action; raises below the last level."""
        c = self.branching * v + action + 1
        if c >= self.capacity:
            raise IndexError(f"node {v} is at the depth limit and has no children")
        return c

    def parent(self, v: int) -> int:
        if v == 0:
            raise ValueError("root has no parent")
        return (v - 1) // self.branching

    def incoming_action(self, v: int) -> int:
        """0-based action on the edge from parent(v) to v."""
        if v == 0:
            raise ValueError("root has no incoming edge")
        return (v - 1) % self.branching

    def has_untried(self, v: int) -> bool:
        return bool((self.visit_counts[v] == 0).any())

    def mark_expanded(self, v: int, terminal: bool = False) -> None:
        """Materialize node v and seed its depth range from its own depth.

        A fresh node has every action untried, so it is its own frontier
        unless it is terminal or already at the depth limit.
        """
        self.expanded[v] = True
        self.terminal[v] = terminal
        d = int(self.depth[v])
        if not terminal and d < self.depth_limit:
            self.d_min[v] = d
            self.d_max[v] = d
        else:
            self.d_min[v] = self.depth_limit + 1
            self.d_max[v] = -1
        self.n_expanded += 1

    def store_state(
        self, v: int, x: float, y: float, heading: float, speed: float, path_id: int
    ) -> None:
        self.ego_x[v] = x
        self.ego_y[v] = y
        self.ego_heading[v] = heading
        self.ego_speed[v] = speed
        self.path_id[v] = path_id

    def update_depth_range(self, v: int) -> bool:
        """Recompute D(v) as v's own frontier depth unioned with child ranges.

        Returns True when the stored range changed, so a backup can stop
        climbing once an ancestor is already consistent.  Callers must bump
        the visit counts on the backup path first: losing the last untried
        action is what removes v itself from the frontier.
        """
        lo = self.depth_limit + 1
        hi = -1
        d = int(self.depth[v])
        if (
            self.expanded[v]
            and not self.terminal[v]
            and d < self.depth_limit
            and self.has_untried(v)
        ):
            lo = d
            hi = d
        first = self.branching * v + 1
        if first < self.capacity:
            block = slice(first, first + self.branching)
            live = self.expanded[block]
            if live.any():
                # Empty child ranges carry (depth_limit + 1, -1) and drop out
                # of the min/max on their own.
                lo = min(lo, int(self.d_min[block][live].min()))
                hi = max(hi, int(self.d_max[block][live].max()))
        changed = lo != self.d_min[v] or hi != self.d_max[v]
        self.d_min[v] = lo
        self.d_max[v] = hi
        return changed

    def reset(self) -> None:
        """Clear all per-cycle state in place; the root comes back expanded."""
        self.q_values.fill(0.0)
        self.visit_counts.fill(0)
        self.immediate_reward.fill(0.0)
        self.rollout_value.fill(0.0)
        self.expanded.fill(False)
        self.terminal.fill(False)
        self.ego_x.fill(0.0)
        self.ego_y.fill(0.0)
        self.ego_heading.fill(0.0)
        self.ego_speed.fill(0.0)
        self.path_id.fill(0)
        self.d_min.fill(self.depth_limit + 1)
        self.d_max.fill(-1)
        self.n_expanded = 0
        self.mark_expanded(0)

    def dump(self) -> str:
        """Flat text listing of every materialized node, for golden tests."""
        lines = [
            f"tree depth_limit={self.depth_limit} branching={self.branching} "
            f"expanded={self.n_expanded}"
        ]
        for v in np.flatnonzero(self.expanded):
            q = " ".join(f"{x:.10g}" for x in self.q_values[v])
            n = " ".join(str(int(x)) for x in self.visit_counts[v])
            lines.append(
                f"v={v} d={self.depth[v]} term={int(self.terminal[v])} "
                f"r={self.immediate_reward[v]:.10g} "
                f"roll={self.rollout_value[v]:.10g} "
                f"q=[{q}] n=[{n}] D=[{self.d_min[v]},{self.d_max[v]}]"
            )
        return "\n".join(lines)


def allocate_tree(depth_limit: int, branching: int) -> ScenarioTree:
    """Build a zeroed tree with room for every node up to depth_limit."""
    capacity = tree_capacity(depth_limit, branching)
    level_start = np.zeros(depth_limit + 2, dtype=np.int64)
    size = 1
    for d in range(depth_limit + 1):
        level_start[d + 1] = level_start[d] + size
        size *= branching
    depth = np.empty(capacity, dtype=np.int64)
    for d in range(depth_limit + 1):
        depth[level_start[d] : level_start[d + 1]] = d
    level_start.setflags(write=False)
    depth.setflags(write=False)
    tree = ScenarioTree(
        depth_limit=depth_limit,
        branching=branching,
        capacity=capacity,
        level_start=level_start,
        depth=depth,
        q_values=np.zeros((capacity, branching)),
        visit_counts=np.zeros((capacity, branching), dtype=np.int64),
        immediate_reward=np.zeros(capacity),
        rollout_value=np.zeros(capacity),
        expanded=np.zeros(capacity, dtype=bool),
        terminal=np.zeros(capacity, dtype=bool),
        ego_x=np.zeros(capacity),
        ego_y=np.zeros(capacity),
        ego_heading=np.zeros(capacity),
        ego_speed=np.zeros(capacity),
        path_id=np.zeros(capacity, dtype=np.int64),
        d_min=np.zeros(capacity, dtype=np.int64),
        d_max=np.zeros(capacity, dtype=np.int64),
    )
    tree.reset()
    return tree
