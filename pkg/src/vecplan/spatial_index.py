"""Frenet-frame STR-tree broad phase and batched SAT narrow phase.

Agent footprints are stored as axis-aligned boxes in road coordinates
(s along the path, d lateral), packed Sort-Tile-Recursive style into a
flat SoA tree.  Queries walk the tree testing each child block as one
masked fixed-width batch; survivors go to an exact rectangle-overlap
test over the four separating-axis candidates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .scenario_model import AgentState, EgoState, ModelParams, ReferencePath


class Aabb(NamedTuple):
    """Axis-aligned box in Frenet coordinates; intervals are closed."""

    min_s: float
    max_s: float
    min_d: float
    max_d: float


class Obb(NamedTuple):
    """Oriented rectangle: center, heading, and half extents."""

    x: float
    y: float
    heading: float
    half_length: float
    half_width: float


def agent_obb(agent: AgentState) -> Obb:
    return Obb(agent.x, agent.y, agent.heading, agent.half_length, agent.half_width)


def ego_obb(state: EgoState, params: ModelParams) -> Obb:
    return Obb(
        state.x, state.y, state.heading, params.ego_half_length, params.ego_half_width
    )


def obb_corners(obb: Obb) -> list[tuple[float, float]]:
    """The four corners, in a fixed order."""
    c = math.cos(obb.heading)
    s = math.sin(obb.heading)
    out = []
    for ex, ey in (
        (obb.half_length, obb.half_width),
        (obb.half_length, -obb.half_width),
        (-obb.half_length, obb.half_width),
        (-obb.half_length, -obb.half_width),
    ):
        out.append((obb.x + ex * c - ey * s, obb.y + ex * s + ey * c))
    return out


def frenet_aabb(obb: Obb, path: ReferencePath, margin: float = 0.0) -> tuple[Aabb, bool]:
    """Bound the rectangle's corner projections on the path, inflated by margin.

    Corner projections bound the whole footprint exactly on straight
    segments; on curved paths the margin absorbs the small bulge of edge
    interiors.  The returned flag reports whether any corner projected onto
    a clamped path endpoint.
    """
    ss = []
    ds = []
    clamped = False
    for px, py in obb_corners(obb):
        p = path.project(px, py)
        ss.append(p.s)
        ds.append(p.d)
        clamped = clamped or p.clamped
    return (
        Aabb(min(ss) - margin, max(ss) + margin, min(ds) - margin, max(ds) + margin),
        clamped,
    )


@dataclass
class StrTree:
    """Packed SoA R-tree over Frenet boxes; immutable once built.

    Nodes are laid out leaves-first, one level at a time, so every
    internal node's children occupy a contiguous index block.  ``root``
    is -1 for an empty tree.
    """

    branching: int
    leaf_capacity: int
    n_items: int
    root: int
    node_min_s: np.ndarray  # (n_nodes,)
    node_max_s: np.ndarray
    node_min_d: np.ndarray
    node_max_d: np.ndarray
    node_first: np.ndarray  # leaf: item offset; internal: first child node
    node_count: np.ndarray  # items in leaf / children of internal
    node_is_leaf: np.ndarray  # (n_nodes,) bool
    item_box: np.ndarray  # (n_items, 4) boxes in leaf order
    item_id: np.ndarray  # (n_items,) caller's agent ids

    def query(self, box: Aabb | Sequence[float]) -> np.ndarray:
        """Ids of all stored boxes overlapping the query (touching counts)."""
        if self.root < 0:
            return np.empty(0, dtype=np.int64)
        qs0, qs1, qd0, qd1 = float(box[0]), float(box[1]), float(box[2]), float(box[3])
        slots = np.arange(self.branching)
        hits = []
        stack = [self.root]
        while stack:
            v = stack.pop()
            first = int(self.node_first[v])
            count = int(self.node_count[v])
            if self.node_is_leaf[v]:
                b = self.item_box[first : first + count]
                ok = (
                    (b[:, 0] <= qs1)
                    & (b[:, 1] >= qs0)
                    & (b[:, 2] <= qd1)
                    & (b[:, 3] >= qd0)
                )
                if ok.any():
                    hits.append(self.item_id[first : first + count][ok])
            else:
                # One fixed-width batch per child block; padding slots are
                # masked out and read a safe index.
                live = slots < count
                idx = np.where(live, first + slots, first)
                ok = (
                    live
                    & (self.node_min_s[idx] <= qs1)
                    & (self.node_max_s[idx] >= qs0)
                    & (self.node_min_d[idx] <= qd1)
                    & (self.node_max_d[idx] >= qd0)
                )
                stack.extend(idx[ok].tolist())
        if not hits:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(hits)

    def dump(self) -> str:
        """One line per node, for structural tests."""
        lines = [
            f"strtree items={self.n_items} root={self.root} "
            f"branching={self.branching} leaf_capacity={self.leaf_capacity}"
        ]
        for v in range(len(self.node_first)):
            kind = "leaf" if self.node_is_leaf[v] else "node"
            lines.append(
                f"{kind}={v} first={self.node_first[v]} count={self.node_count[v]} "
                f"box=[{self.node_min_s[v]:.10g},{self.node_max_s[v]:.10g}]"
                f"x[{self.node_min_d[v]:.10g},{self.node_max_d[v]:.10g}]"
            )
        return "\n".join(lines)


def build_str_tree(
    boxes: np.ndarray | Sequence[Aabb],
    ids: Sequence[int] | np.ndarray | None = None,
    branching: int = 8,
    leaf_capacity: int = 8,
) -> StrTree:
    """Bulk-load a tree by Sort-Tile-Recursive packing.

    Boxes are sorted by s-center (ties by id), tiled into
    ceil(sqrt(n_leaves)) slices, each slice sorted by d-center and cut
    into leaves, then parent levels are packed over contiguous child
    runs.  The layout is a pure function of the input, so identical
    inputs build identical trees.
    """
    if branching < 2:
        raise ValueError("branching must be at least 2")
    if leaf_capacity < 1:
        raise ValueError("leaf_capacity must be at least 1")
    box_arr = np.asarray(boxes, dtype=float).reshape(-1, 4)
    n = box_arr.shape[0]
    id_arr = (
        np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    )
    if id_arr.shape != (n,):
        raise ValueError("ids must match boxes")
    if n == 0:
        empty_f = np.empty(0)
        empty_i = np.empty(0, dtype=np.int64)
        return StrTree(
            branching=branching,
            leaf_capacity=leaf_capacity,
            n_items=0,
            root=-1,
            node_min_s=empty_f,
            node_max_s=empty_f.copy(),
            node_min_d=empty_f.copy(),
            node_max_d=empty_f.copy(),
            node_first=empty_i,
            node_count=empty_i.copy(),
            node_is_leaf=np.empty(0, dtype=bool),
            item_box=np.empty((0, 4)),
            item_id=empty_i.copy(),
        )

    center_s = 0.5 * (box_arr[:, 0] + box_arr[:, 1])
    center_d = 0.5 * (box_arr[:, 2] + box_arr[:, 3])
    by_s = np.lexsort((id_arr, center_s))
    n_leaves = -(-n // leaf_capacity)
    n_slices = math.ceil(math.sqrt(n_leaves))
    per_slice = -(-n // n_slices)

    leaf_sizes = []
    chunks = []
    for i0 in range(0, n, per_slice):
        sl = by_s[i0 : i0 + per_slice]
        sl = sl[np.lexsort((id_arr[sl], center_d[sl]))]
        for j0 in range(0, len(sl), leaf_capacity):
            group = sl[j0 : j0 + leaf_capacity]
            chunks.append(group)
            leaf_sizes.append(len(group))
    perm = np.concatenate(chunks)
    item_box = box_arr[perm]
    item_id = id_arr[perm]

    min_s: list[float] = []
    max_s: list[float] = []
    min_d: list[float] = []
    max_d: list[float] = []
    first: list[int] = []
    count: list[int] = []
    is_leaf: list[bool] = []
    offset = 0
    level = []
    for size in leaf_sizes:
        b = item_box[offset : offset + size]
        min_s.append(b[:, 0].min())
        max_s.append(b[:, 1].max())
        min_d.append(b[:, 2].min())
        max_d.append(b[:, 3].max())
        first.append(offset)
        count.append(size)
        is_leaf.append(True)
        level.append(len(first) - 1)
        offset += size
    while len(level) > 1:
        parents = []
        for i0 in range(0, len(level), branching):
            kids = level[i0 : i0 + branching]
            min_s.append(min(min_s[k] for k in kids))
            max_s.append(max(max_s[k] for k in kids))
            min_d.append(min(min_d[k] for k in kids))
            max_d.append(max(max_d[k] for k in kids))
            first.append(kids[0])
            count.append(len(kids))
            is_leaf.append(False)
            parents.append(len(first) - 1)
        level = parents

    return StrTree(
        branching=branching,
        leaf_capacity=leaf_capacity,
        n_items=n,
        root=level[0],
        node_min_s=np.array(min_s),
        node_max_s=np.array(max_s),
        node_min_d=np.array(min_d),
        node_max_d=np.array(max_d),
        node_first=np.array(first, dtype=np.int64),
        node_count=np.array(count, dtype=np.int64),
        node_is_leaf=np.array(is_leaf, dtype=bool),
        item_box=item_box,
        item_id=item_id,
    )


# Separating-axis candidates for a rectangle pair: both axes of each body.
# The batch and scalar forms below keep the exact same expression structure
# so boundary cases resolve identically in either path.


def sat_overlap_batch(
    ax: np.ndarray,
    ay: np.ndarray,
    ah: np.ndarray,
    ahl: np.ndarray | float,
    ahw: np.ndarray | float,
    bx: np.ndarray,
    by: np.ndarray,
    bh: np.ndarray,
    bhl: np.ndarray | float,
    bhw: np.ndarray | float,
    active: np.ndarray,
) -> np.ndarray:
    """Rectangle-overlap flags for paired lanes; inactive slots report False.

    Each lane drops out as soon as one of the four axes separates its
    pair, and the kernel stops early once every lane is settled.
    """
    active = np.asarray(active, dtype=bool)
    ca = np.cos(ah)
    sa = np.sin(ah)
    cb = np.cos(bh)
    sb = np.sin(bh)
    tx = bx - ax
    ty = by - ay
    alive = active.copy()
    for ux, uy in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        dist = np.abs(tx * ux + ty * uy)
        ra = ahl * np.abs(ux * ca + uy * sa) + ahw * np.abs(ux * (-sa) + uy * ca)
        rb = bhl * np.abs(ux * cb + uy * sb) + bhw * np.abs(ux * (-sb) + uy * cb)
        alive = alive & ~(dist > ra + rb)
        if not alive.any():
            break
    return alive


def obb_overlap(a: Obb, b: Obb) -> bool:
    """Scalar mirror of sat_overlap_batch for one pair."""
    ca = math.cos(a.heading)
    sa = math.sin(a.heading)
    cb = math.cos(b.heading)
    sb = math.sin(b.heading)
    tx = b.x - a.x
    ty = b.y - a.y
    for ux, uy in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        dist = abs(tx * ux + ty * uy)
        ra = a.half_length * abs(ux * ca + uy * sa) + a.half_width * abs(
            ux * (-sa) + uy * ca
        )
        rb = b.half_length * abs(ux * cb + uy * sb) + b.half_width * abs(
            ux * (-sb) + uy * cb
        )
        if dist > ra + rb:
            return False
    return True
