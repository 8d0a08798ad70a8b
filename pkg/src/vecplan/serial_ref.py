"""Scalar reference planner.

A deliberately plain twin of the batched planner: python loops, one
scenario, one node, one control step at a time, with its own collision
test, its own lookup tables, and its own tree bookkeeping on small node
objects.  It shares only the driving primitives in scenario_model and the
result containers, so agreement with the batched planner exercises the
vectorized code against an independent route rather than against itself.

Mirrored arithmetic keeps the exact association order of the batch kernels
(and routes tan/atan through numpy the same way the primitives do), which
is what makes bit-identical comparisons meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from time import perf_counter
from typing import Sequence

import numpy as np

from .qmdp_search import PlanResult, SearchConfig, SearchTelemetry
from .scenario_model import (
    AgentState,
    Belief,
    EgoState,
    MacroAction,
    ModelParams,
    ReferencePath,
    Scenario,
    build_action_set,
    discount_powers,
    find_follower,
    find_leader,
    mobil_feasible,
    sample_scenarios,
    step_ego,
    step_reward,
)


class _Tables:
    """Per-scenario lookup tables built with scalar projection loops."""

    def __init__(
        self, scenario: Scenario, paths: Sequence[ReferencePath], params: ModelParams
    ):
        rows = params.horizon_steps + 1
        n = scenario.n_agents
        self.n_agents = n
        self.hl = [t.half_length for t in scenario.trajectories]
        self.hw = [t.half_width for t in scenario.trajectories]
        self.circ = [
            math.sqrt(l * l + w * w) for l, w in zip(self.hl, self.hw)
        ]
        self.x: list[list[float]] = []
        self.y: list[list[float]] = []
        self.h: list[list[float]] = []
        states: list[list] = []
        for tau in range(rows):
            if tau == 0:
                row = list(scenario.initial_agents)
            else:
                row = [t.state_at(tau - 1) for t in scenario.trajectories]
            states.append(row)
            self.x.append([a.x for a in row])
            self.y.append([a.y for a in row])
            self.h.append([a.heading for a in row])
        self.s: list[list[list[float]]] = []
        self.d: list[list[list[float]]] = []
        self.val: list[list[list[float]]] = []
        for path in paths:
            ps, pd, pv = [], [], []
            for tau in range(rows):
                rs, rd, rv = [], [], []
                for a in states[tau]:
                    proj = path.project(a.x, a.y)
                    rs.append(proj.s)
                    rd.append(proj.d)
                    rv.append(a.speed * math.cos(a.heading - proj.heading))
                ps.append(rs)
                pd.append(rd)
                pv.append(rv)
            self.s.append(ps)
            self.d.append(pd)
            self.val.append(pv)


def _rect_overlap(
    ax: float, ay: float, ah: float, ahl: float, ahw: float,
    bx: float, by: float, bh: float, bhl: float, bhw: float,
) -> bool:
    """Separating-axis test on the four edge normals of two boxes."""
    ca = math.cos(ah)
    sa = math.sin(ah)
    cb = math.cos(bh)
    sb = math.sin(bh)
    tx = bx - ax
    ty = by - ay
    for ux, uy in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        dist = abs(tx * ux + ty * uy)
        ra = ahl * abs(ux * ca + uy * sa) + ahw * abs(ux * (-sa) + uy * ca)
        rb = bhl * abs(ux * cb + uy * sb) + bhw * abs(ux * (-sb) + uy * cb)
        if dist > ra + rb:
            return False
    return True


def _hits_any(
    tables: _Tables, row: int, x: float, y: float, heading: float, params: ModelParams
) -> bool:
    """Exact collision against every agent, with a circumradius prune."""
    ehl = params.ego_half_length
    ehw = params.ego_half_width
    ecirc = math.sqrt(ehl * ehl + ehw * ehw)
    xs = tables.x[row]
    ys = tables.y[row]
    hs = tables.h[row]
    for i in range(tables.n_agents):
        dx = xs[i] - x
        dy = ys[i] - y
        lim = ecirc + tables.circ[i] + 0.01
        if dx * dx + dy * dy > lim * lim:
            continue
        if _rect_overlap(
            x, y, heading, ehl, ehw, xs[i], ys[i], hs[i], tables.hl[i], tables.hw[i]
        ):
            return True
    return False


def _mobil_gate(
    tables: _Tables,
    paths: Sequence[ReferencePath],
    params: ModelParams,
    row: int,
    state: EgoState,
    cur_path: int,
    target_path: int,
) -> bool:
    pc = paths[cur_path].project(state.x, state.y)
    pt = paths[target_path].project(state.x, state.y)
    cur_leader = find_leader(
        pc.s, tables.s[cur_path][row], tables.d[cur_path][row],
        tables.val[cur_path][row], tables.hl, 0.0, params,
    )
    ts = tables.s[target_path][row]
    td = tables.d[target_path][row]
    tv = tables.val[target_path][row]
    tgt_leader = find_leader(pt.s, ts, td, tv, tables.hl, 0.0, params)
    tgt_follower, fol_idx = find_follower(pt.s, ts, td, tv, tables.hl, 0.0, params)
    if fol_idx < 0:
        return mobil_feasible(
            state.speed, cur_leader, tgt_leader, None, math.inf, params
        )
    fol_gap = tgt_leader.gap + tgt_follower.gap + 2.0 * params.ego_half_length
    return mobil_feasible(
        state.speed, cur_leader, tgt_leader, tgt_follower, fol_gap, params
    )


@dataclass
class MacroOutcome:
    """One macro-action simulated step by step."""

    end: EgoState
    eff_path: int
    reward: float
    collided: bool
    collision_step: int  # steps_per_macro when collision free
    poses: list[EgoState]  # every integrated state, start included
    accels: list[float]
    progress: list[float]


def run_macro_scalar(
    tables: _Tables,
    paths: Sequence[ReferencePath],
    params: ModelParams,
    interval: int,
    state: EgoState,
    cur_path: int,
    action_path: int,
    nudge: float,
    check_collision: bool = True,
    run_mobil: bool = True,
) -> MacroOutcome:
    """Advance one macro-action; dynamics integrate through collisions.

    The reward sum stops at the first colliding step (which also carries the
    penalty) and the end state is the pose right after it.
    """
    steps = params.steps_per_macro
    eff = action_path
    if run_mobil and action_path != cur_path:
        if not _mobil_gate(
            tables, paths, params, interval * steps, state, cur_path, action_path
        ):
            eff = cur_path
    path = paths[eff]
    proj = path.project(state.x, state.y)
    cur = state
    poses = [state]
    accels: list[float] = []
    progress: list[float] = []
    hit = steps
    for u in range(steps):
        row = interval * steps + u
        leader = find_leader(
            proj.s, tables.s[eff][row], tables.d[eff][row], tables.val[eff][row],
            tables.hl, nudge, params,
        )
        cur, accel, _ = step_ego(cur, proj, nudge, leader.gap, leader.speed, params)
        nproj = path.project(cur.x, cur.y)
        poses.append(cur)
        accels.append(accel)
        progress.append(nproj.s - proj.s)
        if (
            check_collision
            and hit == steps
            and _hits_any(tables, row + 1, cur.x, cur.y, cur.heading, params)
        ):
            hit = u
        proj = nproj
    total = 0.0
    for u in range(steps):
        if u > hit:
            break
        total = total + step_reward(u == hit, progress[u], accels[u], params.reward)
    collided = hit < steps
    return MacroOutcome(
        end=poses[hit + 1] if collided else poses[steps],
        eff_path=eff,
        reward=total,
        collided=collided,
        collision_step=hit,
        poses=poses,
        accels=accels,
        progress=progress,
    )


def run_rollout_scalar(
    tables: _Tables,
    paths: Sequence[ReferencePath],
    params: ModelParams,
    start_depth: int,
    state: EgoState,
    path_id: int,
    nudge: float,
) -> float:
    """Discounted return of repeating the macro-action to the horizon."""
    depth_limit = params.tree_depth
    powers = discount_powers(params.reward.gamma, depth_limit + 1)
    total = 0.0
    cur = state
    m = 0
    for level in range(start_depth, depth_limit):
        out = run_macro_scalar(
            tables, paths, params, level, cur, path_id, path_id, nudge,
            run_mobil=False,
        )
        total = total + float(powers[m]) * out.reward
        cur = out.end
        if out.collided:
            break
        m += 1
    return total


# ----------------------------------------------------------------------------
# Tree on plain objects
# ----------------------------------------------------------------------------


class _Node:
    __slots__ = (
        "index", "depth", "state", "path_id", "parent", "in_action",
        "children", "q", "n", "reward", "rollout", "terminal",
        "d_min", "d_max", "value",
    )

    def __init__(
        self,
        index: int,
        depth: int,
        state: EgoState,
        path_id: int,
        parent: "_Node | None",
        in_action: int,
        n_actions: int,
    ):
        self.index = index
        self.depth = depth
        self.state = state
        self.path_id = path_id
        self.parent = parent
        self.in_action = in_action
        self.children: list[_Node | None] = [None] * n_actions
        self.q = [0.0] * n_actions
        self.n = [0] * n_actions
        self.reward = 0.0
        self.rollout = 0.0
        self.terminal = False
        self.d_min = depth
        self.d_max = depth
        self.value: float | None = None


def _seed_range(node: _Node, depth_limit: int) -> None:
    if node.terminal or node.depth >= depth_limit:
        node.d_min, node.d_max = depth_limit + 1, -1
    else:
        node.d_min, node.d_max = node.depth, node.depth


def _update_range(node: _Node, depth_limit: int) -> bool:
    lo, hi = depth_limit + 1, -1
    if (
        not node.terminal
        and node.depth < depth_limit
        and any(x == 0 for x in node.n)
    ):
        lo, hi = node.depth, node.depth
    for c in node.children:
        if c is not None and c.d_min <= c.d_max:
            if c.d_min < lo:
                lo = c.d_min
            if c.d_max > hi:
                hi = c.d_max
    changed = (lo, hi) != (node.d_min, node.d_max)
    node.d_min, node.d_max = lo, hi
    return changed


def _backup(leaf: _Node, gamma: float, depth_limit: int) -> None:
    x = leaf.rollout
    node = leaf
    while node.parent is not None:
        par = node.parent
        a = node.in_action
        x = node.reward + gamma * x
        par.n[a] += 1
        par.q[a] += (x - par.q[a]) / par.n[a]
        node = par
    node = leaf.parent
    while node is not None:
        changed = _update_range(node, depth_limit)
        if not changed or node.parent is None:
            break
        node = node.parent


def _descend(
    root: _Node, n_actions: int, ucb_c: float, lam: float, d_ref: int
) -> tuple[_Node, int]:
    node = root
    while True:
        n_tot = 0
        for x in node.n:
            n_tot += x
        best_score = -math.inf
        best_a = -1
        for a in range(n_actions):
            if node.n[a] == 0:
                score = math.inf
            else:
                c = node.children[a]
                if c.d_min > c.d_max:
                    score = -math.inf
                else:
                    base = node.q[a] + ucb_c * math.sqrt(math.log(n_tot) / node.n[a])
                    if lam > 0.0:
                        pen = abs(min(max(d_ref, c.d_min), c.d_max) - d_ref)
                        score = base - lam * pen
                    else:
                        score = base
            if score > best_score:
                best_score = score
                best_a = a
        if best_score == -math.inf:
            raise RuntimeError("descent entered an exhausted subtree")
        if node.n[best_a] == 0:
            return node, best_a
        node = node.children[best_a]


def _majority(depths: list[int]) -> int:
    best_d = 0
    best_c = -1
    for d in range(max(depths) + 1):
        c = 0
        for x in depths:
            if x == d:
                c += 1
        if c > best_c:
            best_c = c
            best_d = d
    return best_d


def _argmax_first(vals: Sequence[float]) -> int:
    best = -math.inf
    best_i = 0
    for i, v in enumerate(vals):
        if v > best:
            best = v
            best_i = i
    return best_i


def _converged(history: list[list[float]], eps: float, window: int) -> bool:
    if eps <= 0.0 or len(history) < window + 1:
        return False
    tail = history[-(window + 1):]
    ref = _argmax_first(tail[0])
    for prev, cur in zip(tail, tail[1:]):
        worst = 0.0
        for p, c in zip(prev, cur):
            d = abs(c - p)
            if d > worst:
                worst = d
        if worst >= eps:
            return False
        if _argmax_first(cur) != ref:
            return False
    return True


# ----------------------------------------------------------------------------
# Planner
# ----------------------------------------------------------------------------


@dataclass
class _SerialMinibatch:
    roots: list[_Node]
    iterations: list[int]
    expansion_log: list[tuple[int, int, int, int]]
    stage1_depths: list[np.ndarray]
    selected_depths: list[np.ndarray]
    total_edges: int
    converged: bool
    loop_iterations: int


def _run_minibatch(
    scenarios: list[Scenario],
    ego: EgoState,
    ego_path: int,
    paths: Sequence[ReferencePath],
    params: ModelParams,
    config: SearchConfig,
    actions: tuple[MacroAction, ...],
    tree_offset: int,
) -> _SerialMinibatch:
    t_start = perf_counter()
    w_count = len(scenarios)
    n_act = len(actions)
    depth_limit = params.tree_depth
    gamma = params.reward.gamma
    tables = [_Tables(sc, paths, params) for sc in scenarios]
    roots = [
        _Node(0, 0, ego, ego_path, None, -1, n_act) for _ in range(w_count)
    ]
    log: list[tuple[int, int, int, int]] = []
    stage1_log: list[np.ndarray] = []
    selected_log: list[np.ndarray] = []
    edges = 0
    iterations = [0] * w_count

    def expand(w: int, parent: _Node, a: int) -> None:
        nonlocal edges
        act = actions[a]
        out = run_macro_scalar(
            tables[w], paths, params, parent.depth, parent.state,
            parent.path_id, act.path_id, act.nudge,
        )
        child = _Node(
            n_act * parent.index + a + 1, parent.depth + 1, out.end,
            out.eff_path, parent, a, n_act,
        )
        child.reward = out.reward
        child.terminal = out.collided
        if not out.collided and child.depth < depth_limit:
            child.rollout = run_rollout_scalar(
                tables[w], paths, params, child.depth, out.end, out.eff_path,
                act.nudge,
            )
        _seed_range(child, depth_limit)
        parent.children[a] = child
        _backup(child, gamma, depth_limit)
        log.append((tree_offset + w, parent.index, a, parent.depth))
        edges += depth_limit - parent.depth
        iterations[w] += 1

    for w in range(w_count):
        for a in range(n_act):
            expand(w, roots[w], a)

    history: list[list[float]] = []
    converged = False
    loop_iter = 0
    while True:
        alive = [w for w in range(w_count) if roots[w].d_min <= roots[w].d_max]
        if not alive:
            break
        if config.max_iterations is not None and loop_iter >= config.max_iterations:
            break
        if (
            config.time_budget_ms is not None
            and (perf_counter() - t_start) * 1000.0 >= config.time_budget_ms
        ):
            break
        if converged:
            break
        stage1 = [
            _descend(roots[w], n_act, config.ucb_c, 0.0, 0) for w in alive
        ]
        tentative = [node.depth for node, _ in stage1]
        stage1_log.append(np.array(tentative, dtype=np.int64))
        if config.balance_lambda > 0.0:
            d_ref = _majority(tentative)
            picks = [
                _descend(roots[w], n_act, config.ucb_c, config.balance_lambda, d_ref)
                for w in alive
            ]
        else:
            picks = stage1
        selected_log.append(
            np.array([node.depth for node, _ in picks], dtype=np.int64)
        )
        for w, (node, a) in zip(alive, picks):
            expand(w, node, a)
        loop_iter += 1
        snap = []
        for a in range(n_act):
            acc = roots[0].q[a]
            for r in roots[1:]:
                acc = acc + r.q[a]
            snap.append(acc / w_count)
        history.append(snap)
        converged = _converged(
            history, config.convergence_epsilon, config.convergence_window
        )

    return _SerialMinibatch(
        roots=roots,
        iterations=iterations,
        expansion_log=log,
        stage1_depths=stage1_log,
        selected_depths=selected_log,
        total_edges=edges,
        converged=converged,
        loop_iterations=loop_iter,
    )


def _node_value(node: _Node, gamma: float) -> float:
    if node.value is not None:
        return node.value
    if node.terminal:
        node.value = 0.0
        return 0.0
    best: float | None = None
    for c in node.children:
        if c is None:
            continue
        v = c.reward + gamma * _node_value(c, gamma)
        if best is None or v > best:
            best = v
    node.value = node.rollout if best is None else best
    return node.value


def serial_plan(
    ego: EgoState,
    agents: Sequence[AgentState],
    belief: Belief,
    paths: Sequence[ReferencePath],
    params: ModelParams,
    config: SearchConfig,
    actions: tuple[MacroAction, ...] | None = None,
    ego_path: int = 0,
) -> PlanResult:
    """Scalar planning cycle with the same contract as qmdp_search.plan.

    Minibatches run sequentially whatever n_workers says; the grouping only
    affects which trees share selection coupling and convergence checks.
    """
    t0 = perf_counter()
    paths = list(paths)
    if actions is None:
        actions = build_action_set(n_paths=len(paths))
    if any(a.path_id >= len(paths) or a.path_id < 0 for a in actions):
        raise ValueError("action references a missing path")
    if not 0 <= ego_path < len(paths):
        raise ValueError("ego path index out of range")
    n_act = len(actions)
    gamma = params.reward.gamma
    depth_limit = params.tree_depth
    scenarios = sample_scenarios(
        belief, ego, agents, config.n_scenarios, config.seed,
        params.horizon_steps, params.dt,
    )
    w = config.batch_width
    outputs = [
        _run_minibatch(
            list(scenarios[m * w : (m + 1) * w]), ego, ego_path, paths, params,
            config, actions, m * w,
        )
        for m in range(config.n_workers)
    ]
    roots: list[_Node] = []
    for o in outputs:
        roots.extend(o.roots)
    k = len(roots)
    returns = np.empty((k, n_act))
    for i, root in enumerate(roots):
        for a in range(n_act):
            c = root.children[a]
            returns[i, a] = c.reward + gamma * _node_value(c, gamma)
    q = []
    for a in range(n_act):
        acc = returns[0, a]
        for i in range(1, k):
            acc = acc + returns[i, a]
        q.append(float(acc / k))
    best = _argmax_first(q)
    indices = [best]
    nodes: list[_Node | None] = [root.children[best] for root in roots]
    for _ in range(1, depth_limit):
        best_a = None
        best_val = -math.inf
        for a in range(n_act):
            acc = 0.0
            hit = 0
            for node in nodes:
                if node is None:
                    continue
                c = node.children[a]
                if c is None:
                    continue
                acc = acc + (c.reward + gamma * _node_value(c, gamma))
                hit += 1
            if hit and acc / hit > best_val:
                best_val = acc / hit
                best_a = a
        if best_a is None:
            break
        indices.append(best_a)
        nodes = [
            None if node is None else node.children[best_a] for node in nodes
        ]
    while len(indices) < depth_limit:
        indices.append(indices[-1])

    expansion_log: list[tuple[int, int, int, int]] = []
    stage1: list[np.ndarray] = []
    selected: list[np.ndarray] = []
    total_edges = 0
    for o in outputs:
        expansion_log.extend(o.expansion_log)
        stage1.extend(o.stage1_depths)
        selected.extend(o.selected_depths)
        total_edges += o.total_edges
    if stage1:
        hits = 0
        for d in stage1:
            if len(d) and int(d.max()) - int(d.min()) >= 1:
                hits += 1
        imbalance = hits / len(stage1)
    else:
        imbalance = 0.0
    wall_ms = (perf_counter() - t0) * 1000.0
    per_tree = np.array(
        [n for o in outputs for n in o.iterations], dtype=np.int64
    )
    telemetry = SearchTelemetry(
        wall_ms=wall_ms,
        iterations=int(per_tree.sum()),
        per_tree_iterations=per_tree,
        total_edges=total_edges,
        edges_per_ms=total_edges / wall_ms,
        imbalance=imbalance,
        expansion_log=expansion_log,
        stage1_depths=stage1,
        selected_depths=selected,
        converged=tuple(o.converged for o in outputs),
        loop_iterations=tuple(o.loop_iterations for o in outputs),
    )
    return PlanResult(
        actions=tuple(actions),
        pi_star_indices=tuple(indices),
        pi_star=tuple(actions[i] for i in indices),
        best_action=best,
        root_q=np.array(q),
        per_scenario_returns=returns,
        telemetry=telemetry,
    )
