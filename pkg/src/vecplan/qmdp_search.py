"""Belief-tree planner: batched per-scenario searches with a shared root.

One search cycle samples K scenarios from the belief, grows one tree per
scenario with a common macro-action set, and recommends the action whose
mean root return across scenarios is highest.  Trees are grouped into
minibatches of `batch_width` lanes that step through the simulator in
lockstep; `n_workers` minibatches run in parallel processes.

Selection is two-staged: a plain UCB descent per lane proposes a frontier,
the minibatch majority depth becomes the reference, and a second descent
penalizes subtrees whose reachable frontier depths sit far from that
reference.  Deep and shallow lanes therefore drift toward a common depth,
which shortens the lockstep critical path (a batch step costs as much as
its deepest lane).  With the penalty weight at zero the second stage is
skipped entirely and selection is plain UCB.
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass
from time import perf_counter
from typing import Sequence

import numpy as np

from .kernels import build_sim_context, run_macro_batch, run_rollout_batch
from .scenario_model import (
    AgentState,
    Belief,
    EgoState,
    MacroAction,
    ModelParams,
    ReferencePath,
    Scenario,
    build_action_set,
    sample_scenarios,
)
from .vec_tree import ScenarioTree, allocate_tree


@dataclass(frozen=True)
class SearchConfig:
    """Search knobs.  n_scenarios must equal n_workers * batch_width."""

    n_scenarios: int = 8
    n_workers: int = 1
    batch_width: int = 8
    ucb_c: float = 1.4
    balance_lambda: float = 0.5  # weight of the depth-alignment penalty
    time_budget_ms: float | None = 100.0
    max_iterations: int | None = None
    convergence_epsilon: float = 1e-3  # 0 disables the convergence stop
    convergence_window: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_scenarios < 1 or self.n_workers < 1 or self.batch_width < 1:
            raise ValueError("scenario, worker, and batch counts must be positive")
        if self.n_scenarios != self.n_workers * self.batch_width:
            raise ValueError(
                f"n_scenarios ({self.n_scenarios}) must equal n_workers * "
                f"batch_width ({self.n_workers} * {self.batch_width})"
            )
        if self.ucb_c < 0.0 or self.balance_lambda < 0.0:
            raise ValueError("ucb_c and balance_lambda must be non-negative")
        if self.time_budget_ms is None and self.max_iterations is None:
            raise ValueError("need a time budget or an iteration cap")
        if self.time_budget_ms is not None and self.time_budget_ms < 0.0:
            raise ValueError("time budget must be non-negative")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ValueError("iteration cap must be non-negative")
        if self.convergence_window < 1:
            raise ValueError("convergence window must be positive")
        if self.convergence_epsilon < 0.0:
            raise ValueError("convergence epsilon must be non-negative")


@dataclass
class SearchTelemetry:
    """Counters and logs from one planning call.

    `iterations` counts completed per-tree iterations, root initialization
    included (each root action counts as one).  `imbalance` is the fraction
    of selection iterations whose stage-1 tentative depths were not all
    equal; it is 0.0 when no selection iterations ran.
    """

    wall_ms: float
    iterations: int
    per_tree_iterations: np.ndarray
    total_edges: int
    edges_per_ms: float
    imbalance: float
    expansion_log: list[tuple[int, int, int, int]]  # (tree, parent, action, depth)
    stage1_depths: list[np.ndarray]
    selected_depths: list[np.ndarray]
    converged: tuple[bool, ...]
    loop_iterations: tuple[int, ...]


@dataclass
class PlanResult:
    """Recommendation plus per-scenario evidence for one planning cycle."""

    actions: tuple[MacroAction, ...]
    pi_star_indices: tuple[int, ...]
    pi_star: tuple[MacroAction, ...]
    best_action: int
    root_q: np.ndarray  # (|actions|,) scenario-mean root returns
    per_scenario_returns: np.ndarray  # (K, |actions|)
    telemetry: SearchTelemetry

    def csv_row(self) -> str:
        t = self.telemetry
        cells = [
            f"{t.wall_ms:.6f}",
            str(t.iterations),
            str(t.total_edges),
            f"{t.edges_per_ms:.6f}",
            f"{t.imbalance:.6f}",
        ]
        cells.extend(f"{v:.17g}" for v in self.root_q)
        return ",".join(cells)


def csv_header(n_actions: int) -> str:
    cols = ["wall_ms", "iterations", "total_edges", "edges_per_ms", "imbalance"]
    cols.extend(f"q{i}" for i in range(n_actions))
    return ",".join(cols)


# ----------------------------------------------------------------------------
# Selection scoring
# ----------------------------------------------------------------------------


def lb_ucb_score(
    q: float,
    n_parent: int,
    n_action: int,
    ucb_c: float,
    d_min: int,
    d_max: int,
    d_ref: int,
    lam: float,
) -> float:
    """Score of one action during descent.

    Untried actions always win; actions whose subtree has no expandable
    frontier (empty depth range) are never taken.  Otherwise plain UCB minus
    lam times the distance from d_ref to the subtree's reachable depth band.
    """
    if n_action == 0:
        return math.inf
    if d_min > d_max:
        return -math.inf
    base = q + ucb_c * math.sqrt(math.log(n_parent) / n_action)
    pen = abs(min(max(d_ref, d_min), d_max) - d_ref)
    return base - lam * pen


def majority_depth(depths: np.ndarray) -> int:
    """Most common value; ties go to the smallest."""
    return int(np.argmax(np.bincount(depths)))


def _descend(tree: ScenarioTree, ucb_c: float, lam: float, d_ref: int) -> tuple[int, int]:
    """Walk from the root to a frontier (node, untried action) pair."""
    b = tree.branching
    v = 0
    while True:
        row_n = tree.visit_counts[v]
        row_q = tree.q_values[v]
        untried = row_n == 0
        first = b * v + 1
        kids = slice(first, first + b)
        elig = (~untried) & (tree.d_min[kids] <= tree.d_max[kids])
        scores = np.where(untried, np.inf, -np.inf)
        if elig.any():
            logn = math.log(int(row_n.sum()))
            base = row_q[elig] + ucb_c * np.sqrt(logn / row_n[elig])
            if lam > 0.0:
                clamped = np.minimum(np.maximum(d_ref, tree.d_min[kids]), tree.d_max[kids])
                scores[elig] = base - lam * np.abs(clamped - d_ref)[elig]
            else:
                scores[elig] = base
        a = int(np.argmax(scores))
        if scores[a] == -np.inf:
            raise RuntimeError("descent entered an exhausted subtree")
        if row_n[a] == 0:
            return v, a
        v = first + a


# ----------------------------------------------------------------------------
# Aggregation, convergence, imbalance
# ----------------------------------------------------------------------------


def aggregate_root(per_scenario_returns: np.ndarray) -> tuple[np.ndarray, int]:
    """Scenario-mean root values and the best action (lowest index on ties)."""
    r = np.asarray(per_scenario_returns, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 1 or r.shape[1] < 1:
        raise ValueError("expected a (scenarios, actions) return matrix")
    if not np.isfinite(r).all():
        raise ValueError("per-scenario returns contain non-finite values")
    q = r.mean(axis=0)
    return q, int(np.argmax(q))


def check_convergence(
    history: Sequence[np.ndarray], epsilon: float, window: int
) -> bool:
    """True when the root value snapshot has settled.

    Requires window consecutive transitions with max |delta| below epsilon
    and a stable argmax across the whole tail.  epsilon <= 0 disables.
    """
    if epsilon <= 0.0 or len(history) < window + 1:
        return False
    tail = history[-(window + 1):]
    ref = int(np.argmax(tail[0]))
    for prev, cur in zip(tail, tail[1:]):
        if float(np.max(np.abs(cur - prev))) >= epsilon:
            return False
        if int(np.argmax(cur)) != ref:
            return False
    return True


def imbalance_metric(stage1_depths: Sequence[np.ndarray]) -> float:
    """Fraction of selection iterations whose tentative depths disagree."""
    if not stage1_depths:
        raise ValueError("no selection iterations recorded")
    hits = 0
    for d in stage1_depths:
        if len(d) and int(d.max()) - int(d.min()) >= 1:
            hits += 1
    return hits / len(stage1_depths)


# ----------------------------------------------------------------------------
# Minibatch worker
# ----------------------------------------------------------------------------


@dataclass
class _MinibatchOutput:
    """Sparse per-tree tree dumps plus the minibatch's logs."""

    created: list[np.ndarray]  # per tree, sorted created node indices
    reward: list[np.ndarray]  # immediate reward per created node
    rollout: list[np.ndarray]
    terminal: list[np.ndarray]
    iterations: np.ndarray  # per tree, init included
    expansion_log: list[tuple[int, int, int, int]]
    stage1_depths: list[np.ndarray]
    selected_depths: list[np.ndarray]
    total_edges: int
    converged: bool
    loop_iterations: int


def _backup(tree: ScenarioTree, child: int, gamma: float) -> None:
    """Discounted leaf-to-root value propagation along one path."""
    x = float(tree.rollout_value[child])
    node = child
    while node != 0:
        par = tree.parent(node)
        a = tree.incoming_action(node)
        x = float(tree.immediate_reward[node]) + gamma * x
        tree.visit_counts[par, a] += 1
        tree.q_values[par, a] += (x - tree.q_values[par, a]) / tree.visit_counts[par, a]
        node = par
    node = tree.parent(child)
    while True:
        changed = tree.update_depth_range(node)
        if not changed or node == 0:
            break
        node = tree.parent(node)


def _snapshot(trees: list[ScenarioTree]) -> np.ndarray:
    acc = trees[0].q_values[0].copy()
    for t in trees[1:]:
        acc = acc + t.q_values[0]
    return acc / len(trees)


def _run_minibatch(
    scenarios: list[Scenario],
    ego: EgoState,
    ego_path: int,
    paths: list[ReferencePath],
    params: ModelParams,
    config: SearchConfig,
    actions: tuple[MacroAction, ...],
    tree_offset: int,
) -> _MinibatchOutput:
    t_start = perf_counter()
    w_count = len(scenarios)
    n_act = len(actions)
    depth_limit = params.tree_depth
    gamma = params.reward.gamma
    ctx = build_sim_context(scenarios, paths, params)
    trees = [allocate_tree(depth_limit, n_act) for _ in range(w_count)]
    for t in trees:
        t.store_state(0, ego.x, ego.y, ego.heading, ego.speed, ego_path)
    action_path = np.array([a.path_id for a in actions], dtype=np.int64)
    action_nudge = np.array([a.nudge for a in actions], dtype=np.float64)

    expansion_log: list[tuple[int, int, int, int]] = []
    stage1_log: list[np.ndarray] = []
    selected_log: list[np.ndarray] = []
    total_edges = 0
    iterations = np.zeros(w_count, dtype=np.int64)

    def expand_lanes(
        lane_tree: np.ndarray, lane_parent: np.ndarray, lane_action: np.ndarray
    ) -> None:
        """Simulate, attach, roll out, and back up one batch of expansions."""
        nonlocal total_edges
        b = len(lane_tree)
        px = np.empty(b)
        py = np.empty(b)
        ph = np.empty(b)
        pv = np.empty(b)
        cur_path = np.empty(b, dtype=np.int64)
        interval = np.empty(b, dtype=np.int64)
        for i in range(b):
            t = trees[lane_tree[i]]
            v = lane_parent[i]
            px[i] = t.ego_x[v]
            py[i] = t.ego_y[v]
            ph[i] = t.ego_heading[v]
            pv[i] = t.ego_speed[v]
            cur_path[i] = t.path_id[v]
            interval[i] = t.depth[v]
        res = run_macro_batch(
            ctx,
            lane_tree,
            interval,
            px,
            py,
            ph,
            pv,
            cur_path,
            action_path[lane_action],
            action_nudge[lane_action],
            np.ones(b, dtype=bool),
        )
        child_depth = interval + 1
        roll = run_rollout_batch(
            ctx,
            lane_tree,
            child_depth,
            res.end_x,
            res.end_y,
            res.end_heading,
            res.end_speed,
            res.eff_path,
            action_nudge[lane_action],
            ~res.collided & (child_depth < depth_limit),
        )
        for i in range(b):
            t = trees[lane_tree[i]]
            v = int(lane_parent[i])
            c = t.child(v, int(lane_action[i]))
            t.immediate_reward[c] = res.reward[i]
            t.rollout_value[c] = roll[i]
            t.store_state(
                c,
                float(res.end_x[i]),
                float(res.end_y[i]),
                float(res.end_heading[i]),
                float(res.end_speed[i]),
                int(res.eff_path[i]),
            )
            t.mark_expanded(c, terminal=bool(res.collided[i]))
            _backup(t, c, gamma)
            d = int(interval[i])
            expansion_log.append(
                (tree_offset + int(lane_tree[i]), v, int(lane_action[i]), d)
            )
            total_edges += depth_limit - d
            iterations[lane_tree[i]] += 1

    # Root initialization: every action of every tree, one lockstep batch.
    init_tree = np.repeat(np.arange(w_count), n_act)
    init_action = np.tile(np.arange(n_act), w_count)
    expand_lanes(init_tree, np.zeros(w_count * n_act, dtype=np.int64), init_action)

    history: list[np.ndarray] = []
    converged = False
    loop_iter = 0
    while True:
        alive = [w for w in range(w_count) if trees[w].d_min[0] <= trees[w].d_max[0]]
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
        stage1 = [_descend(trees[w], config.ucb_c, 0.0, 0) for w in alive]
        tentative = np.array([trees[w].depth[v] for w, (v, _) in zip(alive, stage1)])
        stage1_log.append(tentative)
        if config.balance_lambda > 0.0:
            d_ref = majority_depth(tentative)
            picks = [
                _descend(trees[w], config.ucb_c, config.balance_lambda, d_ref)
                for w in alive
            ]
        else:
            picks = stage1
        selected_log.append(
            np.array([trees[w].depth[v] for w, (v, _) in zip(alive, picks)])
        )
        expand_lanes(
            np.array(alive, dtype=np.int64),
            np.array([v for v, _ in picks], dtype=np.int64),
            np.array([a for _, a in picks], dtype=np.int64),
        )
        loop_iter += 1
        history.append(_snapshot(trees))
        converged = check_convergence(
            history, config.convergence_epsilon, config.convergence_window
        )

    created = []
    reward = []
    rollout = []
    terminal = []
    for t in trees:
        idx = np.flatnonzero(t.expanded)
        created.append(idx)
        reward.append(t.immediate_reward[idx].copy())
        rollout.append(t.rollout_value[idx].copy())
        terminal.append(t.terminal[idx].copy())
    return _MinibatchOutput(
        created=created,
        reward=reward,
        rollout=rollout,
        terminal=terminal,
        iterations=iterations,
        expansion_log=expansion_log,
        stage1_depths=stage1_log,
        selected_depths=selected_log,
        total_edges=total_edges,
        converged=converged,
        loop_iterations=loop_iter,
    )


# ----------------------------------------------------------------------------
# Extraction
# ----------------------------------------------------------------------------


def _subtree_values(
    created: np.ndarray,
    reward: np.ndarray,
    rollout: np.ndarray,
    terminal: np.ndarray,
    branching: int,
    gamma: float,
) -> dict[int, float]:
    """Exact values of every created node, computed leaves-first.

    Terminal nodes are worth 0 (their collision penalty sits in the incoming
    reward), childless nodes keep their rollout value, and internal nodes
    take the best created child by reward plus discounted value.
    """
    pos = {int(v): i for i, v in enumerate(created)}
    vals = np.empty(len(created))
    for i in range(len(created) - 1, -1, -1):
        v = int(created[i])
        if terminal[i]:
            vals[i] = 0.0
            continue
        best = None
        for a in range(branching):
            j = pos.get(branching * v + a + 1)
            if j is None:
                continue
            cand = float(reward[j]) + gamma * float(vals[j])
            if best is None or cand > best:
                best = cand
        vals[i] = float(rollout[i]) if best is None else best
    return {int(v): float(vals[i]) for v, i in pos.items()}


def _extract_plan(
    outputs: list[_MinibatchOutput],
    actions: tuple[MacroAction, ...],
    params: ModelParams,
) -> tuple[tuple[int, ...], int, np.ndarray, np.ndarray]:
    """Root returns per scenario and the greedy action sequence."""
    n_act = len(actions)
    gamma = params.reward.gamma
    depth_limit = params.tree_depth
    values: list[dict[int, float]] = []
    rewards: list[dict[int, float]] = []
    for out in outputs:
        for k in range(len(out.created)):
            vals = _subtree_values(
                out.created[k],
                out.reward[k],
                out.rollout[k],
                out.terminal[k],
                n_act,
                gamma,
            )
            values.append(vals)
            rewards.append(
                {int(v): float(r) for v, r in zip(out.created[k], out.reward[k])}
            )
    n_trees = len(values)
    returns = np.empty((n_trees, n_act))
    for k in range(n_trees):
        for a in range(n_act):
            c = a + 1
            returns[k, a] = rewards[k][c] + gamma * values[k][c]
    root_q, best = aggregate_root(returns)
    indices = [best]
    v = best + 1
    for _ in range(1, depth_limit):
        best_a = None
        best_val = -math.inf
        for a in range(n_act):
            c = n_act * v + a + 1
            acc = 0.0
            hit = 0
            for k in range(n_trees):
                val = values[k].get(c)
                if val is None:
                    continue
                acc = acc + (rewards[k][c] + gamma * val)
                hit += 1
            if hit and acc / hit > best_val:
                best_val = acc / hit
                best_a = a
        if best_a is None:
            break
        indices.append(best_a)
        v = n_act * v + best_a + 1
    while len(indices) < depth_limit:
        indices.append(indices[-1])
    return tuple(indices), best, root_q, returns


# ----------------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------------


def plan(
    ego: EgoState,
    agents: Sequence[AgentState],
    belief: Belief,
    paths: Sequence[ReferencePath],
    params: ModelParams,
    config: SearchConfig,
    actions: tuple[MacroAction, ...] | None = None,
    ego_path: int = 0,
) -> PlanResult:
    """One planning cycle from the current state and belief."""
    t0 = perf_counter()
    paths = list(paths)
    if actions is None:
        actions = build_action_set(n_paths=len(paths))
    if any(a.path_id >= len(paths) or a.path_id < 0 for a in actions):
        raise ValueError("action references a missing path")
    if not 0 <= ego_path < len(paths):
        raise ValueError("ego path index out of range")
    scenarios = sample_scenarios(
        belief, ego, agents, config.n_scenarios, config.seed,
        params.horizon_steps, params.dt,
    )
    w = config.batch_width
    groups = [
        list(scenarios[m * w : (m + 1) * w]) for m in range(config.n_workers)
    ]
    args = [
        (groups[m], ego, ego_path, paths, params, config, actions, m * w)
        for m in range(config.n_workers)
    ]
    if config.n_workers == 1:
        outputs = [_run_minibatch(*args[0])]
    else:
        mp = multiprocessing.get_context("fork")
        with mp.Pool(config.n_workers) as pool:
            outputs = pool.starmap(_run_minibatch, args)

    indices, best, root_q, returns = _extract_plan(outputs, actions, params)
    expansion_log: list[tuple[int, int, int, int]] = []
    stage1: list[np.ndarray] = []
    selected: list[np.ndarray] = []
    total_edges = 0
    per_tree = np.concatenate([o.iterations for o in outputs])
    for o in outputs:
        expansion_log.extend(o.expansion_log)
        stage1.extend(o.stage1_depths)
        selected.extend(o.selected_depths)
        total_edges += o.total_edges
    wall_ms = (perf_counter() - t0) * 1000.0
    telemetry = SearchTelemetry(
        wall_ms=wall_ms,
        iterations=int(per_tree.sum()),
        per_tree_iterations=per_tree,
        total_edges=total_edges,
        edges_per_ms=total_edges / wall_ms,
        imbalance=imbalance_metric(stage1) if stage1 else 0.0,
        expansion_log=expansion_log,
        stage1_depths=stage1,
        selected_depths=selected,
        converged=tuple(o.converged for o in outputs),
        loop_iterations=tuple(o.loop_iterations for o in outputs),
    )
    return PlanResult(
        actions=tuple(actions),
        pi_star_indices=indices,
        pi_star=tuple(actions[i] for i in indices),
        best_action=best,
        root_q=root_q,
        per_scenario_returns=returns,
        telemetry=telemetry,
    )
