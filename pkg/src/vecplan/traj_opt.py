"""Importance-sampled scenario refresh and trajectory selection.

After the tree search commits to an action sequence, the belief is tilted
toward hazardous intentions of agents near the ego's path, scenarios are
re-drawn from the tilted proposal with importance weights, one candidate
ego trajectory per scenario is rolled out under the action sequence, and
every candidate is scored against every scenario inside its minibatch.
The self-normalized weighted score picks the trajectory to execute.

Cross-evaluation treats a candidate as a fixed path: its per-step progress
and comfort terms are frozen at generation time, so only the collision
term varies with the scenario. A candidate's diagonal score therefore
equals the return of forward-simulating it in its own scenario.
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernels import SimContext, build_sim_context, project_points, run_macro_batch
from .qmdp_search import SearchConfig
from .scenario_model import (
    AgentState,
    Belief,
    EgoState,
    MacroAction,
    ModelParams,
    ReferencePath,
    Scenario,
    discount_powers,
    roll_intention,
)
from .spatial_index import sat_overlap_batch

# Agents whose predicted motion comes within this lateral distance of the
# ego reference path (or crosses it) count as critical.
CRITICAL_CORRIDOR_HALF_WIDTH = 3.5

# Floor on the total hazardous-intention mass of a critical agent in the
# proposal; safe mass shrinks proportionally. Zero-probability intentions
# stay at zero so the proposal never widens the belief's support.
DEFAULT_TILT = 0.4


# ----------------------------------------------------------------------------
# Domain types
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ProposalDistribution:
    """Per-agent intention distributions to sample from, plus the tilt targets.

    probs mirrors the belief's support agent by agent; critical marks the
    agents whose hazardous intentions were boosted; hazardous records which
    intentions counted as hazardous when the proposal was built.
    """

    probs: tuple[tuple[float, ...], ...]
    critical: tuple[bool, ...]
    hazardous: tuple[tuple[bool, ...], ...]

    def __post_init__(self) -> None:
        if not (len(self.probs) == len(self.critical) == len(self.hazardous)):
            raise ValueError("proposal fields disagree on agent count")
        for row, flags in zip(self.probs, self.hazardous):
            if len(row) != len(flags):
                raise ValueError("hazard flags disagree with intention count")
            if any(p < 0.0 for p in row):
                raise ValueError("negative proposal probability")
            total = sum(row)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"proposal row sums to {total}, not 1")


@dataclass(frozen=True, slots=True)
class WeightedScenario:
    """One scenario drawn from the proposal, carrying its importance weight."""

    scenario: Scenario
    weight: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.weight) and self.weight > 0.0):
            raise ValueError(f"importance weight must be finite positive, got {self.weight}")


class CandidateTrajectory:
    """Ego states at control-step granularity from executing the plan.

    Entry i is the state after i+1 control steps; the shared start state is
    kept separately. base_reward holds the per-step progress-minus-comfort
    reward (no collision terms), frozen at generation time; eff_paths is the
    reference path actually followed at each macro level.
    """

    __slots__ = (
        "scenario_id", "start", "x", "y", "heading", "speed",
        "base_reward", "eff_paths",
    )

    def __init__(self, scenario_id, start, x, y, heading, speed, base_reward, eff_paths):
        self.scenario_id = int(scenario_id)
        self.start = start
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.heading = np.asarray(heading, dtype=np.float64)
        self.speed = np.asarray(speed, dtype=np.float64)
        self.base_reward = np.asarray(base_reward, dtype=np.float64)
        self.eff_paths = np.asarray(eff_paths, dtype=np.int64)
        n = len(self.x)
        if not (
            len(self.y) == len(self.heading) == len(self.speed)
            == len(self.base_reward) == n
        ):
            raise ValueError("candidate arrays disagree on length")
        for arr in (self.x, self.y, self.heading, self.speed,
                    self.base_reward, self.eff_paths):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.x)

    def state_at(self, i: int) -> EgoState:
        return EgoState(
            float(self.x[i]), float(self.y[i]),
            float(self.heading[i]), float(self.speed[i]),
        )


@dataclass
class EvaluationBlock:
    """values[k, i] scores candidate k against scenario i within one minibatch.

    collision_steps holds the first colliding control step per pair, or the
    horizon step count when the pair never collides.
    """

    values: np.ndarray
    collision_steps: np.ndarray

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"block must be square, got {v.shape}")
        if self.collision_steps.shape != v.shape:
            raise ValueError("collision steps disagree with value shape")
        if not np.all(np.isfinite(v)):
            raise ValueError("block contains non-finite values")


# ----------------------------------------------------------------------------
# Critical agents and hazard classification
# ----------------------------------------------------------------------------


def _polyline_frenet(
    path: ReferencePath, px: np.ndarray, py: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(distance, signed offset, clamped) of each point vs the whole polyline.

    Distance is to the nearest clamped point, so it stays honest beyond the
    path's endpoints where the signed offset alone would understate it.
    """
    ax = path.points[:-1, 0]
    ay = path.points[:-1, 1]
    ux = path.unit[:, 0]
    uy = path.unit[:, 1]
    ln = path.seg_len
    rx = px[:, None] - ax
    ry = py[:, None] - ay
    t = rx * ux + ry * uy
    tc = np.minimum(np.maximum(t, 0.0), ln)
    dx = rx - tc * ux
    dy = ry - tc * uy
    d2 = dx * dx + dy * dy
    j = np.argmin(d2, axis=1)
    rows = np.arange(len(j))
    dist = np.sqrt(d2[rows, j])
    d = ux[j] * ry[rows, j] - uy[j] * rx[rows, j]
    last = len(ln) - 1
    traw = t[rows, j]
    clamped = ((j == 0) & (traw < 0.0)) | ((j == last) & (traw > ln[j]))
    return dist, d, clamped


def _enters_corridor(
    path: ReferencePath, px: np.ndarray, py: np.ndarray, half_width: float
) -> bool:
    """True when any point is inside the corridor or the point chain crosses it."""
    dist, d, clamped = _polyline_frenet(path, px, py)
    if np.any(dist <= half_width):
        return True
    crosses = (d[:-1] * d[1:] < 0.0) & ~clamped[:-1] & ~clamped[1:]
    return bool(np.any(crosses))


def identify_critical_agents(
    scenario: Scenario,
    ego_reference_path: ReferencePath,
    corridor_half_width: float = CRITICAL_CORRIDOR_HALF_WIDTH,
) -> set[int]:
    """Agents whose realized trajectory comes near the ego path or crosses it.

    The current position counts as part of the trajectory: an agent inside
    the corridor right now is critical even if its prediction leaves.
    """
    out: set[int] = set()
    for i, (a0, traj) in enumerate(
        zip(scenario.initial_agents, scenario.trajectories)
    ):
        px = np.concatenate([[a0.x], traj.x])
        py = np.concatenate([[a0.y], traj.y])
        if _enters_corridor(ego_reference_path, px, py, corridor_half_width):
            out.add(i)
    return out


def classify_hazardous_intentions(
    belief: Belief,
    agent_states: Sequence[AgentState],
    ego_reference_path: ReferencePath,
    params: ModelParams,
    corridor_half_width: float = CRITICAL_CORRIDOR_HALF_WIDTH,
) -> tuple[tuple[bool, ...], ...]:
    """Per (agent, intention): does the intention's rollout enter the corridor?

    An agent with any hazardous intention is a critical agent: some world it
    might inhabit puts it on the ego's path.
    """
    if len(agent_states) != len(belief.agents):
        raise ValueError("belief and agent states disagree on agent count")
    flags: list[tuple[bool, ...]] = []
    for state, hyp in zip(agent_states, belief.agents):
        row = []
        for it in hyp.intentions:
            traj = roll_intention(state, it, params.horizon_steps, params.dt)
            px = np.concatenate([[state.x], traj.x])
            py = np.concatenate([[state.y], traj.y])
            row.append(
                _enters_corridor(ego_reference_path, px, py, corridor_half_width)
            )
        flags.append(tuple(row))
    return tuple(flags)


# ----------------------------------------------------------------------------
# Proposal construction and weighted resampling
# ----------------------------------------------------------------------------


def build_proposal(
    belief: Belief,
    critical_agents: Sequence[int] | set[int],
    tilt: float,
    hazard_flags: Sequence[Sequence[bool]],
) -> ProposalDistribution:
    """Tilt critical agents' mass toward their hazardous intentions.

    tilt in [0, 1) is a floor on the total hazardous mass per critical
    agent: hazardous intentions scale up to reach it, safe intentions scale
    down to keep the row normalized, and zero probabilities stay zero. Non-
    critical agents keep the belief unchanged, as do critical agents whose
    hazardous mass is already above the floor (or is zero, or is all of it).
    """
    if not 0.0 <= tilt < 1.0:
        raise ValueError(f"tilt must be in [0, 1), got {tilt}")
    if len(hazard_flags) != len(belief.agents):
        raise ValueError("hazard flags disagree with belief agent count")
    crit = set(critical_agents)
    probs: list[tuple[float, ...]] = []
    critical: list[bool] = []
    hazardous: list[tuple[bool, ...]] = []
    for j, hyp in enumerate(belief.agents):
        b = [it.probability for it in hyp.intentions]
        flags = tuple(bool(f) for f in hazard_flags[j])
        if len(flags) != len(b):
            raise ValueError(f"agent {j}: hazard flags disagree with intention count")
        critical.append(j in crit)
        hazardous.append(flags)
        b_h = sum(p for p, f in zip(b, flags) if f)
        if j not in crit or b_h <= 0.0 or b_h >= 1.0 or b_h >= tilt:
            probs.append(tuple(b))
            continue
        probs.append(
            tuple((p * tilt) / b_h if f else (p * (1.0 - tilt)) / (1.0 - b_h)
                  for p, f in zip(b, flags))
        )
    return ProposalDistribution(tuple(probs), tuple(critical), tuple(hazardous))


def resample_with_proposal(
    belief: Belief,
    proposal: ProposalDistribution,
    ego_state: EgoState,
    agent_states: Sequence[AgentState],
    k: int,
    seed: int,
    n_steps: int,
    dt: float,
) -> list[WeightedScenario]:
    """Draw k scenarios from the proposal, each weighted by prod(b/q).

    Uses the same per-scenario streams and inverse-CDF walk as the planner's
    sampler, so a proposal equal to the belief reproduces the planner's
    scenarios exactly (with all weights exactly 1).
    """
    if k < 1:
        raise ValueError("need at least one scenario")
    if len(agent_states) != len(belief.agents):
        raise ValueError("belief and agent states disagree on agent count")
    if len(proposal.probs) != len(belief.agents):
        raise ValueError("proposal and belief disagree on agent count")
    for j, (hyp, q) in enumerate(zip(belief.agents, proposal.probs)):
        if len(q) != len(hyp.intentions):
            raise ValueError(f"agent {j}: proposal support disagrees with belief")
        for it, qp in zip(hyp.intentions, q):
            if it.probability > 0.0 and qp <= 0.0:
                raise ValueError(
                    f"agent {j}: proposal gives zero mass to a supported intention"
                )
    out: list[WeightedScenario] = []
    for i in range(k):
        rng = np.random.default_rng([seed, i])
        trajs = []
        picks = []
        weight = 1.0
        for agent, hyp, q in zip(agent_states, belief.agents, proposal.probs):
            u = rng.random()
            acc = 0.0
            idx = len(q) - 1
            for j, qp in enumerate(q):
                acc += qp
                if u < acc:
                    idx = j
                    break
            if q[idx] == 0.0:
                # Float-edge fallback landed on a zero-mass intention; take
                # the highest supported one instead.
                idx = max(j for j, qp in enumerate(q) if qp > 0.0)
            picks.append(idx)
            weight = weight * (hyp.intentions[idx].probability / q[idx])
            trajs.append(roll_intention(agent, hyp.intentions[idx], n_steps, dt))
        scenario = Scenario(
            i, ego_state, tuple(agent_states), tuple(trajs), tuple(picks)
        )
        out.append(WeightedScenario(scenario, weight))
    return out


# ----------------------------------------------------------------------------
# Candidate generation and block cross-evaluation
# ----------------------------------------------------------------------------


def generate_candidates(
    pi_star: Sequence[MacroAction],
    ctx: SimContext,
    ego: EgoState,
    ego_path: int = 0,
    scenario_ids: Sequence[int] | None = None,
) -> list[CandidateTrajectory]:
    """One full-horizon ego trajectory per scenario, all lanes in lockstep.

    Runs the same batch kernel as the tree search (lane-change gating
    included) but without collision checks: candidates always cover the full
    horizon, and collisions are priced later against every scenario in the
    block. Per-step rewards are frozen here since they do not depend on the
    scenario the candidate is later scored against.
    """
    params = ctx.params
    if len(pi_star) == 0:
        raise ValueError("empty action sequence")
    if len(pi_star) != params.tree_depth:
        raise ValueError(
            f"action sequence length {len(pi_star)} != tree depth {params.tree_depth}"
        )
    if any(a.path_id < 0 or a.path_id >= len(ctx.paths) for a in pi_star):
        raise ValueError("action references a missing path")
    n = ctx.n_scenarios
    if scenario_ids is None:
        scenario_ids = range(n)
    steps = params.steps_per_macro
    hsteps = params.horizon_steps
    rw = params.reward
    px = np.empty((n, hsteps))
    py = np.empty((n, hsteps))
    ph = np.empty((n, hsteps))
    pv = np.empty((n, hsteps))
    base = np.empty((n, hsteps))
    eff = np.empty((n, params.tree_depth), dtype=np.int64)
    lane_scenario = np.arange(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    sx = np.full(n, ego.x)
    sy = np.full(n, ego.y)
    sh = np.full(n, ego.heading)
    sv = np.full(n, ego.speed)
    cur = np.full(n, ego_path, dtype=np.int64)
    for m, act in enumerate(pi_star):
        res = run_macro_batch(
            ctx,
            lane_scenario,
            np.full(n, m, dtype=np.int64),
            sx, sy, sh, sv,
            cur_path=cur,
            action_path=np.full(n, act.path_id, dtype=np.int64),
            nudge=np.full(n, act.nudge),
            active=active,
            check_collision=False,
        )
        sl = slice(m * steps, (m + 1) * steps)
        px[:, sl] = res.pose_x[:, 1:]
        py[:, sl] = res.pose_y[:, 1:]
        ph[:, sl] = res.pose_heading[:, 1:]
        pv[:, sl] = res.pose_speed[:, 1:]
        base[:, sl] = (
            rw.progress_weight * res.progress
            - rw.comfort_weight * (res.accel * res.accel)
        )
        eff[:, m] = res.eff_path
        sx, sy, sh, sv = res.end_x, res.end_y, res.end_heading, res.end_speed
        cur = res.eff_path
    return [
        CandidateTrajectory(
            sid, ego, px[i], py[i], ph[i], pv[i], base[i], eff[i]
        )
        for i, sid in zip(range(n), scenario_ids)
    ]


def cross_evaluate_block(
    candidates: Sequence[CandidateTrajectory], ctx: SimContext
) -> EvaluationBlock:
    """Score every candidate against every scenario in the minibatch.

    values[k, i] is the discounted return of executing candidate k as a
    fixed path in scenario i: the candidate's frozen per-step rewards,
    truncated at its first collision with scenario i's agents (which also
    adds the penalty). Broad phase batches each candidate's swept extent
    against each scenario's per-interval trees; one flat narrow-phase batch
    covers every surviving (candidate, scenario, step, agent) pair.
    """
    n = len(candidates)
    if n == 0:
        raise ValueError("need at least one candidate")
    if n != ctx.n_scenarios:
        raise ValueError(
            f"{n} candidates vs {ctx.n_scenarios} scenarios in the minibatch"
        )
    params = ctx.params
    steps = params.steps_per_macro
    depth = params.tree_depth
    hsteps = params.horizon_steps
    px = np.stack([c.x for c in candidates])
    py = np.stack([c.y for c in candidates])
    ph = np.stack([c.heading for c in candidates])
    base = np.stack([c.base_reward for c in candidates])
    hit = np.full((n, n), hsteps, dtype=np.int64)
    if ctx.n_agents:
        ce = np.cos(ph)
        se = np.sin(ph)
        ehl = params.ego_half_length
        ehw = params.ego_half_width
        cs_min = np.full((n, depth), np.inf)
        cs_max = np.full((n, depth), -np.inf)
        cd_min = np.full((n, depth), np.inf)
        cd_max = np.full((n, depth), -np.inf)
        zeros = np.zeros((n, hsteps), dtype=np.int64)
        for el, ew in ((ehl, ehw), (ehl, -ehw), (-ehl, ehw), (-ehl, -ehw)):
            cx = px + el * ce - ew * se
            cy = py + el * se + ew * ce
            s, d, _ = project_points(ctx, zeros, cx, cy)
            s3 = s.reshape(n, depth, steps)
            d3 = d.reshape(n, depth, steps)
            cs_min = np.minimum(cs_min, s3.min(axis=2))
            cs_max = np.maximum(cs_max, s3.max(axis=2))
            cd_min = np.minimum(cd_min, d3.min(axis=2))
            cd_max = np.maximum(cd_max, d3.max(axis=2))
        pair_k: list[np.ndarray] = []
        pair_i: list[np.ndarray] = []
        pair_u: list[np.ndarray] = []
        pair_a: list[np.ndarray] = []
        for i in range(n):
            trees = ctx.col_trees[i]
            for j in range(depth):
                us = np.arange(j * steps, (j + 1) * steps, dtype=np.int64)
                for k in range(n):
                    cand = trees[j].query(
                        (
                            cs_min[k, j] - ctx.margin,
                            cs_max[k, j] + ctx.margin,
                            cd_min[k, j] - ctx.margin,
                            cd_max[k, j] + ctx.margin,
                        )
                    )
                    if cand.size:
                        ks, uu, aa = np.broadcast_arrays(
                            np.int64(k), us[:, None], cand[None, :]
                        )
                        pair_k.append(ks.ravel())
                        pair_i.append(np.full(ks.size, i, dtype=np.int64))
                        pair_u.append(uu.ravel())
                        pair_a.append(aa.ravel())
        if pair_k:
            pk = np.concatenate(pair_k)
            pi_ = np.concatenate(pair_i)
            pu = np.concatenate(pair_u)
            pa = np.concatenate(pair_a)
            flags = sat_overlap_batch(
                px[pk, pu],
                py[pk, pu],
                ph[pk, pu],
                params.ego_half_length,
                params.ego_half_width,
                ctx.ag_x[pi_, pu + 1, pa],
                ctx.ag_y[pi_, pu + 1, pa],
                ctx.ag_h[pi_, pu + 1, pa],
                ctx.ag_hl[pa],
                ctx.ag_hw[pa],
                np.ones(len(pk), dtype=bool),
            )
            if flags.any():
                np.minimum.at(hit, (pk[flags], pi_[flags]), pu[flags])
    powers = discount_powers(params.reward.gamma, depth + 1)
    pen = params.reward.collision_penalty
    vals = np.zeros((n, n))
    for m in range(depth):
        r_m = np.zeros((n, n))
        for ul in range(steps):
            u = m * steps + ul
            b_u = base[:, u][:, None]
            r_u = np.where(hit == u, b_u + pen, b_u)
            r_m = np.where(u <= hit, r_m + r_u, r_m)
        vals = vals + float(powers[m]) * r_m
    return EvaluationBlock(values=vals, collision_steps=hit)


# ----------------------------------------------------------------------------
# Self-normalized scoring and selection
# ----------------------------------------------------------------------------


def snis_value(values: Sequence[float], weights: Sequence[float]) -> float:
    """Weighted score sum(w*v) / sum(w); rejects empty or zero-mass weights."""
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if v.ndim != 1 or v.shape != w.shape:
        raise ValueError(f"values {v.shape} and weights {w.shape} must match 1-d")
    if len(v) == 0:
        raise ValueError("need at least one value")
    if np.any(w < 0.0):
        raise ValueError("negative importance weight")
    num = 0.0
    den = 0.0
    for i in range(len(v)):
        num = num + float(w[i]) * float(v[i])
        den = den + float(w[i])
    if den <= 0.0:
        raise ValueError("importance weights sum to zero")
    return num / den


def snis_scores(block: EvaluationBlock, weights: np.ndarray) -> np.ndarray:
    """Per-candidate scores of one minibatch block."""
    return np.array(
        [snis_value(block.values[k], weights) for k in range(len(block.values))]
    )


def select_trajectory(
    candidates: Sequence[Sequence[CandidateTrajectory]],
    blocks: Sequence[EvaluationBlock],
    weights: Sequence[np.ndarray],
) -> CandidateTrajectory:
    """Global argmax of the per-minibatch scores; ties keep the lowest id."""
    if len(candidates) != len(blocks) or len(blocks) != len(weights):
        raise ValueError("minibatch lists disagree on length")
    best: CandidateTrajectory | None = None
    best_score = -math.inf
    for cands, block, w in zip(candidates, blocks, weights):
        if len(cands) != len(block.values):
            raise ValueError("candidate count disagrees with block size")
        scores = snis_scores(block, w)
        for cand, score in zip(cands, scores):
            if (
                best is None
                or score > best_score
                or (score == best_score and cand.scenario_id < best.scenario_id)
            ):
                best = cand
                best_score = float(score)
    if best is None:
        raise ValueError("need at least one candidate")
    return best


# ----------------------------------------------------------------------------
# Full optimization pass
# ----------------------------------------------------------------------------


@dataclass
class TrajOptResult:
    """Everything one optimization pass produced, in scenario-id order."""

    trajectory: CandidateTrajectory
    scores: np.ndarray  # (K,) per-candidate self-normalized scores
    weights: np.ndarray  # (K,) importance weights
    critical_agents: tuple[int, ...]
    proposal: ProposalDistribution
    candidates: list[CandidateTrajectory]
    blocks: list[EvaluationBlock]


def _evaluate_minibatch(
    group: Sequence[WeightedScenario],
    pi_star: tuple[MacroAction, ...],
    paths: list[ReferencePath],
    params: ModelParams,
    ego: EgoState,
    ego_path: int,
) -> tuple[list[CandidateTrajectory], EvaluationBlock]:
    scenarios = [ws.scenario for ws in group]
    ctx = build_sim_context(scenarios, paths, params)
    cands = generate_candidates(
        pi_star, ctx, ego, ego_path,
        scenario_ids=[sc.scenario_id for sc in scenarios],
    )
    return cands, cross_evaluate_block(cands, ctx)


def optimize_trajectory(
    ego: EgoState,
    agents: Sequence[AgentState],
    belief: Belief,
    paths: Sequence[ReferencePath],
    params: ModelParams,
    config: SearchConfig,
    pi_star: Sequence[MacroAction],
    tilt: float = DEFAULT_TILT,
    ego_path: int = 0,
) -> TrajOptResult:
    """Re-sample scenarios around the plan and pick the trajectory to execute.

    Scenario count and minibatch partition follow the search config; each
    minibatch generates and scores its candidates independently (in worker
    processes when the config asks for more than one), and a single join
    picks the global winner. The resample shares the config seed, so a zero
    tilt reproduces the planner's scenarios with unit weights.
    """
    paths = list(paths)
    pi = tuple(pi_star)
    flags = classify_hazardous_intentions(belief, agents, paths[ego_path], params)
    critical = tuple(j for j, row in enumerate(flags) if any(row))
    proposal = build_proposal(belief, critical, tilt, flags)
    weighted = resample_with_proposal(
        belief, proposal, ego, agents, config.n_scenarios, config.seed,
        params.horizon_steps, params.dt,
    )
    w = config.batch_width
    groups = [weighted[m * w : (m + 1) * w] for m in range(config.n_workers)]
    args = [(groups[m], pi, paths, params, ego, ego_path)
            for m in range(config.n_workers)]
    if config.n_workers == 1:
        outputs = [_evaluate_minibatch(*args[0])]
    else:
        mp = multiprocessing.get_context("fork")
        with mp.Pool(config.n_workers) as pool:
            outputs = pool.starmap(_evaluate_minibatch, args)
    cand_groups = [o[0] for o in outputs]
    blocks = [o[1] for o in outputs]
    weight_groups = [
        np.array([ws.weight for ws in group]) for group in groups
    ]
    chosen = select_trajectory(cand_groups, blocks, weight_groups)
    scores = np.concatenate(
        [snis_scores(b, wg) for b, wg in zip(blocks, weight_groups)]
    )
    return TrajOptResult(
        trajectory=chosen,
        scores=scores,
        weights=np.concatenate(weight_groups),
        critical_agents=critical,
        proposal=proposal,
        candidates=[c for group in cand_groups for c in group],
        blocks=blocks,
    )


def dump_blocks_csv(
    blocks: Sequence[EvaluationBlock],
    weights: Sequence[np.ndarray],
    candidates: Sequence[Sequence[CandidateTrajectory]],
) -> str:
    """Value matrix, weights, and scores as CSV, one row per candidate."""
    if not blocks:
        raise ValueError("need at least one block")
    width = len(blocks[0].values)
    cols = ["minibatch", "candidate", "weight", "score"]
    cols.extend(f"v{i}" for i in range(width))
    lines = [",".join(cols)]
    for m, (block, w, cands) in enumerate(zip(blocks, weights, candidates)):
        scores = snis_scores(block, w)
        for k, cand in enumerate(cands):
            cells = [
                str(m),
                str(cand.scenario_id),
                f"{float(w[k]):.17g}",
                f"{float(scores[k]):.17g}",
            ]
            cells.extend(f"{v:.17g}" for v in block.values[k])
            lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
