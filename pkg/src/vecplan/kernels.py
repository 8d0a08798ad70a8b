"""Step-synchronous batch simulation kernels.

A batch advances up to B independent lanes in lockstep, one control step
at a time; each lane is one (scenario, tree node, macro-action) slot.
All per-step math mirrors the scalar primitives in scenario_model
expression by expression, so a lane's outputs are bit-identical to
running the same slot alone through a scalar loop.

Scenario data lives in a SimContext: agent states per control step, their
Frenet rows per reference path, and one broad-phase tree per (scenario,
macro interval) in a single canonical collision frame (path 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario_model import (
    EgoState,
    ModelParams,
    ReferencePath,
    Scenario,
    discount_powers,
    find_follower,
    find_leader,
    mobil_feasible,
    wrap_angle_array,
)
from .spatial_index import StrTree, build_str_tree, sat_overlap_batch

# Padding segment for ragged path arrays: a degenerate far-away stub that can
# never win the nearest-segment argmin.
_FAR = 1.0e18


@dataclass
class SimContext:
    """Per-cycle read-only tables for one minibatch of scenarios."""

    params: ModelParams
    paths: list[ReferencePath]
    n_scenarios: int
    n_agents: int
    n_rows: int  # horizon_steps + 1 agent snapshots (row 0 = cycle start)
    path_ax: np.ndarray  # (P, S) segment starts, padded
    path_ay: np.ndarray
    path_ux: np.ndarray  # (P, S) unit tangents
    path_uy: np.ndarray
    path_len: np.ndarray  # (P, S) segment lengths, 0 on padding
    path_cum: np.ndarray  # (P, S) arc length at segment start
    path_hd: np.ndarray  # (P, S) segment headings
    ag_x: np.ndarray  # (K, R, n) agent poses per control step
    ag_y: np.ndarray
    ag_h: np.ndarray
    ag_v: np.ndarray
    ag_hl: np.ndarray  # (n,)
    ag_hw: np.ndarray  # (n,)
    ag_s: np.ndarray  # (P, K, R, n) Frenet rows per path
    ag_d: np.ndarray
    ag_val: np.ndarray  # speed along the path at the projected segment
    col_trees: list[list[StrTree]]  # [scenario][interval] broad-phase trees
    margin: float


def _pad_paths(paths: list[ReferencePath]) -> tuple[np.ndarray, ...]:
    s_max = max(p.n_segments for p in paths)
    n = len(paths)
    ax = np.full((n, s_max), _FAR)
    ay = np.full((n, s_max), _FAR)
    ux = np.zeros((n, s_max))
    ux[:, :] = 1.0
    uy = np.zeros((n, s_max))
    ln = np.zeros((n, s_max))
    cum = np.zeros((n, s_max))
    hd = np.zeros((n, s_max))
    for i, p in enumerate(paths):
        m = p.n_segments
        ax[i, :m] = p.points[:-1, 0]
        ay[i, :m] = p.points[:-1, 1]
        ux[i, :m] = p.unit[:, 0]
        uy[i, :m] = p.unit[:, 1]
        ln[i, :m] = p.seg_len
        cum[i, :m] = p.cum_s[:-1]
        hd[i, :m] = p.seg_heading
    return ax, ay, ux, uy, ln, cum, hd


def project_points(
    ctx: SimContext, path_idx: np.ndarray, px: np.ndarray, py: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched nearest-segment projection, one path per point.

    Mirrors ReferencePath.project: clamp to the segment, squared distance,
    first-occurrence argmin, signed left offset.  Returns (s, d, heading)
    with the input shape.
    """
    shape = px.shape
    pf = np.ravel(px)[:, None]
    qf = np.ravel(py)[:, None]
    pi = np.ravel(path_idx)
    ax = ctx.path_ax[pi]
    ay = ctx.path_ay[pi]
    ux = ctx.path_ux[pi]
    uy = ctx.path_uy[pi]
    ln = ctx.path_len[pi]
    rx = pf - ax
    ry = qf - ay
    t = rx * ux + ry * uy
    tc = np.minimum(np.maximum(t, 0.0), ln)
    dx = rx - tc * ux
    dy = ry - tc * uy
    d2 = dx * dx + dy * dy
    j = np.argmin(d2, axis=1)
    rows = np.arange(len(j))
    d = ux[rows, j] * ry[rows, j] - uy[rows, j] * rx[rows, j]
    s = ctx.path_cum[pi, j] + tc[rows, j]
    hd = ctx.path_hd[pi, j]
    return s.reshape(shape), d.reshape(shape), hd.reshape(shape)


def build_sim_context(
    scenarios: list[Scenario],
    paths: list[ReferencePath],
    params: ModelParams,
    margin: float = 0.1,
) -> SimContext:
    """Precompute all per-cycle tables for a minibatch of scenarios.

    Agent Frenet rows are computed on every reference path (leader lookups
    run on the lane's active path); collision boxes live on path 0 only, the
    canonical frame shared by every query.
    """
    k = len(scenarios)
    n = scenarios[0].n_agents
    rows = params.horizon_steps + 1
    steps = params.steps_per_macro
    depth = params.tree_depth
    ax, ay, ux, uy, ln, cum, hd = _pad_paths(paths)
    ctx = SimContext(
        params=params,
        paths=list(paths),
        n_scenarios=k,
        n_agents=n,
        n_rows=rows,
        path_ax=ax,
        path_ay=ay,
        path_ux=ux,
        path_uy=uy,
        path_len=ln,
        path_cum=cum,
        path_hd=hd,
        ag_x=np.zeros((k, rows, n)),
        ag_y=np.zeros((k, rows, n)),
        ag_h=np.zeros((k, rows, n)),
        ag_v=np.zeros((k, rows, n)),
        ag_hl=np.array([t.half_length for t in scenarios[0].trajectories])
        if n
        else np.zeros(0),
        ag_hw=np.array([t.half_width for t in scenarios[0].trajectories])
        if n
        else np.zeros(0),
        ag_s=np.zeros((len(paths), k, rows, n)),
        ag_d=np.zeros((len(paths), k, rows, n)),
        ag_val=np.zeros((len(paths), k, rows, n)),
        col_trees=[],
        margin=margin,
    )
    for w, sc in enumerate(scenarios):
        if sc.n_agents != n:
            raise ValueError("scenarios disagree on agent count")
        for i, (a0, traj) in enumerate(zip(sc.initial_agents, sc.trajectories)):
            ctx.ag_x[w, 0, i] = a0.x
            ctx.ag_y[w, 0, i] = a0.y
            ctx.ag_h[w, 0, i] = a0.heading
            ctx.ag_v[w, 0, i] = a0.speed
            ctx.ag_x[w, 1:, i] = traj.x
            ctx.ag_y[w, 1:, i] = traj.y
            ctx.ag_h[w, 1:, i] = traj.heading
            ctx.ag_v[w, 1:, i] = traj.speed
    if n:
        for p in range(len(paths)):
            pidx = np.full(ctx.ag_x.shape, p, dtype=np.int64)
            s, d, head = project_points(ctx, pidx, ctx.ag_x, ctx.ag_y)
            ctx.ag_s[p] = s
            ctx.ag_d[p] = d
            ctx.ag_val[p] = ctx.ag_v * np.cos(ctx.ag_h - head)
        # Collision boxes in the path-0 frame: per agent, the union of its
        # per-step corner bounds over one macro interval, inflated by the
        # margin (the ego query carries the same margin).
        ch = np.cos(ctx.ag_h)
        sh = np.sin(ctx.ag_h)
        corner_s = np.empty((4, k, rows, n))
        corner_d = np.empty((4, k, rows, n))
        zeros = np.zeros(ctx.ag_x.shape, dtype=np.int64)
        for ci, (el, ew) in enumerate(
            ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0))
        ):
            cx = ctx.ag_x + (el * ctx.ag_hl) * ch - (ew * ctx.ag_hw) * sh
            cy = ctx.ag_y + (el * ctx.ag_hl) * sh + (ew * ctx.ag_hw) * ch
            s, d, _ = project_points(ctx, zeros, cx, cy)
            corner_s[ci] = s
            corner_d[ci] = d
        for w in range(k):
            per_interval = []
            for j in range(depth):
                sl = slice(j * steps + 1, (j + 1) * steps + 1)
                lo_s = corner_s[:, w, sl].min(axis=(0, 1)) - margin
                hi_s = corner_s[:, w, sl].max(axis=(0, 1)) + margin
                lo_d = corner_d[:, w, sl].min(axis=(0, 1)) - margin
                hi_d = corner_d[:, w, sl].max(axis=(0, 1)) + margin
                boxes = np.column_stack([lo_s, hi_s, lo_d, hi_d])
                per_interval.append(build_str_tree(boxes))
            ctx.col_trees.append(per_interval)
    return ctx


def _mobil_gate(
    ctx: SimContext,
    scenario: int,
    row: int,
    x: float,
    y: float,
    speed: float,
    cur_path: int,
    target_path: int,
) -> bool:
    """Lane-change feasibility at a macro boundary, on lane-center corridors."""
    params = ctx.params
    pc = ctx.paths[cur_path].project(x, y)
    pt = ctx.paths[target_path].project(x, y)
    hl = ctx.ag_hl
    cur_leader = find_leader(
        pc.s,
        ctx.ag_s[cur_path, scenario, row],
        ctx.ag_d[cur_path, scenario, row],
        ctx.ag_val[cur_path, scenario, row],
        hl,
        0.0,
        params,
    )
    ts = ctx.ag_s[target_path, scenario, row]
    td = ctx.ag_d[target_path, scenario, row]
    tv = ctx.ag_val[target_path, scenario, row]
    tgt_leader = find_leader(pt.s, ts, td, tv, hl, 0.0, params)
    tgt_follower, fol_idx = find_follower(pt.s, ts, td, tv, hl, 0.0, params)
    if fol_idx < 0:
        return mobil_feasible(speed, cur_leader, tgt_leader, None, np.inf, params)
    fol_gap_to_leader = (
        tgt_leader.gap + tgt_follower.gap + 2.0 * params.ego_half_length
    )
    return mobil_feasible(
        speed, cur_leader, tgt_leader, tgt_follower, fol_gap_to_leader, params
    )


@dataclass
class MacroBatchResult:
    """Outputs of one macro-action batch; index order matches the input lanes."""

    eff_path: np.ndarray  # (B,) path actually followed (after the MOBIL gate)
    end_x: np.ndarray  # (B,) state at the macro end (or at the collision step)
    end_y: np.ndarray
    end_heading: np.ndarray
    end_speed: np.ndarray
    reward: np.ndarray  # (B,) summed step rewards, penalty included
    collided: np.ndarray  # (B,) bool
    collision_step: np.ndarray  # (B,) first colliding step, steps_per_macro if none
    pose_x: np.ndarray  # (B, steps+1) full integrated states, start included
    pose_y: np.ndarray
    pose_heading: np.ndarray
    pose_speed: np.ndarray
    accel: np.ndarray  # (B, steps) per-step commands
    progress: np.ndarray  # (B, steps) per-step arc-length gain on eff_path


def run_macro_batch(
    ctx: SimContext,
    lane_scenario: np.ndarray,
    interval: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    heading: np.ndarray,
    speed: np.ndarray,
    cur_path: np.ndarray,
    action_path: np.ndarray,
    nudge: np.ndarray,
    active: np.ndarray,
    check_collision: bool = True,
    run_mobil: bool = True,
) -> MacroBatchResult:
    """Advance every active lane through one macro-action in lockstep.

    Dynamics never depend on collisions: every lane integrates the full
    macro, then the collision pass truncates rewards and end states at the
    first colliding step.  Inactive lanes pass their state through
    untouched and report zero reward.
    """
    params = ctx.params
    idm = params.idm
    stn = params.stanley
    rw = params.reward
    steps = params.steps_per_macro
    dt = params.dt
    b = len(x)
    lane_scenario = np.asarray(lane_scenario, dtype=np.int64)
    interval = np.asarray(interval, dtype=np.int64)
    active = np.asarray(active, dtype=bool)

    eff = np.asarray(action_path, dtype=np.int64).copy()
    if run_mobil:
        for w in np.flatnonzero(active & (eff != cur_path)):
            ok = _mobil_gate(
                ctx,
                int(lane_scenario[w]),
                int(interval[w]) * steps,
                float(x[w]),
                float(y[w]),
                float(speed[w]),
                int(cur_path[w]),
                int(eff[w]),
            )
            if not ok:
                eff[w] = cur_path[w]

    pose_x = np.empty((b, steps + 1))
    pose_y = np.empty((b, steps + 1))
    pose_h = np.empty((b, steps + 1))
    pose_v = np.empty((b, steps + 1))
    accel_log = np.empty((b, steps))
    progress = np.empty((b, steps))
    sx = np.array(x, dtype=float)
    sy = np.array(y, dtype=float)
    sh = np.array(heading, dtype=float)
    sv = np.array(speed, dtype=float)
    pose_x[:, 0] = sx
    pose_y[:, 0] = sy
    pose_h[:, 0] = sh
    pose_v[:, 0] = sv
    s_cur, d_cur, hd_cur = project_points(ctx, eff, sx, sy)
    base_row = interval * steps
    lane_rows = np.arange(b)
    for u in range(steps):
        if ctx.n_agents:
            row = base_row + u
            ags = ctx.ag_s[eff, lane_scenario, row]
            agd = ctx.ag_d[eff, lane_scenario, row]
            agv = ctx.ag_val[eff, lane_scenario, row]
            cand = np.where(
                (np.abs(agd - nudge[:, None]) <= params.corridor_half_width)
                & (ags > s_cur[:, None]),
                ags,
                np.inf,
            )
            j = np.argmin(cand, axis=1)
            s_best = cand[lane_rows, j]
            has = np.isfinite(s_best)
            gap = np.where(
                has,
                s_best - s_cur - (ctx.ag_hl[j] + params.ego_half_length),
                np.inf,
            )
            lead_v = np.where(has, agv[lane_rows, j], 0.0)
        else:
            gap = np.full(b, np.inf)
            lead_v = np.zeros(b)
        # IDM, mirroring idm_acceleration term by term.
        r = sv / idm.v0
        r2 = r * r
        r4 = r2 * r2
        sstar = idm.s0 + np.maximum(
            0.0, sv * idm.headway + sv * (sv - lead_v) / idm.two_sqrt_ab
        )
        z = sstar / np.where(gap > 0.0, gap, np.inf)
        a_free = idm.a_max * (1.0 - r4 - z * z)
        a_free = np.minimum(np.maximum(a_free, -idm.b_max), idm.a_max)
        accel = np.where(gap <= 0.0, -idm.b_max, a_free)
        # Stanley, mirroring stanley_steering.
        he = wrap_angle_array(hd_cur - sh)
        raw = he - np.arctan(
            stn.gain * (d_cur - nudge) / np.maximum(sv, stn.speed_floor)
        )
        steer = np.minimum(np.maximum(raw, -stn.max_steer), stn.max_steer)
        # Kinematic step, mirroring step_ego.
        nx = sx + sv * np.cos(sh) * dt
        ny = sy + sv * np.sin(sh) * dt
        nh = wrap_angle_array(sh + sv / params.wheelbase * np.tan(steer) * dt)
        nv = sv + accel * dt
        nv = np.where(nv < 0.0, 0.0, nv)
        sx, sy, sh, sv = nx, ny, nh, nv
        pose_x[:, u + 1] = sx
        pose_y[:, u + 1] = sy
        pose_h[:, u + 1] = sh
        pose_v[:, u + 1] = sv
        s_new, d_new, hd_new = project_points(ctx, eff, sx, sy)
        progress[:, u] = s_new - s_cur
        accel_log[:, u] = accel
        s_cur, d_cur, hd_cur = s_new, d_new, hd_new

    # Collision pass: one broad-phase query per lane over its swept extent,
    # then one SAT batch over all (lane, step, candidate) triples.
    hit_step = np.full(b, steps, dtype=np.int64)
    if check_collision and ctx.n_agents:
        ce = np.cos(pose_h[:, 1:])
        se = np.sin(pose_h[:, 1:])
        ehl = params.ego_half_length
        ehw = params.ego_half_width
        cs_min = np.full(b, np.inf)
        cs_max = np.full(b, -np.inf)
        cd_min = np.full(b, np.inf)
        cd_max = np.full(b, -np.inf)
        zeros = np.zeros((b, steps), dtype=np.int64)
        for el, ew in ((ehl, ehw), (ehl, -ehw), (-ehl, ehw), (-ehl, -ehw)):
            cx = pose_x[:, 1:] + el * ce - ew * se
            cy = pose_y[:, 1:] + el * se + ew * ce
            s, d, _ = project_points(ctx, zeros, cx, cy)
            cs_min = np.minimum(cs_min, s.min(axis=1))
            cs_max = np.maximum(cs_max, s.max(axis=1))
            cd_min = np.minimum(cd_min, d.min(axis=1))
            cd_max = np.maximum(cd_max, d.max(axis=1))
        pair_lane: list[np.ndarray] = []
        pair_step: list[np.ndarray] = []
        pair_agent: list[np.ndarray] = []
        for w in np.flatnonzero(active):
            tree = ctx.col_trees[int(lane_scenario[w])][int(interval[w])]
            cand = tree.query(
                (
                    cs_min[w] - ctx.margin,
                    cs_max[w] + ctx.margin,
                    cd_min[w] - ctx.margin,
                    cd_max[w] + ctx.margin,
                )
            )
            if cand.size:
                lanes, steps_ix, agents = np.broadcast_arrays(
                    np.int64(w),
                    np.arange(steps, dtype=np.int64)[:, None],
                    cand[None, :],
                )
                pair_lane.append(lanes.ravel())
                pair_step.append(steps_ix.ravel())
                pair_agent.append(agents.ravel())
        if pair_lane:
            pl = np.concatenate(pair_lane)
            pu = np.concatenate(pair_step)
            pa = np.concatenate(pair_agent)
            prow = base_row[pl] + pu + 1
            psc = lane_scenario[pl]
            flags = sat_overlap_batch(
                pose_x[pl, pu + 1],
                pose_y[pl, pu + 1],
                pose_h[pl, pu + 1],
                params.ego_half_length,
                params.ego_half_width,
                ctx.ag_x[psc, prow, pa],
                ctx.ag_y[psc, prow, pa],
                ctx.ag_h[psc, prow, pa],
                ctx.ag_hl[pa],
                ctx.ag_hw[pa],
                np.ones(len(pl), dtype=bool),
            )
            if flags.any():
                np.minimum.at(hit_step, pl[flags], pu[flags])

    base = rw.progress_weight * progress - rw.comfort_weight * (accel_log * accel_log)
    penalty_total = np.zeros(b)
    for u in range(steps):
        r_u = np.where(hit_step == u, base[:, u] + rw.collision_penalty, base[:, u])
        penalty_total = np.where(u <= hit_step, penalty_total + r_u, penalty_total)
    collided = hit_step < steps
    end_idx = np.where(collided, hit_step + 1, steps)
    reward = np.where(active, penalty_total, 0.0)
    return MacroBatchResult(
        eff_path=np.where(active, eff, cur_path),
        end_x=np.where(active, pose_x[lane_rows, end_idx], x),
        end_y=np.where(active, pose_y[lane_rows, end_idx], y),
        end_heading=np.where(active, pose_h[lane_rows, end_idx], heading),
        end_speed=np.where(active, pose_v[lane_rows, end_idx], speed),
        reward=reward,
        collided=active & collided,
        collision_step=np.where(active, hit_step, steps),
        pose_x=pose_x,
        pose_y=pose_y,
        pose_heading=pose_h,
        pose_speed=pose_v,
        accel=accel_log,
        progress=progress,
    )


def run_rollout_batch(
    ctx: SimContext,
    lane_scenario: np.ndarray,
    start_depth: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    heading: np.ndarray,
    speed: np.ndarray,
    path: np.ndarray,
    nudge: np.ndarray,
    active: np.ndarray,
) -> np.ndarray:
    """Discounted return of repeating each lane's macro-action to the horizon.

    Lanes mask out as they reach the tree depth limit or collide; a lane
    already at the limit runs zero steps and returns 0.  Discounting is
    relative to each lane's start depth.
    """
    depth_limit = ctx.params.tree_depth
    powers = discount_powers(ctx.params.reward.gamma, depth_limit + 1)
    total = np.zeros(len(x))
    sx = np.array(x, dtype=float)
    sy = np.array(y, dtype=float)
    sh = np.array(heading, dtype=float)
    sv = np.array(speed, dtype=float)
    start_depth = np.asarray(start_depth, dtype=np.int64)
    alive = np.asarray(active, dtype=bool) & (start_depth < depth_limit)
    m = 0
    while alive.any():
        level = start_depth + m
        res = run_macro_batch(
            ctx,
            lane_scenario,
            np.where(alive, level, 0),
            sx,
            sy,
            sh,
            sv,
            cur_path=path,
            action_path=path,
            nudge=nudge,
            active=alive,
            run_mobil=False,
        )
        pm = float(powers[m])
        total = np.where(alive, total + pm * res.reward, total)
        sx, sy, sh, sv = res.end_x, res.end_y, res.end_heading, res.end_speed
        alive = alive & ~res.collided & (level + 1 < depth_limit)
        m += 1
    return total
