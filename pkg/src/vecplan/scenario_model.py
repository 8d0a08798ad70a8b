"""Driving scenario model: states, reference paths, controllers, rewards, sampling.

Everything downstream (the batched search kernels and the scalar reference
planner) is built on the primitives here. The scalar functions define the
exact arithmetic: vectorized mirrors must reproduce them bit for bit, so
association order matters and tan/atan are routed through numpy (numpy's SIMD
tan/atan differ from libm's at the last bit, but numpy agrees with itself
across array shapes; sin/cos/sqrt agree between math and numpy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    return theta - TWO_PI * math.ceil((theta - math.pi) / TWO_PI)


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    """Array mirror of wrap_angle, bit-identical per element."""
    return theta - TWO_PI * np.ceil((theta - math.pi) / TWO_PI)


# ----------------------------------------------------------------------------
# Core states and actions
# ----------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class EgoState:
    x: float
    y: float
    heading: float
    speed: float


@dataclass(frozen=True, slots=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float
    half_length: float
    half_width: float


@dataclass(frozen=True, slots=True)
class MacroAction:
    """One tree-level action: follow a reference path at a lateral offset."""

    path_id: int
    nudge: float
    duration: float = 2.0


def build_action_set(
    n_paths: int = 3,
    nudges: Sequence[float] = (-1.0, 0.0, 1.0),
    duration: float = 2.0,
) -> tuple[MacroAction, ...]:
    """Enumerate the macro-action set; index = path_id * len(nudges) + nudge_idx."""
    return tuple(
        MacroAction(p, float(nu), duration) for p in range(n_paths) for nu in nudges
    )


# ----------------------------------------------------------------------------
# Model parameters
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class IdmParams:
    v0: float = 13.9            # desired speed, m/s
    headway: float = 1.5        # desired time headway, s
    s0: float = 2.0             # jam distance, m
    a_max: float = 1.5          # max acceleration, m/s^2
    b_comfort: float = 2.0      # comfortable braking, m/s^2
    b_max: float = 6.0          # hard braking limit, m/s^2
    exponent: float = 4.0       # free-flow exponent (fixed power of 4 below)
    two_sqrt_ab: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "two_sqrt_ab", 2.0 * math.sqrt(self.a_max * self.b_comfort)
        )


@dataclass(frozen=True)
class StanleyParams:
    gain: float = 2.5
    max_steer: float = 0.6      # rad
    speed_floor: float = 0.1    # m/s, avoids the atan blowing up at rest


@dataclass(frozen=True)
class MobilParams:
    politeness: float = 0.3
    b_safe: float = 3.0         # max imposed braking on the new follower, m/s^2
    threshold: float = 0.1      # incentive switching threshold, m/s^2


@dataclass(frozen=True)
class RewardSpec:
    collision_penalty: float = -1000.0
    progress_weight: float = 1.0
    comfort_weight: float = 0.1
    gamma: float = 0.95


@dataclass(frozen=True)
class ModelParams:
    idm: IdmParams = field(default_factory=IdmParams)
    stanley: StanleyParams = field(default_factory=StanleyParams)
    mobil: MobilParams = field(default_factory=MobilParams)
    reward: RewardSpec = field(default_factory=RewardSpec)
    dt: float = 0.1                    # control step, s
    wheelbase: float = 2.8             # m
    ego_half_length: float = 2.4       # ego is 4.8 x 2.0 m
    ego_half_width: float = 1.0
    corridor_half_width: float = 2.0   # same-lane test band for leader search
    macro_duration: float = 2.0        # one tree level, s
    horizon: float = 8.0               # planning horizon, s

    @property
    def steps_per_macro(self) -> int:
        return int(round(self.macro_duration / self.dt))

    @property
    def tree_depth(self) -> int:
        return int(round(self.horizon / self.macro_duration))

    @property
    def horizon_steps(self) -> int:
        return self.steps_per_macro * self.tree_depth


def discount_powers(gamma: float, n: int) -> np.ndarray:
    """[1, gamma, gamma^2, ...] by iterated multiply; shared by all planners."""
    out = np.empty(n, dtype=np.float64)
    acc = 1.0
    for i in range(n):
        out[i] = acc
        acc = acc * gamma
    out.setflags(write=False)
    return out


# ----------------------------------------------------------------------------
# Reference paths and Frenet projection
# ----------------------------------------------------------------------------


class FrenetProjection(NamedTuple):
    s: float          # arc length along the path
    d: float          # signed lateral offset, left positive
    heading: float    # tangent heading of the matched segment
    segment: int
    clamped: bool     # projection fell beyond an endpoint


class ReferencePath:
    """Polyline path with arc-length parametrization.

    Stores numpy arrays for the batched kernels and plain float tuples for the
    scalar projection loop; both views read the same doubles.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("path needs at least two 2-d points")
        delta = np.diff(pts, axis=0)
        seg_len = np.sqrt(delta[:, 0] * delta[:, 0] + delta[:, 1] * delta[:, 1])
        if np.any(seg_len <= 0.0):
            raise ValueError("path has a zero-length segment")
        self.points = pts
        self.seg_len = seg_len
        self.unit = delta / seg_len[:, None]
        self.cum_s = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.seg_heading = np.arctan2(delta[:, 1], delta[:, 0])
        for arr in (self.points, self.seg_len, self.unit, self.cum_s, self.seg_heading):
            arr.setflags(write=False)
        # Scalar views (python floats) for the projection loop.
        self._ax = tuple(float(v) for v in pts[:-1, 0])
        self._ay = tuple(float(v) for v in pts[:-1, 1])
        self._ux = tuple(float(v) for v in self.unit[:, 0])
        self._uy = tuple(float(v) for v in self.unit[:, 1])
        self._l = tuple(float(v) for v in seg_len)
        self._cs = tuple(float(v) for v in self.cum_s)
        self._hd = tuple(float(v) for v in self.seg_heading)

    @classmethod
    def straight(cls, start: Sequence[float], end: Sequence[float]) -> "ReferencePath":
        return cls(np.array([start, end], dtype=np.float64))

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])

    @property
    def n_segments(self) -> int:
        return len(self._l)

    def project(self, x: float, y: float) -> FrenetProjection:
        """Nearest-point projection; ties go to the lowest segment index."""
        best_d2 = math.inf
        best_j = 0
        best_t = 0.0
        best_raw = 0.0
        for j in range(len(self._l)):
            rx = x - self._ax[j]
            ry = y - self._ay[j]
            t = rx * self._ux[j] + ry * self._uy[j]
            tc = min(max(t, 0.0), self._l[j])
            dx = rx - tc * self._ux[j]
            dy = ry - tc * self._uy[j]
            d2 = dx * dx + dy * dy
            if d2 < best_d2:
                best_d2 = d2
                best_j = j
                best_t = tc
                best_raw = t
        j = best_j
        rx = x - self._ax[j]
        ry = y - self._ay[j]
        d = self._ux[j] * ry - self._uy[j] * rx
        clamped = (j == 0 and best_raw < 0.0) or (
            j == len(self._l) - 1 and best_raw > self._l[j]
        )
        return FrenetProjection(self._cs[j] + best_t, d, self._hd[j], j, clamped)

    def xy_at(self, s: float, d: float = 0.0) -> tuple[float, float]:
        """Inverse map: point at arc length s with lateral offset d."""
        j = int(np.searchsorted(self.cum_s, s, side="right")) - 1
        j = min(max(j, 0), len(self._l) - 1)
        t = s - self._cs[j]
        x = self._ax[j] + t * self._ux[j] - d * self._uy[j]
        y = self._ay[j] + t * self._uy[j] + d * self._ux[j]
        return x, y


# ----------------------------------------------------------------------------
# Controllers and kinematics
# ----------------------------------------------------------------------------


def idm_acceleration(speed: float, gap: float, lead_speed: float, p: IdmParams) -> float:
    """IDM longitudinal command, clamped to [-b_max, a_max].

    gap is the bumper-to-bumper distance; math.inf means free road (the
    interaction term vanishes exactly). gap <= 0 is an emergency: hard brake.
    """
    if gap <= 0.0:
        return -p.b_max
    r = speed / p.v0
    r2 = r * r
    r4 = r2 * r2
    sstar = p.s0 + max(0.0, speed * p.headway + speed * (speed - lead_speed) / p.two_sqrt_ab)
    z = sstar / gap
    a = p.a_max * (1.0 - r4 - z * z)
    if a < -p.b_max:
        return -p.b_max
    if a > p.a_max:
        return p.a_max
    return a


def stanley_steering(
    heading: float, speed: float, path_heading: float, cross_track: float, p: StanleyParams
) -> float:
    """Stanley front-wheel steering: heading term plus cross-track correction.

    cross_track is the signed lateral error, left of target positive; being
    left of the target line steers right (negative).
    """
    he = wrap_angle(path_heading - heading)
    raw = he - float(np.arctan(p.gain * cross_track / max(speed, p.speed_floor)))
    return min(max(raw, -p.max_steer), p.max_steer)


def step_ego(
    state: EgoState,
    proj: FrenetProjection,
    nudge: float,
    gap: float,
    lead_speed: float,
    params: ModelParams,
) -> tuple[EgoState, float, float]:
    """Advance the ego one control step along its path.

    proj is the current pose's projection onto the active reference path.
    Returns (next_state, accel, steer). Kinematic bicycle, explicit Euler;
    position integrates the pre-update speed and heading.
    """
    accel = idm_acceleration(state.speed, gap, lead_speed, params.idm)
    steer = stanley_steering(
        state.heading, state.speed, proj.heading, proj.d - nudge, params.stanley
    )
    dt = params.dt
    nx = state.x + state.speed * math.cos(state.heading) * dt
    ny = state.y + state.speed * math.sin(state.heading) * dt
    nh = wrap_angle(
        state.heading + state.speed / params.wheelbase * float(np.tan(steer)) * dt
    )
    nv = state.speed + accel * dt
    if nv < 0.0:
        nv = 0.0
    return EgoState(nx, ny, nh, nv), accel, steer


def step_reward(collision: bool, progress_delta: float, accel: float, spec: RewardSpec) -> float:
    """Per-control-step reward: progress minus comfort, plus penalty on collision."""
    r = spec.progress_weight * progress_delta - spec.comfort_weight * (accel * accel)
    if collision:
        r = r + spec.collision_penalty
    return r


# ----------------------------------------------------------------------------
# Neighbor resolution (shared semantics for IDM / MOBIL inputs)
# ----------------------------------------------------------------------------


class Neighbor(NamedTuple):
    gap: float      # bumper gap, m (math.inf when absent)
    speed: float    # speed along the ego path direction


NO_NEIGHBOR = Neighbor(math.inf, 0.0)


def find_leader(
    s_ego: float,
    agents_s: Sequence[float],
    agents_d: Sequence[float],
    agents_speed_along: Sequence[float],
    agents_half_length: Sequence[float],
    nudge: float,
    params: ModelParams,
) -> Neighbor:
    """Nearest agent strictly ahead within the lane corridor around `nudge`.

    Ties on s keep the lowest agent index. Inputs are Frenet coordinates on
    the ego's active path. The returned gap can be <= 0 (lateral near-miss
    overlap), which IDM treats as an emergency.
    """
    best_s = math.inf
    best_i = -1
    for i in range(len(agents_s)):
        if abs(agents_d[i] - nudge) > params.corridor_half_width:
            continue
        si = agents_s[i]
        if si <= s_ego:
            continue
        if si < best_s:
            best_s = si
            best_i = i
    if best_i < 0:
        return NO_NEIGHBOR
    gap = best_s - s_ego - (agents_half_length[best_i] + params.ego_half_length)
    return Neighbor(gap, agents_speed_along[best_i])


def find_follower(
    s_ego: float,
    agents_s: Sequence[float],
    agents_d: Sequence[float],
    agents_speed_along: Sequence[float],
    agents_half_length: Sequence[float],
    nudge: float,
    params: ModelParams,
) -> tuple[Neighbor, int]:
    """Nearest agent strictly behind within the corridor; also returns its index."""
    best_s = -math.inf
    best_i = -1
    for i in range(len(agents_s)):
        if abs(agents_d[i] - nudge) > params.corridor_half_width:
            continue
        si = agents_s[i]
        if si >= s_ego:
            continue
        if si > best_s:
            best_s = si
            best_i = i
    if best_i < 0:
        return NO_NEIGHBOR, -1
    gap = s_ego - best_s - (agents_half_length[best_i] + params.ego_half_length)
    return Neighbor(gap, agents_speed_along[best_i]), best_i


def mobil_feasible(
    ego_speed: float,
    cur_leader: Neighbor,
    tgt_leader: Neighbor,
    tgt_follower: Neighbor | None,
    follower_gap_to_tgt_leader: float,
    params: ModelParams,
) -> bool:
    """MOBIL gate for a lane change.

    Empty target lane (no leader, no follower) is feasible unconditionally.
    Otherwise requires the safety criterion (the new follower's braking stays
    above -b_safe) and the incentive criterion (ego gain plus politeness-
    weighted follower change exceeds the switching threshold). The politeness
    term covers the new follower only.
    """
    idm = params.idm
    mob = params.mobil
    if tgt_leader.gap == math.inf and tgt_follower is None:
        return True
    a_ego_new = idm_acceleration(ego_speed, tgt_leader.gap, tgt_leader.speed, idm)
    a_ego_old = idm_acceleration(ego_speed, cur_leader.gap, cur_leader.speed, idm)
    if tgt_follower is None:
        return a_ego_new - a_ego_old > mob.threshold
    a_fol_new = idm_acceleration(tgt_follower.speed, tgt_follower.gap, ego_speed, idm)
    if a_fol_new < -mob.b_safe:
        return False
    a_fol_old = idm_acceleration(
        tgt_follower.speed, follower_gap_to_tgt_leader, tgt_leader.speed, idm
    )
    incentive = (a_ego_new - a_ego_old) + mob.politeness * (a_fol_new - a_fol_old)
    return incentive > mob.threshold


# ----------------------------------------------------------------------------
# Beliefs, intentions, scenarios
# ----------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class IntentionSpec:
    """One hypothesis about an agent, realized by a constant controller.

    Speed ramps toward target_speed at `accel`; lateral offset (in the agent's
    own frame at sampling time) ramps toward lateral_offset at lateral_rate.
    """

    kind: str
    probability: float
    target_speed: float
    accel: float = 0.0
    lateral_offset: float = 0.0
    lateral_rate: float = 0.0


@dataclass(frozen=True, slots=True)
class AgentHypotheses:
    intentions: tuple[IntentionSpec, ...]

    def __post_init__(self) -> None:
        if not self.intentions:
            raise ValueError("agent needs at least one intention")
        total = sum(it.probability for it in self.intentions)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"intention probabilities sum to {total}, not 1")
        if any(it.probability < 0.0 for it in self.intentions):
            raise ValueError("negative intention probability")


@dataclass(frozen=True, slots=True)
class Belief:
    """Per-agent independent intention distributions."""

    agents: tuple[AgentHypotheses, ...]


class Trajectory:
    """Time-major agent states over the horizon, stored as read-only arrays.

    Entry i is the state after i+1 control steps; the state at t=0 lives in
    the owning Scenario.
    """

    __slots__ = ("x", "y", "heading", "speed", "half_length", "half_width")

    def __init__(self, x, y, heading, speed, half_length: float, half_width: float):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.heading = np.asarray(heading, dtype=np.float64)
        self.speed = np.asarray(speed, dtype=np.float64)
        n = len(self.x)
        if not (len(self.y) == len(self.heading) == len(self.speed) == n):
            raise ValueError("trajectory arrays disagree on length")
        for arr in (self.x, self.y, self.heading, self.speed):
            arr.setflags(write=False)
        self.half_length = float(half_length)
        self.half_width = float(half_width)

    def __len__(self) -> int:
        return len(self.x)

    def state_at(self, i: int) -> AgentState:
        return AgentState(
            float(self.x[i]), float(self.y[i]), float(self.heading[i]),
            float(self.speed[i]), self.half_length, self.half_width,
        )


@dataclass(frozen=True, slots=True)
class Scenario:
    """One sampled world: the root state plus a realized trajectory per agent."""

    scenario_id: int
    initial_ego: EgoState
    initial_agents: tuple[AgentState, ...]
    trajectories: tuple[Trajectory, ...]
    intention_ids: tuple[int, ...]

    @property
    def n_agents(self) -> int:
        return len(self.trajectories)


def roll_intention(
    state: AgentState, intention: IntentionSpec, n_steps: int, dt: float
) -> Trajectory:
    """Realize an intention as a constant-controller rollout from `state`."""
    th0 = state.heading
    ux = math.cos(th0)
    uy = math.sin(th0)
    nx_ = -uy
    ny_ = ux
    lon = 0.0
    lat = 0.0
    v = state.speed
    heading = th0
    xs = np.empty(n_steps)
    ys = np.empty(n_steps)
    hs = np.empty(n_steps)
    vs = np.empty(n_steps)
    for t in range(n_steps):
        tv = intention.target_speed
        if v < tv:
            v = min(tv, v + intention.accel * dt)
        elif v > tv:
            v = max(tv, v - intention.accel * dt)
        if v < 0.0:
            v = 0.0
        rem = intention.lateral_offset - lat
        vo = min(max(rem / dt, -intention.lateral_rate), intention.lateral_rate)
        lat += vo * dt
        lon += v * dt
        vx = v * ux + vo * nx_
        vy = v * uy + vo * ny_
        spd = math.hypot(v, vo)
        if spd > 1e-9:
            heading = math.atan2(vy, vx)
        xs[t] = state.x + lon * ux + lat * nx_
        ys[t] = state.y + lon * uy + lat * ny_
        hs[t] = heading
        vs[t] = spd
    return Trajectory(xs, ys, hs, vs, state.half_length, state.half_width)


def sample_scenarios(
    belief: Belief,
    ego_state: EgoState,
    agent_states: Sequence[AgentState],
    k: int,
    seed: int,
    n_steps: int,
    dt: float,
) -> list[Scenario]:
    """Draw k independent scenarios from the belief.

    Scenario i uses its own RNG stream seeded by (seed, i), so scenario
    contents do not depend on k or on how the forest is partitioned later.
    """
    if k < 1:
        raise ValueError("need at least one scenario")
    if len(agent_states) != len(belief.agents):
        raise ValueError("belief and agent states disagree on agent count")
    scenarios: list[Scenario] = []
    for i in range(k):
        rng = np.random.default_rng([seed, i])
        trajs: list[Trajectory] = []
        picks: list[int] = []
        for agent, hyp in zip(agent_states, belief.agents):
            u = rng.random()
            acc = 0.0
            idx = len(hyp.intentions) - 1
            for j, it in enumerate(hyp.intentions):
                acc += it.probability
                if u < acc:
                    idx = j
                    break
            picks.append(idx)
            trajs.append(roll_intention(agent, hyp.intentions[idx], n_steps, dt))
        scenarios.append(
            Scenario(i, ego_state, tuple(agent_states), tuple(trajs), tuple(picks))
        )
    return scenarios
