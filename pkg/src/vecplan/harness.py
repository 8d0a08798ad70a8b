"""Scene generation, closed-loop episodes, and the throughput benchmark.

Scenes are synthetic highway (or highway-plus-crossing) layouts with agents
placed collision-free, each carrying a small intention distribution. An
episode samples one true intention per agent, then alternates planning and
executing the chosen trajectory for one replan period at a time; agents
follow their realized trajectories open-loop. The benchmark runs single
planning cycles per (density, variant, repetition) cell and reports tree
construction throughput, with one serial baseline per cell for speedups.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from time import perf_counter
from typing import Sequence

import numpy as np

from .qmdp_search import SearchConfig, plan
from .scenario_model import (
    AgentHypotheses,
    AgentState,
    Belief,
    EgoState,
    IntentionSpec,
    ModelParams,
    ReferencePath,
    roll_intention,
)
from .serial_ref import serial_plan
from .spatial_index import Obb, agent_obb, obb_overlap
from .traj_opt import DEFAULT_TILT, optimize_trajectory

SCENE_FORMAT_VERSION = 1
LAYOUT_KINDS = ("highway", "crossing")

# Stream tag keeping the true-world draw apart from planner scenario draws,
# which use (seed, scenario_index).
_TRUE_WORLD_STREAM = 1_000_003

# Placement clearance between spawned agents, and the keep-out zone half
# extents around the ego start.
_AGENT_CLEARANCE = 0.5
_EGO_ZONE_LENGTH = 6.5
_EGO_ZONE_WIDTH = 2.0


@dataclass(frozen=True)
class LaneLayout:
    """Straight multi-lane road, optionally with one crossing road."""

    kind: str = "highway"
    n_lanes: int = 3
    lane_width: float = 3.5
    length: float = 600.0
    crossing_x: float = 120.0  # crossing-road position; used by kind="crossing"

    def __post_init__(self) -> None:
        if self.kind not in LAYOUT_KINDS:
            raise ValueError(f"unknown layout kind {self.kind!r}")
        if self.n_lanes < 1 or self.lane_width <= 0.0 or self.length <= 0.0:
            raise ValueError("layout dimensions must be positive")

    def lane_centers(self) -> tuple[float, ...]:
        """Lane center offsets; the ego lane first, then alternating outward."""
        out = [0.0]
        step = 1
        while len(out) < self.n_lanes:
            out.append(step * self.lane_width)
            if len(out) < self.n_lanes:
                out.append(-step * self.lane_width)
            step += 1
        return tuple(out)

    def reference_paths(self) -> list[ReferencePath]:
        return [
            ReferencePath.straight((0.0, y), (self.length, y))
            for y in self.lane_centers()
        ]


@dataclass(frozen=True)
class SceneSpec:
    """A reproducible scene: layout, ego start and goal, agents with beliefs."""

    layout: LaneLayout
    ego: EgoState
    goal_s: float
    agents: tuple[AgentState, ...]
    hypotheses: tuple[AgentHypotheses, ...]
    seed: int
    format_version: int = SCENE_FORMAT_VERSION

    def __post_init__(self) -> None:
        if len(self.agents) != len(self.hypotheses):
            raise ValueError("agents and hypotheses disagree on count")

    @property
    def density(self) -> int:
        return len(self.agents)

    def belief(self) -> Belief:
        return Belief(self.hypotheses)


# ----------------------------------------------------------------------------
# Scene file format
# ----------------------------------------------------------------------------


def scene_to_json(scene: SceneSpec) -> str:
    lay = scene.layout
    doc = {
        "format_version": scene.format_version,
        "seed": scene.seed,
        "layout": {
            "kind": lay.kind,
            "n_lanes": lay.n_lanes,
            "lane_width": lay.lane_width,
            "length": lay.length,
            "crossing_x": lay.crossing_x,
        },
        "ego": {
            "x": scene.ego.x,
            "y": scene.ego.y,
            "heading": scene.ego.heading,
            "speed": scene.ego.speed,
        },
        "goal_s": scene.goal_s,
        "agents": [
            {
                "state": {
                    "x": a.x,
                    "y": a.y,
                    "heading": a.heading,
                    "speed": a.speed,
                    "half_length": a.half_length,
                    "half_width": a.half_width,
                },
                "intentions": [
                    {
                        "kind": it.kind,
                        "probability": it.probability,
                        "target_speed": it.target_speed,
                        "accel": it.accel,
                        "lateral_offset": it.lateral_offset,
                        "lateral_rate": it.lateral_rate,
                    }
                    for it in hyp.intentions
                ],
            }
            for a, hyp in zip(scene.agents, scene.hypotheses)
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def scene_from_json(text: str) -> SceneSpec:
    doc = json.loads(text)
    version = doc.get("format_version")
    if version != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene format version: {version!r}")
    lay = doc["layout"]
    agents = []
    hyps = []
    for entry in doc["agents"]:
        st = entry["state"]
        agents.append(
            AgentState(
                st["x"], st["y"], st["heading"], st["speed"],
                st["half_length"], st["half_width"],
            )
        )
        hyps.append(
            AgentHypotheses(
                tuple(
                    IntentionSpec(
                        it["kind"], it["probability"], it["target_speed"],
                        it["accel"], it["lateral_offset"], it["lateral_rate"],
                    )
                    for it in entry["intentions"]
                )
            )
        )
    ego = doc["ego"]
    return SceneSpec(
        layout=LaneLayout(
            lay["kind"], lay["n_lanes"], lay["lane_width"],
            lay["length"], lay["crossing_x"],
        ),
        ego=EgoState(ego["x"], ego["y"], ego["heading"], ego["speed"]),
        goal_s=doc["goal_s"],
        agents=tuple(agents),
        hypotheses=tuple(hyps),
        seed=doc["seed"],
        format_version=version,
    )


# ----------------------------------------------------------------------------
# Scene generation
# ----------------------------------------------------------------------------


def _highway_intentions(
    rng: np.random.Generator, y: float, speed: float, lanes: tuple[float, ...]
) -> AgentHypotheses:
    """1-3 intentions drawn from keep / brake / change lane / speed up."""
    others = [c for c in lanes if abs(c - y) > 1.0]
    target = min(others, key=lambda c: abs(c - y)) if others else y
    menu = (
        IntentionSpec("keep", 0.0, target_speed=speed),
        IntentionSpec("yield", 0.0, target_speed=0.0, accel=2.0),
        IntentionSpec(
            "cutin", 0.0, target_speed=speed,
            lateral_offset=target - y, lateral_rate=1.2,
        ),
        IntentionSpec("rush", 0.0, target_speed=speed + 3.0, accel=1.5),
    )
    n_int = int(rng.integers(1, 4))
    picks = rng.choice(len(menu), size=n_int, replace=False)
    probs = rng.dirichlet(np.ones(n_int))
    return AgentHypotheses(
        tuple(
            replace(menu[int(p)], probability=float(pr))
            for p, pr in zip(picks, probs)
        )
    )


def _crossing_intentions(
    rng: np.random.Generator, speed: float
) -> AgentHypotheses:
    """Cross at speed, or cross with a chance of yielding first."""
    if rng.random() < 0.5:
        return AgentHypotheses((IntentionSpec("cross", 1.0, target_speed=speed),))
    probs = rng.dirichlet(np.ones(2))
    return AgentHypotheses(
        (
            IntentionSpec("cross", float(probs[0]), target_speed=speed),
            IntentionSpec("yield", float(probs[1]), target_speed=0.0, accel=2.5),
        )
    )


def generate_scene(
    density: int,
    layout: str | LaneLayout = "highway",
    seed: int = 0,
    params: ModelParams | None = None,
) -> SceneSpec:
    """Deterministic scene with `density` agents placed collision-free.

    Placement retries are bounded; a density the layout cannot hold raises
    "scene too dense". The scene is a pure function of (density, layout,
    seed): identical inputs give identical output.
    """
    if density < 0:
        raise ValueError("density must be non-negative")
    lay = LaneLayout(kind=layout) if isinstance(layout, str) else layout
    params = params or ModelParams()
    rng = np.random.default_rng(seed)
    ego = EgoState(10.0, 0.0, 0.0, 13.9)
    lanes = lay.lane_centers()
    keep_out = Obb(
        ego.x, ego.y, ego.heading,
        params.ego_half_length + _EGO_ZONE_LENGTH,
        params.ego_half_width + _EGO_ZONE_WIDTH,
    )
    placed: list[Obb] = []
    states: list[AgentState] = []
    hyps: list[AgentHypotheses] = []
    for _ in range(density):
        ok = False
        for _attempt in range(80):
            on_crossing = lay.kind == "crossing" and rng.random() < 0.25
            if on_crossing:
                x = lay.crossing_x + rng.uniform(-0.4, 0.4)
                side = rng.random() < 0.5
                y = rng.uniform(8.0, 60.0) if side else rng.uniform(-60.0, -8.0)
                heading = -math.pi / 2.0 if side else math.pi / 2.0
                speed = rng.uniform(3.0, 8.0)
            else:
                x = rng.uniform(30.0, lay.length - 80.0)
                y = lanes[int(rng.integers(len(lanes)))] + rng.uniform(-0.4, 0.4)
                heading = 0.0
                speed = rng.uniform(4.0, 11.0)
            box = Obb(x, y, heading, 2.3 + _AGENT_CLEARANCE, 0.9 + _AGENT_CLEARANCE)
            if obb_overlap(box, keep_out):
                continue
            if any(obb_overlap(box, other) for other in placed):
                continue
            state = AgentState(x, y, heading, speed, 2.3, 0.9)
            hyp = (
                _crossing_intentions(rng, speed)
                if on_crossing
                else _highway_intentions(rng, y, speed, lanes)
            )
            placed.append(box)
            states.append(state)
            hyps.append(hyp)
            ok = True
            break
        if not ok:
            raise ValueError(f"scene too dense: {density} agents do not fit")
    return SceneSpec(
        layout=lay,
        ego=ego,
        goal_s=lay.length - 40.0,
        agents=tuple(states),
        hypotheses=tuple(hyps),
        seed=seed,
    )


# ----------------------------------------------------------------------------
# Closed-loop episodes
# ----------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    """One closed-loop run: executed states, events, and per-cycle timings.

    ego_states[g] is the ego after g control steps (start included).
    collision_events pair the control step with the agent hit. Wall times
    are not part of the determinism contract; everything else is a pure
    function of (scene, config, duration, replan_period, tilt).
    """

    scene_seed: int
    ego_states: list[EgoState]
    collision_events: list[tuple[int, int]]
    progress: float
    completed: bool
    plan_wall_ms: list[float]
    opt_wall_ms: list[float]
    cycle_edges: list[int]
    true_intentions: tuple[int, ...]


def episode_to_json(result: EpisodeResult) -> str:
    doc = {
        "scene_seed": result.scene_seed,
        "progress": result.progress,
        "completed": result.completed,
        "collision_events": [list(e) for e in result.collision_events],
        "true_intentions": list(result.true_intentions),
        "plan_wall_ms": result.plan_wall_ms,
        "opt_wall_ms": result.opt_wall_ms,
        "cycle_edges": result.cycle_edges,
        "ego_states": [
            {"x": s.x, "y": s.y, "heading": s.heading, "speed": s.speed}
            for s in result.ego_states
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def sample_true_world(
    scene: SceneSpec, n_steps: int, dt: float
) -> tuple[tuple[int, ...], list]:
    """Realize one true intention per agent and roll it over the episode."""
    rng = np.random.default_rng([scene.seed, _TRUE_WORLD_STREAM])
    ids = []
    trajs = []
    for a, hyp in zip(scene.agents, scene.hypotheses):
        u = rng.random()
        acc = 0.0
        idx = len(hyp.intentions) - 1
        for j, it in enumerate(hyp.intentions):
            acc += it.probability
            if u < acc:
                idx = j
                break
        ids.append(idx)
        trajs.append(roll_intention(a, hyp.intentions[idx], n_steps, dt))
    return tuple(ids), trajs


def run_episode(
    scene: SceneSpec,
    config: SearchConfig,
    duration: float = 15.0,
    replan_period: float = 0.5,
    tilt: float = DEFAULT_TILT,
    params: ModelParams | None = None,
) -> EpisodeResult:
    """Alternate planning and executing until the horizon, goal, or a crash.

    Each cycle re-plans from the current ego state and the true agents'
    current states (the belief itself is the scene prior throughout), then
    executes the selected trajectory for one replan period. Collisions are
    checked once per executed control step and end the episode.
    """
    if duration <= 0.0:
        raise ValueError("duration must be positive")
    params = params or ModelParams()
    dt = params.dt
    exec_steps = int(round(replan_period / dt))
    if exec_steps < 1:
        raise ValueError("replan period must cover at least one control step")
    total_steps = int(round(duration / dt))
    paths = scene.layout.reference_paths()
    belief = scene.belief()
    n = len(scene.agents)
    true_ids, true_trajs = sample_true_world(scene, total_steps, dt)

    def agent_at(i: int, g: int) -> AgentState:
        return scene.agents[i] if g == 0 else true_trajs[i].state_at(g - 1)

    def first_hit(state: EgoState, g: int) -> int:
        ego_box = Obb(
            state.x, state.y, state.heading,
            params.ego_half_length, params.ego_half_width,
        )
        for i in range(n):
            if obb_overlap(ego_box, agent_obb(agent_at(i, g))):
                return i
        return -1

    ego = scene.ego
    ego_states = [ego]
    events: list[tuple[int, int]] = []
    plan_ms: list[float] = []
    opt_ms: list[float] = []
    edges: list[int] = []
    collided = False
    reached = False
    g = 0
    pre = first_hit(ego, 0)
    if pre >= 0:
        events.append((0, pre))
        collided = True
    while not collided and not reached and g < total_steps:
        cycle = g // exec_steps
        agents_now = tuple(agent_at(i, g) for i in range(n))
        cfg = replace(config, seed=config.seed + cycle)
        result = plan(ego, agents_now, belief, paths, params, cfg)
        plan_ms.append(result.telemetry.wall_ms)
        edges.append(result.telemetry.total_edges)
        t0 = perf_counter()
        opt = optimize_trajectory(
            ego, agents_now, belief, paths, params, cfg, result.pi_star, tilt=tilt
        )
        opt_ms.append((perf_counter() - t0) * 1000.0)
        tau = opt.trajectory
        for u in range(exec_steps):
            if g >= total_steps:
                break
            ego = tau.state_at(u)
            g += 1
            ego_states.append(ego)
            hit = first_hit(ego, g)
            if hit >= 0:
                events.append((g, hit))
                collided = True
                break
            if paths[0].project(ego.x, ego.y).s >= scene.goal_s:
                reached = True
                break
    s0 = paths[0].project(scene.ego.x, scene.ego.y).s
    s1 = paths[0].project(ego.x, ego.y).s
    return EpisodeResult(
        scene_seed=scene.seed,
        ego_states=ego_states,
        collision_events=events,
        progress=s1 - s0,
        completed=not collided,
        plan_wall_ms=plan_ms,
        opt_wall_ms=opt_ms,
        cycle_edges=edges,
        true_intentions=true_ids,
    )


# ----------------------------------------------------------------------------
# Throughput benchmark
# ----------------------------------------------------------------------------

VARIANTS = ("serial", "single", "full", "lambda0")

BENCH_CSV_HEADER = (
    "density,variant,repetition,agents,total_edges,wall_ms,"
    "edges_per_ms,imbalance,speedup_vs_serial"
)


@dataclass(frozen=True)
class ThroughputRecord:
    """One benchmark cell: tree construction throughput for one cycle."""

    density: int
    variant: str
    repetition: int
    agents: int
    total_edges: int
    wall_ms: float
    edges_per_ms: float
    imbalance: float
    speedup_vs_serial: float

    def csv_row(self) -> str:
        return ",".join(
            (
                str(self.density),
                self.variant,
                str(self.repetition),
                str(self.agents),
                str(self.total_edges),
                f"{self.wall_ms:.6f}",
                f"{self.edges_per_ms:.6f}",
                f"{self.imbalance:.6f}",
                f"{self.speedup_vs_serial:.6f}",
            )
        )


def benchmark_csv(records: Sequence[ThroughputRecord]) -> str:
    lines = [BENCH_CSV_HEADER]
    lines.extend(r.csv_row() for r in records)
    return "\n".join(lines) + "\n"


def _base_config(seed: int, iterations: int, batch_width: int) -> SearchConfig:
    # Iteration-budgeted and convergence-free, so edge counts are a pure
    # function of the seed while wall time stays free to vary.
    return SearchConfig(
        n_scenarios=batch_width,
        n_workers=1,
        batch_width=batch_width,
        balance_lambda=0.5,
        time_budget_ms=None,
        max_iterations=iterations,
        convergence_epsilon=0.0,
        seed=seed,
    )


def run_benchmark(
    densities: Sequence[int],
    variants: Sequence[str] = VARIANTS,
    repetitions: int = 3,
    seed: int = 0,
    layout: str = "highway",
    iterations: int = 100,
    batch_width: int = 8,
    workers: int | None = None,
    params: ModelParams | None = None,
) -> list[ThroughputRecord]:
    """One planning cycle per (density, variant, repetition) cell.

    The serial reference runs once per cell regardless of the variant list
    (it is every record's speedup denominator). The imbalance column always
    comes from a plain-UCB probe of the variant's shape, so the balance
    penalty cannot mask the quantity it reacts to. Cells run sequentially;
    scene generation and CSV writing stay outside all timings.
    """
    if not densities or not variants:
        raise ValueError("need at least one density and one variant")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants: {unknown}; pick from {VARIANTS}")
    params = params or ModelParams()
    if workers is None:
        workers = min(8, os.cpu_count() or 1)
    records: list[ThroughputRecord] = []
    for density in densities:
        for rep in range(repetitions):
            scene = generate_scene(density, layout, seed + rep)
            paths = scene.layout.reference_paths()
            belief = scene.belief()
            base = _base_config(seed + rep, iterations, batch_width)
            plan_args = (scene.ego, scene.agents, belief, paths, params)
            serial_result = serial_plan(*plan_args, base)
            serial_rate = serial_result.telemetry.edges_per_ms
            probe_cache: dict[tuple[int, int], float] = {}

            def probe_imbalance(cfg: SearchConfig) -> float:
                key = (cfg.n_scenarios, cfg.batch_width)
                if key not in probe_cache:
                    result = plan(*plan_args, replace(cfg, balance_lambda=0.0))
                    probe_cache[key] = result.telemetry.imbalance
                return probe_cache[key]

            for variant in variants:
                if variant == "serial":
                    result = serial_result
                    imbalance = probe_imbalance(base)
                elif variant == "single":
                    result = plan(*plan_args, base)
                    imbalance = probe_imbalance(base)
                elif variant == "lambda0":
                    cfg = replace(base, balance_lambda=0.0)
                    result = plan(*plan_args, cfg)
                    imbalance = result.telemetry.imbalance
                    probe_cache[(cfg.n_scenarios, cfg.batch_width)] = imbalance
                else:
                    cfg = replace(
                        base,
                        n_scenarios=workers * batch_width,
                        n_workers=workers,
                    )
                    result = plan(*plan_args, cfg)
                    imbalance = probe_imbalance(cfg)
                t = result.telemetry
                records.append(
                    ThroughputRecord(
                        density=density,
                        variant=variant,
                        repetition=rep,
                        agents=scene.density,
                        total_edges=t.total_edges,
                        wall_ms=t.wall_ms,
                        edges_per_ms=t.edges_per_ms,
                        imbalance=imbalance,
                        speedup_vs_serial=t.edges_per_ms / serial_rate,
                    )
                )
    return records
