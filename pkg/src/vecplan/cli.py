"""Command-line front end.

Subcommands: `plan` runs one planning cycle and prints the policy, `episode`
runs a closed-loop episode, `bench` sweeps densities and planner variants,
and `ablate` compares all variants at a single density. Scenes come from a
JSON file (--scene) or are generated on the fly (--density/--layout/--seed).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import (
    VARIANTS,
    SceneSpec,
    benchmark_csv,
    episode_to_json,
    generate_scene,
    run_benchmark,
    run_episode,
    scene_from_json,
    scene_to_json,
)
from .qmdp_search import SearchConfig, csv_header, plan
from .scenario_model import ModelParams
from .traj_opt import DEFAULT_TILT


def _add_scene_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", type=Path, default=None, help="scene JSON file")
    p.add_argument("--density", type=int, default=10, help="agent count")
    p.add_argument(
        "--layout", choices=("highway", "crossing"), default="highway"
    )
    p.add_argument("--seed", type=int, default=0)


def _add_search_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workers", type=int, default=1, metavar="M")
    p.add_argument("--batch-width", type=int, default=8, metavar="W")
    p.add_argument(
        "--scenarios", type=int, default=None, metavar="K",
        help="scenario count (default: workers * batch width)",
    )
    p.add_argument(
        "--lambda", dest="balance_lambda", type=float, default=0.5,
        help="balance penalty weight",
    )
    p.add_argument("--time-budget-ms", type=float, default=None)
    p.add_argument(
        "--iterations", type=int, default=None,
        help="fixed iteration budget instead of a time budget",
    )


def _config_from(args: argparse.Namespace) -> SearchConfig:
    k = args.scenarios
    if k is None:
        k = args.workers * args.batch_width
    budget = args.time_budget_ms
    iterations = args.iterations
    if budget is None and iterations is None:
        budget = 100.0
    return SearchConfig(
        n_scenarios=k,
        n_workers=args.workers,
        batch_width=args.batch_width,
        balance_lambda=args.balance_lambda,
        time_budget_ms=budget,
        max_iterations=iterations,
        seed=args.seed,
    )


def _scene_from(args: argparse.Namespace) -> SceneSpec:
    if args.scene is not None:
        return scene_from_json(args.scene.read_text())
    return generate_scene(args.density, args.layout, args.seed)


def _cmd_plan(args: argparse.Namespace) -> int:
    scene = _scene_from(args)
    config = _config_from(args)
    params = ModelParams()
    result = plan(
        scene.ego,
        scene.agents,
        scene.belief(),
        scene.layout.reference_paths(),
        params,
        config,
    )
    t = result.telemetry
    print(f"scene: {scene.density} agents, layout {scene.layout.kind}, seed {scene.seed}")
    print("pi*:", " -> ".join(str(a) for a in result.pi_star))
    print(f"best action: {result.best_action} (index {result.pi_star_indices[0]})")
    print("root Q:", " ".join(f"{q:.4f}" for q in result.root_q))
    print(
        f"iterations {t.iterations}, edges {t.total_edges}, "
        f"wall {t.wall_ms:.2f} ms, edges/ms {t.edges_per_ms:.2f}, "
        f"imbalance {t.imbalance:.4f}"
    )
    if args.output is not None:
        header = csv_header(len(result.actions))
        args.output.write_text(header + "\n" + result.csv_row() + "\n")
        print(f"wrote {args.output}")
    return 0


def _cmd_episode(args: argparse.Namespace) -> int:
    scene = _scene_from(args)
    config = _config_from(args)
    result = run_episode(
        scene,
        config,
        duration=args.duration,
        replan_period=args.replan_period,
        tilt=args.tilt,
    )
    status = "completed" if result.completed else "collided"
    print(
        f"{status}: progress {result.progress:.1f} m over "
        f"{len(result.ego_states) - 1} steps, {len(result.plan_wall_ms)} cycles"
    )
    for step, agent in result.collision_events:
        print(f"collision at step {step} with agent {agent}")
    if result.plan_wall_ms:
        mean_plan = sum(result.plan_wall_ms) / len(result.plan_wall_ms)
        mean_opt = sum(result.opt_wall_ms) / len(result.opt_wall_ms)
        print(f"mean plan {mean_plan:.2f} ms, mean trajectory opt {mean_opt:.2f} ms")
    if args.output is not None:
        args.output.write_text(episode_to_json(result))
        print(f"wrote {args.output}")
    return 0


def _run_bench(args: argparse.Namespace, densities: list[int], variants: list[str]) -> int:
    records = run_benchmark(
        densities,
        variants,
        repetitions=args.repetitions,
        seed=args.seed,
        layout=args.layout,
        iterations=args.iterations,
        batch_width=args.batch_width,
        workers=args.workers if args.workers > 1 else None,
    )
    text = benchmark_csv(records)
    if args.output is not None:
        args.output.write_text(text)
        print(f"wrote {args.output} ({len(records)} records)")
    else:
        print(text, end="")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    densities = [int(v) for v in args.densities.split(",")]
    variants = args.variants.split(",")
    return _run_bench(args, densities, variants)


def _cmd_ablate(args: argparse.Namespace) -> int:
    return _run_bench(args, [args.density], list(VARIANTS))


def _cmd_scene(args: argparse.Namespace) -> int:
    scene = generate_scene(args.density, args.layout, args.seed)
    text = scene_to_json(scene)
    if args.output is not None:
        args.output.write_text(text)
        print(f"wrote {args.output}")
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vecplan",
        description="Vectorized belief-tree planner for interactive driving.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="run one planning cycle")
    _add_scene_args(p)
    _add_search_args(p)
    p.add_argument("--output", type=Path, default=None, help="telemetry CSV")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("episode", help="run a closed-loop episode")
    _add_scene_args(p)
    _add_search_args(p)
    p.add_argument("--duration", type=float, default=15.0)
    p.add_argument("--replan-period", type=float, default=0.5)
    p.add_argument("--tilt", type=float, default=DEFAULT_TILT)
    p.add_argument("--output", type=Path, default=None, help="episode JSON")
    p.set_defaults(func=_cmd_episode)

    p = sub.add_parser("bench", help="sweep densities and planner variants")
    p.add_argument("--densities", default="5,15,30,60")
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--layout", choices=("highway", "crossing"), default="highway")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, metavar="M")
    p.add_argument("--batch-width", type=int, default=8, metavar="W")
    p.add_argument("--output", type=Path, default=None, help="results CSV")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ablate", help="all variants at one density")
    p.add_argument("--density", type=int, default=30)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--layout", choices=("highway", "crossing"), default="highway")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, metavar="M")
    p.add_argument("--batch-width", type=int, default=8, metavar="W")
    p.add_argument("--output", type=Path, default=None, help="results CSV")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("scene", help="generate a scene JSON file")
    p.add_argument("--density", type=int, default=10)
    p.add_argument("--layout", choices=("highway", "crossing"), default="highway")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", type=Path, default=None)
    p.set_defaults(func=_cmd_scene)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
