"""Command-line interface smoke tests, run in-process through main()."""

import json

import pytest

from vecplan.cli import main
from vecplan.harness import BENCH_CSV_HEADER, generate_scene, scene_from_json, scene_to_json

FAST = ["--iterations", "3", "--batch-width", "4"]


class TestSceneCommand:
    def test_writes_loadable_scene(self, tmp_path):
        out = tmp_path / "scene.json"
        code = main(["scene", "--density", "4", "--seed", "2", "--output", str(out)])
        assert code == 0
        scene = scene_from_json(out.read_text())
        assert scene.density == 4
        assert scene == generate_scene(4, "highway", 2)

    def test_prints_to_stdout_without_output(self, capsys):
        assert main(["scene", "--density", "1", "--seed", "0"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["format_version"] == 1


class TestPlanCommand:
    def test_generated_scene(self, capsys, tmp_path):
        out = tmp_path / "telemetry.csv"
        code = main(
            ["plan", "--density", "3", "--seed", "1", *FAST, "--output", str(out)]
        )
        assert code == 0
        text = capsys.readouterr().out
        assert "pi*:" in text
        assert "best action:" in text
        lines = out.read_text().strip().split("\n")
        assert len(lines) == 2
        assert lines[0].startswith("wall_ms,")

    def test_scene_file(self, tmp_path, capsys):
        path = tmp_path / "scene.json"
        path.write_text(scene_to_json(generate_scene(2, "highway", 5)))
        assert main(["plan", "--scene", str(path), *FAST]) == 0
        assert "root Q:" in capsys.readouterr().out

    def test_invalid_shape_exits_nonzero(self, capsys):
        code = main(
            ["plan", "--density", "1", "--scenarios", "7", "--workers", "2",
             "--batch-width", "4"]
        )
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestEpisodeCommand:
    def test_ego_only_episode(self, tmp_path, capsys):
        out = tmp_path / "episode.json"
        code = main(
            ["episode", "--density", "0", "--duration", "1.5", *FAST,
             "--output", str(out)]
        )
        assert code == 0
        assert "completed" in capsys.readouterr().out
        doc = json.loads(out.read_text())
        assert doc["completed"] is True
        assert doc["collision_events"] == []


class TestBenchCommands:
    def test_bench_writes_csv(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        code = main(
            ["bench", "--densities", "2", "--variants", "serial,single",
             "--repetitions", "1", "--iterations", "3", "--batch-width", "4",
             "--output", str(out)]
        )
        assert code == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == BENCH_CSV_HEADER
        assert len(lines) == 3

    def test_ablate_covers_all_variants(self, tmp_path):
        out = tmp_path / "ablate.csv"
        code = main(
            ["ablate", "--density", "2", "--repetitions", "1",
             "--iterations", "3", "--batch-width", "4", "--workers", "2",
             "--output", str(out)]
        )
        assert code == 0
        rows = out.read_text().strip().split("\n")[1:]
        variants = [row.split(",")[1] for row in rows]
        assert variants == ["serial", "single", "full", "lambda0"]

    def test_unknown_variant_exits_nonzero(self, capsys):
        code = main(
            ["bench", "--densities", "2", "--variants", "warp",
             "--repetitions", "1"]
        )
        assert code == 2
        assert "unknown variants" in capsys.readouterr().err
